//! Core of a deterministic federated learning simulator.
//!
//! Clients cut their flattened model into fixed-size parameter packages, share
//! only the packages whose cosine similarity to the global model falls below
//! the whole-model similarity, and tag each shared package with a mask weight
//! made of a direction term (cosine) and a distribution-distance term (KL
//! divergence between softmax-normalized packages). The server normalizes
//! those weights per package and folds the shared deltas into the global
//! model. FedAvg, FedProx and magnitude Top-K baselines run under the same
//! round loop with byte-exact uplink and downlink metering.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! wall-clock timing live in the `fedcspack` companion crate.

#![no_std]
extern crate alloc;

pub mod aggregation;
pub mod error;
pub mod model;
pub mod packing;
pub mod partition;
pub mod report;
pub mod seed;
pub mod sim;
pub mod wire;

pub use aggregation::{
    aggregate, fold_masks, selective_pull, ClientUpdate, Fusion, GlobalMask, ServerState,
};
pub use error::{Error, Result};
pub use model::{Activation, Batch, FlatParams, ShapeSpec, TrainConfig};
pub use packing::{DeltaPackages, LocalMask, PackageView, SimilarityProfile};
pub use partition::{Dataset, Partition, PartitionLaw, PartitionSpec};
pub use report::RunSummary;
pub use sim::{Method, PayloadMode, RoundMetrics, RunConfig, Simulation, WeightMode};
pub use wire::{DecodeError, PackedUpdate, UpdateEntry};
