//! Round loop: client sampling, local work, wire exchange with traffic
//! metering, server aggregation and evaluation. FedCSPACK and the baselines
//! share the loop; only the client upload and the server merge differ.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::aggregation::{aggregate, selective_pull, ClientUpdate, Fusion, ServerState};
use crate::error::{Error, Result};
use crate::model::{accuracy, local_train, Batch, FlatParams, ShapeSpec, TrainConfig};
use crate::packing::{
    build_mask, ceil_share, extract_deltas, extract_raw, package_views, score_packages,
    select_topk, DeltaPackages, LocalMask,
};
use crate::partition::{partition, synth_blobs, Dataset, Partition, PartitionSpec};
use crate::seed::{self, rng_for};
use crate::wire::{decode_update, encode_update, PackedUpdate, UpdateEntry};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", deny_unknown_fields)
)]
pub enum Method {
    Fedcspack,
    Fedavg,
    Fedprox { mu: f64 },
    MagnitudeTopk { fraction: f64 },
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Fedcspack => "fedcspack",
            Method::Fedavg => "fedavg",
            Method::Fedprox { .. } => "fedprox",
            Method::MagnitudeTopk { .. } => "magnitude_topk",
        }
    }
}

/// What a FedCSPACK client uploads for each shared package.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PayloadMode {
    /// Local minus global; the server adds the weighted mean.
    #[default]
    Delta,
    /// Local parameters; the server replaces the slice with the weighted mean.
    Raw,
}

/// Which terms make up a shared package's mask weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum WeightMode {
    /// Cosine plus KL.
    #[default]
    Dual,
    /// Cosine only (KL term zeroed).
    CosOnly,
    /// KL only (cosine term zeroed). Selection still uses cosine.
    KlOnly,
}

/// Where the run's rows come from.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", deny_unknown_fields)
)]
pub enum DatasetSource {
    Synthetic {
        num_classes: usize,
        dim: usize,
        samples_per_class: usize,
        spread: f64,
        seed: u64,
    },
    /// IDX image/label file pair; resolved by the host crate.
    Idx { images: String, labels: String },
}

impl DatasetSource {
    /// Build an in-memory dataset. File-backed sources need the host crate.
    pub fn synthesize(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic {
                num_classes,
                dim,
                samples_per_class,
                spread,
                seed,
            } => synth_blobs(*num_classes, *dim, *samples_per_class, *spread, *seed),
            DatasetSource::Idx { .. } => {
                Err(Error::config("idx datasets must be loaded from files"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct RunConfig {
    pub method: Method,
    pub rounds: u32,
    pub clients: usize,
    pub cpr: f64,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub pack: usize,
    #[cfg_attr(feature = "serde", serde(default = "one"))]
    pub cap_ratio: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub payload: PayloadMode,
    #[cfg_attr(feature = "serde", serde(default))]
    pub weight_mode: WeightMode,
    pub seed: u64,
    pub partition: PartitionSpec,
    pub model: ShapeSpec,
    pub dataset: DatasetSource,
}

#[cfg(feature = "serde")]
fn one() -> f64 {
    1.0
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.clients == 0 {
            return Err(Error::config("clients must be at least 1"));
        }
        if self.clients != self.partition.num_clients {
            return Err(Error::config(alloc::format!(
                "clients = {} but partition.num_clients = {}",
                self.clients,
                self.partition.num_clients
            )));
        }
        if !(self.cpr > 0.0 && self.cpr <= 1.0) {
            return Err(Error::config("cpr must lie in (0, 1]"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.pack == 0 {
            return Err(Error::config("pack must be at least 1"));
        }
        if !(self.cap_ratio > 0.0 && self.cap_ratio <= 1.0) {
            return Err(Error::config("cap_ratio must lie in (0, 1]"));
        }
        match self.method {
            Method::Fedprox { mu } if !(mu >= 0.0 && mu.is_finite()) => {
                return Err(Error::config("fedprox mu must be non-negative"));
            }
            Method::MagnitudeTopk { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                return Err(Error::config("magnitude_topk fraction must lie in (0, 1]"));
            }
            _ => {}
        }
        self.partition.validate()
    }

    /// Clients sampled each round, `ceil(cpr * N)`.
    pub fn clients_per_round(&self) -> usize {
        ceil_share(self.cpr, self.clients)
    }

    /// Uplink bytes of one round if every sampled client sent its whole model as `f32`.
    pub fn dense_bytes_per_round(&self) -> u64 {
        (self.clients_per_round() * 4 * self.model.total_params()) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundMetrics {
    pub round: u32,
    pub method: String,
    pub global_test_accuracy: f64,
    pub mean_personalized_accuracy: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_ms: f64,
    /// Clients drawn for the round, ascending.
    pub sampled: Vec<u32>,
    /// Sampled clients that actually uploaded.
    pub participating: Vec<u32>,
    pub protocol_violations: u32,
    /// Accuracy of each client's personalized model on its own test rows.
    pub per_client_personalized: Vec<f64>,
    /// Accuracy of the global model on each client's test rows.
    pub per_client_global: Vec<f64>,
}

/// `ceil(cpr * n)` distinct clients, ascending, drawn from the round's stream.
pub fn sample_clients(seed: u64, round: u32, n: usize, cpr: f64) -> Vec<u32> {
    let m = ceil_share(cpr, n);
    let mut rng = rng_for(seed, seed::SAMPLE, round as u64, 0);
    let mut picked: Vec<u32> = rand::seq::index::sample(&mut rng, n, m)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    picked.sort_unstable();
    picked
}

/// Keep the `ceil(fraction * d)` largest-magnitude coordinates of
/// `local - global`, ties to the lower coordinate. Indices come back ascending.
pub fn baseline_magnitude_topk(
    local: &FlatParams,
    global: &FlatParams,
    fraction: f64,
) -> Result<(Vec<usize>, Vec<f32>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("fraction must lie in (0, 1]"));
    }
    if local.shape() != global.shape() {
        return Err(Error::shape("model shape", global.len(), local.len()));
    }
    let delta: Vec<f32> = local
        .values()
        .iter()
        .zip(global.values())
        .map(|(l, g)| l - g)
        .collect();
    let k = ceil_share(fraction, delta.len());
    let mut order: Vec<usize> = (0..delta.len()).collect();
    order.select_nth_unstable_by(k - 1, |&a, &b| {
        delta[b].abs().total_cmp(&delta[a].abs()).then(a.cmp(&b))
    });
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    let values = keep.iter().map(|&i| delta[i]).collect();
    Ok((keep, values))
}

/// Global plus the plain mean of dense client deltas, folded in the order given.
fn average_dense(global: &FlatParams, deltas: &[Vec<f32>]) -> Result<FlatParams> {
    if deltas.is_empty() {
        return Ok(global.clone());
    }
    let share = 1.0 / deltas.len() as f64;
    let mut acc = vec![0.0f64; global.len()];
    for d in deltas {
        for (a, &x) in acc.iter_mut().zip(d) {
            *a += share * x as f64;
        }
    }
    let values = global
        .values()
        .iter()
        .zip(&acc)
        .map(|(&g, &a)| (g as f64 + a) as f32)
        .collect();
    FlatParams::new(global.shape().clone(), values)
}

/// Global plus, per coordinate, the mean of the clients that sent it.
fn average_sparse(global: &FlatParams, updates: &[(Vec<usize>, Vec<f32>)]) -> Result<FlatParams> {
    let mut sum = vec![0.0f64; global.len()];
    let mut count = vec![0u32; global.len()];
    for (idx, vals) in updates {
        for (&i, &v) in idx.iter().zip(vals) {
            sum[i] += v as f64;
            count[i] += 1;
        }
    }
    let values = global
        .values()
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            if count[i] == 0 {
                g
            } else {
                (g as f64 + sum[i] / count[i] as f64) as f32
            }
        })
        .collect();
    FlatParams::new(global.shape().clone(), values)
}

/// Accuracy summary of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub global_acc: f64,
    pub personalized_acc: f64,
    pub per_client_personalized: Vec<f64>,
    pub per_client_global: Vec<f64>,
}

/// Global accuracy on the pooled test rows, and the `|D_i|`-weighted mean of
/// each client model's accuracy on that client's own test rows. Clients with
/// no test rows report NaN and are left out of the mean.
pub fn evaluate(
    global: &FlatParams,
    client_models: &[FlatParams],
    test_sets: &[Batch],
    sizes: &[usize],
    pooled_test: &Batch,
) -> Result<Evaluation> {
    let global_acc = if pooled_test.is_empty() {
        0.0
    } else {
        accuracy(global, pooled_test)?
    };
    let mut per_client_personalized = Vec::with_capacity(client_models.len());
    let mut per_client_global = Vec::with_capacity(client_models.len());
    let (mut weighted, mut weight) = (0.0f64, 0.0f64);
    for ((model, test), &size) in client_models.iter().zip(test_sets).zip(sizes) {
        if test.is_empty() {
            per_client_personalized.push(f64::NAN);
            per_client_global.push(f64::NAN);
            continue;
        }
        let acc = accuracy(model, test)?;
        per_client_personalized.push(acc);
        per_client_global.push(accuracy(global, test)?);
        weighted += size as f64 * acc;
        weight += size as f64;
    }
    Ok(Evaluation {
        global_acc,
        personalized_acc: if weight > 0.0 { weighted / weight } else { 0.0 },
        per_client_personalized,
        per_client_global,
    })
}

/// A running simulation. Drive it with [`Simulation::step`] or [`Simulation::run`].
pub struct Simulation {
    config: RunConfig,
    partition: Partition,
    train_sets: Vec<Batch>,
    test_sets: Vec<Batch>,
    sizes: Vec<usize>,
    pooled_test: Batch,
    server: ServerState,
    locals: Vec<FlatParams>,
    constant_weight: Option<f32>,
    clock: Option<fn() -> f64>,
    last_uploads: Vec<PackedUpdate>,
}

impl Simulation {
    pub fn new(config: RunConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        if config.model.input_dim() != data.dim() {
            return Err(Error::shape(
                "model input",
                data.dim(),
                config.model.input_dim(),
            ));
        }
        if config.model.num_classes() != data.num_classes {
            return Err(Error::shape(
                "model output",
                data.num_classes,
                config.model.num_classes(),
            ));
        }
        let partition = partition(data, &config.partition)?;
        let train_sets: Vec<Batch> = partition
            .clients
            .iter()
            .map(|c| data.batch.select(&c.train))
            .collect();
        let test_sets: Vec<Batch> = partition
            .clients
            .iter()
            .map(|c| data.batch.select(&c.test))
            .collect();
        let sizes = partition.clients.iter().map(|c| c.rows.len()).collect();
        let mut pooled: Vec<usize> = partition
            .clients
            .iter()
            .flat_map(|c| c.test.iter().copied())
            .collect();
        pooled.sort_unstable();
        let pooled_test = data.batch.select(&pooled);

        let init = FlatParams::init(
            config.model.clone(),
            &mut rng_for(config.seed, seed::INIT, 0, 0),
        );
        let server = ServerState::new(init.clone(), config.pack)?;
        let locals = vec![init; config.clients];
        Ok(Simulation {
            config,
            partition,
            train_sets,
            test_sets,
            sizes,
            pooled_test,
            server,
            locals,
            constant_weight: None,
            clock: None,
            last_uploads: Vec::new(),
        })
    }

    /// Replace every FedCSPACK mask term with `(weight, 0)`. Test hook used to
    /// line the protocol up against plain federated averaging.
    pub fn with_constant_weight(mut self, weight: f32) -> Self {
        self.constant_weight = Some(weight);
        self
    }

    /// Millisecond clock used for `wall_ms`. Without one, `wall_ms` is 0.
    pub fn with_clock(mut self, clock: fn() -> f64) -> Self {
        self.clock = Some(clock);
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn global_params(&self) -> &FlatParams {
        &self.server.global_params
    }

    pub fn client_models(&self) -> &[FlatParams] {
        &self.locals
    }

    /// Uploads of the most recent round, as the clients encoded them.
    pub fn last_uploads(&self) -> &[PackedUpdate] {
        &self.last_uploads
    }

    pub fn is_finished(&self) -> bool {
        self.server.round >= self.config.rounds
    }

    pub fn run(mut self) -> Result<Vec<RoundMetrics>> {
        let mut out = Vec::with_capacity(self.config.rounds as usize);
        while !self.is_finished() {
            out.push(self.step()?);
        }
        Ok(out)
    }

    fn now(&self) -> f64 {
        self.clock.map_or(0.0, |c| c())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.config.local_epochs,
            lr: self.config.lr,
            batch_size: self.config.batch_size,
            prox_mu: match self.config.method {
                Method::Fedprox { mu } => mu,
                _ => 0.0,
            },
        }
    }

    /// Dense broadcast of the global model and mask totals to one client.
    fn broadcast(&self, client: u32) -> PackedUpdate {
        let global = self.server.global_params.values();
        let entries = package_views(global.len(), self.config.pack)
            .map(|v| UpdateEntry {
                package_index: v.index as u32,
                theta: 0.0,
                beta: self.server.global_mask.totals[v.index] as f32,
                payload: global[v.range()].to_vec(),
            })
            .collect();
        PackedUpdate {
            client_id: client,
            round: self.server.round,
            pack: self.config.pack as u32,
            entries,
        }
    }

    /// The model a client holds after taking the current global state.
    fn pulled(&self, client: usize) -> Result<FlatParams> {
        match self.config.method {
            Method::Fedcspack => selective_pull(
                &self.locals[client],
                &self.server.global_params,
                &self.server.global_mask,
                self.config.pack,
            ),
            _ => Ok(self.server.global_params.clone()),
        }
    }

    fn client_upload(&mut self, client: u32, trained: &FlatParams) -> Result<PackedUpdate> {
        let global = &self.server.global_params;
        let round = self.server.round;
        let d = global.len();
        let update = match self.config.method {
            Method::Fedcspack => {
                let pack = self.config.pack;
                let profile = score_packages(trained, global, pack)?;
                let selected = select_topk(&profile, self.config.cap_ratio)?;
                // the terms that make up each mask weight; selection above
                // always uses the cosine profile
                let mut terms = profile;
                match (self.constant_weight, self.config.weight_mode) {
                    (Some(w), _) => {
                        terms.per_package_cos.iter_mut().for_each(|c| *c = w as f64);
                        terms.per_package_kl.iter_mut().for_each(|k| *k = 0.0);
                    }
                    (None, WeightMode::Dual) => {}
                    (None, WeightMode::CosOnly) => {
                        terms.per_package_kl.iter_mut().for_each(|k| *k = 0.0)
                    }
                    (None, WeightMode::KlOnly) => {
                        terms.per_package_cos.iter_mut().for_each(|c| *c = 0.0)
                    }
                }
                let mask = build_mask(&terms, &selected)?;
                let payloads = match self.config.payload {
                    PayloadMode::Delta => extract_deltas(trained, global, &mask.selected, pack)?,
                    PayloadMode::Raw => extract_raw(trained, global, &mask.selected, pack)?,
                };
                let entries = payloads
                    .packages
                    .into_iter()
                    .map(|(j, payload)| UpdateEntry {
                        package_index: j as u32,
                        theta: terms.per_package_cos[j] as f32,
                        beta: terms.per_package_kl[j] as f32,
                        payload,
                    })
                    .collect();
                PackedUpdate {
                    client_id: client,
                    round,
                    pack: pack as u32,
                    entries,
                }
            }
            Method::Fedavg | Method::Fedprox { .. } => PackedUpdate {
                client_id: client,
                round,
                pack: d as u32,
                entries: vec![UpdateEntry {
                    package_index: 0,
                    theta: 0.0,
                    beta: 0.0,
                    payload: trained
                        .values()
                        .iter()
                        .zip(global.values())
                        .map(|(l, g)| l - g)
                        .collect(),
                }],
            },
            Method::MagnitudeTopk { fraction } => {
                let (idx, vals) = baseline_magnitude_topk(trained, global, fraction)?;
                PackedUpdate {
                    client_id: client,
                    round,
                    pack: 1,
                    entries: idx
                        .into_iter()
                        .zip(vals)
                        .map(|(i, v)| UpdateEntry {
                            package_index: i as u32,
                            theta: 0.0,
                            beta: 0.0,
                            payload: vec![v],
                        })
                        .collect(),
                }
            }
        };
        Ok(update)
    }

    /// Server-side merge of decoded uploads. Returns the number of rejected updates.
    fn merge(&mut self, received: Vec<PackedUpdate>) -> Result<u32> {
        let global = &self.server.global_params;
        match self.config.method {
            Method::Fedcspack => {
                let j = self.server.num_packages();
                let updates = received
                    .into_iter()
                    .map(|u| {
                        let terms: Vec<(usize, f64, f64)> = u
                            .entries
                            .iter()
                            .map(|e| (e.package_index as usize, e.theta as f64, e.beta as f64))
                            .collect();
                        let mask = LocalMask::from_terms(j, &terms).unwrap_or(LocalMask {
                            weights: Vec::new(),
                            selected: Vec::new(),
                        });
                        let packages: BTreeMap<usize, Vec<f32>> = u
                            .entries
                            .into_iter()
                            .map(|e| (e.package_index as usize, e.payload))
                            .collect();
                        ClientUpdate {
                            client_id: u.client_id,
                            mask,
                            payloads: DeltaPackages { packages },
                        }
                    })
                    .collect::<Vec<_>>();
                let fusion = match self.config.payload {
                    PayloadMode::Delta => Fusion::Additive,
                    PayloadMode::Raw => Fusion::Replace,
                };
                let outcome = aggregate(&self.server, &updates, fusion)?;
                let rejected = outcome.rejected.len() as u32;
                self.server = outcome.state;
                Ok(rejected)
            }
            Method::Fedavg | Method::Fedprox { .. } => {
                let d = global.len();
                let (ok, bad): (Vec<_>, Vec<_>) = received
                    .into_iter()
                    .partition(|u| u.entries.len() == 1 && u.entries[0].payload.len() == d);
                let deltas: Vec<Vec<f32>> = ok
                    .into_iter()
                    .map(|mut u| u.entries.remove(0).payload)
                    .collect();
                self.server.global_params = average_dense(global, &deltas)?;
                self.server.round += 1;
                Ok(bad.len() as u32)
            }
            Method::MagnitudeTopk { .. } => {
                let d = global.len();
                let (ok, bad): (Vec<_>, Vec<_>) = received.into_iter().partition(|u| {
                    u.entries
                        .iter()
                        .all(|e| (e.package_index as usize) < d && e.payload.len() == 1)
                });
                let sparse: Vec<(Vec<usize>, Vec<f32>)> = ok
                    .into_iter()
                    .map(|u| {
                        u.entries
                            .into_iter()
                            .map(|e| (e.package_index as usize, e.payload[0]))
                            .unzip()
                    })
                    .collect();
                self.server.global_params = average_sparse(global, &sparse)?;
                self.server.round += 1;
                Ok(bad.len() as u32)
            }
        }
    }

    /// Current accuracy figures for the global model and every client's
    /// personalized model.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let models = (0..self.config.clients)
            .map(|c| self.pulled(c))
            .collect::<Result<Vec<_>>>()?;
        evaluate(
            &self.server.global_params,
            &models,
            &self.test_sets,
            &self.sizes,
            &self.pooled_test,
        )
    }

    /// Run one full round.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let round = self.server.round;
        if self.is_finished() {
            return Err(Error::config("all rounds already ran"));
        }
        let started = self.now();
        let sampled = sample_clients(
            self.config.seed,
            round,
            self.config.clients,
            self.config.cpr,
        );
        let train_cfg = self.train_config();

        let mut bytes_up = 0u64;
        let mut bytes_down = 0u64;
        let mut closed_form = 0u64;
        let mut participating = Vec::with_capacity(sampled.len());
        let mut received = Vec::with_capacity(sampled.len());
        let mut sent = Vec::with_capacity(sampled.len());
        let mut violations = 0u32;

        for &client in &sampled {
            let c = client as usize;
            if self.train_sets[c].is_empty() {
                log::warn!("round {round}: client {client} has no training rows, skipped");
                continue;
            }
            let tag = |e: Error| e.in_round(round, Some(client));
            bytes_down += encode_update(&self.broadcast(client)).len() as u64;

            let start = self.pulled(c).map_err(tag)?;
            let mut rng = rng_for(self.config.seed, seed::TRAIN, round as u64, client as u64);
            let trained = local_train(
                &start,
                &self.train_sets[c],
                &train_cfg,
                &self.server.global_params,
                &mut rng,
            )
            .map_err(tag)?;
            let upload = self.client_upload(client, &trained).map_err(tag)?;
            self.locals[c] = trained;

            let bytes = encode_update(&upload);
            bytes_up += bytes.len() as u64;
            closed_form += upload
                .entries
                .iter()
                .map(|e| 16 + 4 * e.payload.len() as u64)
                .sum::<u64>()
                + 22;
            participating.push(client);
            match decode_update(&bytes) {
                Ok(u) => received.push(u),
                Err(e) => {
                    log::warn!("round {round}: undecodable upload from client {client}: {e}");
                    violations += 1;
                }
            }
            sent.push(upload);
        }
        if bytes_up != closed_form {
            return Err(Error::TrafficMismatch {
                metered: bytes_up,
                closed_form,
            }
            .in_round(round, None));
        }

        self.last_uploads = sent;
        violations += self.merge(received).map_err(|e| e.in_round(round, None))?;
        let eval = self.evaluate().map_err(|e| e.in_round(round, None))?;
        let wall_ms = self.now() - started;

        Ok(RoundMetrics {
            round,
            method: String::from(self.config.method.label()),
            global_test_accuracy: eval.global_acc,
            mean_personalized_accuracy: eval.personalized_acc,
            bytes_up,
            bytes_down,
            wall_ms,
            sampled,
            participating,
            protocol_violations: violations,
            per_client_personalized: eval.per_client_personalized,
            per_client_global: eval.per_client_global,
        })
    }
}

/// Build the dataset for a config whose data source is in-memory, then run it.
pub fn run(config: RunConfig) -> Result<Vec<RoundMetrics>> {
    let data = config.dataset.synthesize()?;
    run_on(config, &data)
}

pub fn run_on(config: RunConfig, data: &Dataset) -> Result<Vec<RoundMetrics>> {
    Simulation::new(config, data)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use crate::partition::PartitionLaw;

    pub(crate) fn small_config(method: Method) -> RunConfig {
        RunConfig {
            method,
            rounds: 3,
            clients: 4,
            cpr: 0.5,
            local_epochs: 1,
            lr: 0.1,
            batch_size: 8,
            pack: 16,
            cap_ratio: 1.0,
            payload: PayloadMode::Delta,
            weight_mode: WeightMode::Dual,
            seed: 5,
            partition: PartitionSpec {
                law: PartitionLaw::Dirichlet { alpha: 0.5 },
                num_clients: 4,
                seed: 2,
                test_fraction: 0.2,
            },
            model: ShapeSpec::new(vec![(4, 6), (6, 3)], Activation::Relu).unwrap(),
            dataset: DatasetSource::Synthetic {
                num_classes: 3,
                dim: 4,
                samples_per_class: 20,
                spread: 0.3,
                seed: 1,
            },
        }
    }

    #[test]
    fn sampling_size_and_distinctness() {
        for (cpr, expect) in [(0.3, 3), (0.7, 7), (1.0, 10), (0.01, 1)] {
            let s = sample_clients(1, 4, 10, cpr);
            assert_eq!(s.len(), expect);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(s, sample_clients(1, 4, 10, cpr));
        }
    }

    #[test]
    fn magnitude_topk_examples() {
        let g = FlatParams::zeros(ShapeSpec::new(vec![(1, 1)], Activation::Identity).unwrap());
        let l = FlatParams::new(g.shape().clone(), vec![0.1, -5.0]).unwrap();
        let (idx, vals) = baseline_magnitude_topk(&l, &g, 0.5).unwrap();
        assert_eq!(idx, [1]);
        assert_eq!(vals, [-5.0]);
        let (idx, vals) = baseline_magnitude_topk(&l, &g, 1.0).unwrap();
        assert_eq!(idx, [0, 1]);
        assert_eq!(vals, [0.1, -5.0]);
    }

    #[test]
    fn evaluation_weights_by_client_size() {
        let shape = ShapeSpec::logistic(1, 2).unwrap();
        // predicts class 1 for positive inputs, class 0 for negative ones
        let m = FlatParams::from_layers(shape, &[(vec![-1.0, 1.0], vec![0.0, 0.0])]).unwrap();
        let t1 = Batch::new(vec![1.0, 1.0, -1.0, -1.0], 1, vec![1, 1, 0, 1]).unwrap(); // 3/4
        let t2 = Batch::new(vec![1.0, -1.0], 1, vec![0, 0]).unwrap(); // 1/2
        let pooled = Batch::new(vec![1.0], 1, vec![1]).unwrap();
        let e = evaluate(&m, &[m.clone(), m.clone()], &[t1, t2], &[300, 100], &pooled).unwrap();
        assert!((e.personalized_acc - (0.75 * 0.75 + 0.25 * 0.5)).abs() < 1e-12);
        assert_eq!(e.global_acc, 1.0);
        assert_eq!(e.per_client_global, e.per_client_personalized);
    }

    #[test]
    fn one_client_fedavg_adopts_the_trained_model() {
        let mut cfg = small_config(Method::Fedavg);
        cfg.clients = 1;
        cfg.partition.num_clients = 1;
        cfg.cpr = 1.0;
        let data = cfg.dataset.synthesize().unwrap();
        let mut sim = Simulation::new(cfg, &data).unwrap();
        for _ in 0..3 {
            sim.step().unwrap();
            let diff = sim
                .global_params()
                .values()
                .iter()
                .zip(sim.client_models()[0].values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(diff < 1e-6, "{diff}");
        }
    }

    #[test]
    fn every_method_runs_and_meters_traffic() {
        for method in [
            Method::Fedcspack,
            Method::Fedavg,
            Method::Fedprox { mu: 0.1 },
            Method::MagnitudeTopk { fraction: 0.1 },
        ] {
            let metrics = run(small_config(method)).unwrap();
            assert_eq!(metrics.len(), 3);
            for m in &metrics {
                assert_eq!(m.sampled.len(), 2);
                assert!(m.bytes_up > 0 && m.bytes_down > 0);
                assert_eq!(m.protocol_violations, 0);
                assert!((0.0..=1.0).contains(&m.global_test_accuracy));
            }
        }
    }

    #[test]
    fn raw_payload_matches_delta_payload_closely() {
        let delta = {
            let cfg = small_config(Method::Fedcspack);
            let data = cfg.dataset.synthesize().unwrap();
            let mut s = Simulation::new(cfg, &data).unwrap();
            s.step().unwrap();
            s.global_params().clone()
        };
        let raw = {
            let mut cfg = small_config(Method::Fedcspack);
            cfg.payload = PayloadMode::Raw;
            let data = cfg.dataset.synthesize().unwrap();
            let mut s = Simulation::new(cfg, &data).unwrap();
            s.step().unwrap();
            s.global_params().clone()
        };
        for (a, b) in delta.values().iter().zip(raw.values()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(Method::Fedavg);
        cfg.partition.num_clients = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(Method::MagnitudeTopk { fraction: 0.0 });
        assert!(cfg.validate().is_err());
        cfg.method = Method::Fedavg;
        cfg.cpr = 0.0;
        assert!(cfg.validate().is_err());
        assert_eq!(small_config(Method::Fedavg).clients_per_round(), 2);
    }
}
