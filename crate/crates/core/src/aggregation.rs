//! Server-side mask folding and dual-weight package aggregation, plus the
//! client-side selective pull that consumes the resulting global mask.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::FlatParams;
use crate::packing::{package_count, package_view, package_views, DeltaPackages, LocalMask};

/// Per-package weight totals of one round's participants.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMask {
    pub totals: Vec<f64>,
    pub valid: Vec<bool>,
}

impl GlobalMask {
    /// Round-zero mask: every package valid with total 1, so every client
    /// adopts the initial global model in full.
    pub fn bootstrap(num_packages: usize) -> Self {
        GlobalMask {
            totals: vec![1.0; num_packages],
            valid: vec![true; num_packages],
        }
    }

    pub fn num_packages(&self) -> usize {
        self.totals.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Sum local masks position by position, in the order given.
pub fn fold_masks<'a, I>(num_packages: usize, masks: I) -> Result<GlobalMask>
where
    I: IntoIterator<Item = &'a LocalMask>,
{
    let mut totals = vec![0.0f64; num_packages];
    for m in masks {
        if m.weights.len() != num_packages {
            return Err(Error::shape("local mask", num_packages, m.weights.len()));
        }
        for (t, &w) in totals.iter_mut().zip(&m.weights) {
            *t += w;
        }
    }
    let valid = totals.iter().map(|&t| t > 0.0).collect();
    Ok(GlobalMask { totals, valid })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_params: FlatParams,
    pub global_mask: GlobalMask,
    pub round: u32,
    pub pack: usize,
}

impl ServerState {
    pub fn new(global_params: FlatParams, pack: usize) -> Result<Self> {
        if pack == 0 {
            return Err(Error::config("pack must be at least 1"));
        }
        let j = package_count(global_params.len(), pack);
        Ok(ServerState {
            global_params,
            global_mask: GlobalMask::bootstrap(j),
            round: 0,
            pack,
        })
    }

    pub fn num_packages(&self) -> usize {
        self.global_mask.num_packages()
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub mask: LocalMask,
    pub payloads: DeltaPackages,
}

/// How aggregated payloads are merged into the global packages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Payloads are local-minus-global deltas added onto the global slice.
    Additive,
    /// Payloads are local parameters; their weighted mean replaces the slice.
    Replace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutcome {
    pub state: ServerState,
    /// Clients whose update broke the mask/payload contract, ascending.
    pub rejected: Vec<u32>,
}

fn check_update(u: &ClientUpdate, total: usize, pack: usize, j: usize) -> bool {
    if u.mask.weights.len() != j {
        return false;
    }
    let positive = u.mask.weights.iter().filter(|&&w| w > 0.0).count();
    if positive != u.payloads.packages.len() {
        return false;
    }
    u.payloads.packages.iter().all(|(&k, payload)| {
        k < j
            && u.mask.weights[k] > 0.0
            && package_view(total, pack, k).is_some_and(|v| v.len == payload.len())
            && payload.iter().all(|x| x.is_finite())
    })
}

/// Fold this round's updates into the next global model.
///
/// Updates are folded in ascending client id regardless of input order. For
/// every package with a positive total, the global slice moves by (or is
/// replaced with) the weight-normalized sum of the client payloads. Packages
/// nobody shared stay bit-for-bit unchanged. The returned mask is built from
/// this round's accepted updates only.
pub fn aggregate(
    server: &ServerState,
    updates: &[ClientUpdate],
    fusion: Fusion,
) -> Result<AggregateOutcome> {
    let total = server.global_params.len();
    let j = server.num_packages();

    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);

    let mut accepted: Vec<&ClientUpdate> = Vec::with_capacity(order.len());
    let mut rejected = Vec::new();
    for u in order {
        let dup = accepted.last().is_some_and(|a| a.client_id == u.client_id);
        if dup || !check_update(u, total, server.pack, j) {
            log::warn!(
                "round {}: rejected update from client {}",
                server.round,
                u.client_id
            );
            rejected.push(u.client_id);
        } else {
            accepted.push(u);
        }
    }

    let mask = fold_masks(j, accepted.iter().map(|u| &u.mask))?;
    let mut params = server.global_params.clone();
    let values = params.values_mut();
    let mut acc: Vec<f64> = Vec::new();
    for view in package_views(total, server.pack) {
        if !mask.valid[view.index] {
            continue;
        }
        let denom = mask.totals[view.index];
        acc.clear();
        acc.resize(view.len, 0.0);
        for u in &accepted {
            let w = u.mask.weights[view.index];
            if w == 0.0 {
                continue;
            }
            let share = w / denom;
            let payload = &u.payloads.packages[&view.index];
            for (a, &p) in acc.iter_mut().zip(payload) {
                *a += share * p as f64;
            }
        }
        let slice = &mut values[view.range()];
        match fusion {
            Fusion::Additive => {
                for (v, &a) in slice.iter_mut().zip(&acc) {
                    *v = (*v as f64 + a) as f32;
                }
            }
            Fusion::Replace => {
                for (v, &a) in slice.iter_mut().zip(&acc) {
                    *v = a as f32;
                }
            }
        }
    }

    Ok(AggregateOutcome {
        state: ServerState {
            global_params: params,
            global_mask: mask,
            round: server.round + 1,
            pack: server.pack,
        },
        rejected,
    })
}

/// Take the global package wherever the mask is valid and keep the local
/// (personalized) package everywhere else.
pub fn selective_pull(
    local: &FlatParams,
    global: &FlatParams,
    mask: &GlobalMask,
    pack: usize,
) -> Result<FlatParams> {
    local.check_same_shape(global)?;
    let j = package_count(local.len(), pack);
    if mask.num_packages() != j {
        return Err(Error::shape("global mask", j, mask.num_packages()));
    }
    let mut out = local.clone();
    let values = out.values_mut();
    for view in package_views(local.len(), pack) {
        if mask.valid[view.index] {
            values[view.range()].copy_from_slice(&global.values()[view.range()]);
        }
    }
    Ok(out)
}
