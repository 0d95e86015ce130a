//! Synthetic datasets and label-skew partitioning across clients.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::seed::{self, rng_for};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub batch: Batch,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(batch: Batch, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if let Some(&bad) = batch.labels().iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::shape("label range", num_classes, bad as usize + 1));
        }
        Ok(Dataset {
            batch,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.batch.dim()
    }

    pub fn labels(&self) -> &[u32] {
        self.batch.labels()
    }
}

/// Isotropic Gaussian blobs, one per class, around random unit-norm centers.
/// Rows come out grouped by class.
pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 || samples_per_class == 0 {
        return Err(Error::config("blob counts must be at least 1"));
    }
    if spread.is_nan() || spread <= 0.0 {
        return Err(Error::config("blob spread must be positive"));
    }
    let mut rng = rng_for(seed, seed::BLOBS, 0, 0);
    let mut centers = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut c: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = libm::sqrt(c.iter().map(|x| x * x).sum::<f64>());
        if norm > 0.0 {
            c.iter_mut().for_each(|x| *x /= norm);
        }
        centers.push(c);
    }
    let rows = num_classes * samples_per_class;
    let mut features = Vec::with_capacity(rows * dim);
    let mut labels = Vec::with_capacity(rows);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            for &c in center {
                let noise: f64 = rng.sample(StandardNormal);
                features.push((c + spread * noise) as f32);
            }
            labels.push(class as u32);
        }
    }
    Dataset::new(Batch::new(features, dim, labels)?, num_classes, "blobs")
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(
    feature = "serde",
    serde(rename_all = "snake_case", deny_unknown_fields)
)]
pub enum PartitionLaw {
    Dirichlet { alpha: f64 },
    Pathological { shards_per_client: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PartitionSpec {
    pub law: PartitionLaw,
    pub num_clients: usize,
    pub seed: u64,
    #[cfg_attr(feature = "serde", serde(default = "default_test_fraction"))]
    pub test_fraction: f64,
}

#[cfg(feature = "serde")]
fn default_test_fraction() -> f64 {
    0.2
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        match self.law {
            PartitionLaw::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                return Err(Error::config("dirichlet alpha must be positive"));
            }
            PartitionLaw::Pathological {
                shards_per_client: 0,
            } => {
                return Err(Error::config("shards_per_client must be at least 1"));
            }
            _ => {}
        }
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be at least 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Rows owned by one client and their train/test split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClientShard {
    /// Ascending row indices into the dataset.
    pub rows: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<ClientShard>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Per-client class counts over all of a client's rows.
    pub fn label_histograms(&self, data: &Dataset) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|c| {
                let mut h = vec![0usize; data.num_classes];
                for &r in &c.rows {
                    h[data.labels()[r] as usize] += 1;
                }
                h
            })
            .collect()
    }
}

pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    match spec.law {
        PartitionLaw::Dirichlet { .. } => partition_dirichlet(data, spec),
        PartitionLaw::Pathological { .. } => partition_pathological(data, spec),
    }
}

fn rows_by_class(data: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); data.num_classes];
    for (r, &l) in data.labels().iter().enumerate() {
        by_class[l as usize].push(r);
    }
    by_class
}

/// Integer counts summing to `n`, proportional to `shares` (largest remainder,
/// ties to the lower index).
fn largest_remainder(shares: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| s / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&x| libm::floor(x) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - libm::floor(exact[a]);
        let fb = exact[b] - libm::floor(exact[b]);
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet_draw<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // every gamma draw underflowed (tiny alpha): all mass on one client
        let mut p = vec![0.0; n];
        p[rng.random_range(0..n)] = 1.0;
        p
    }
}

/// Move rows from the largest client to any client below `min_rows`.
fn apply_floor(assign: &mut [Vec<usize>], min_rows: usize) {
    while let Some(needy) = assign.iter().position(|a| a.len() < min_rows) {
        let donor = (0..assign.len())
            .max_by(|&a, &b| assign[a].len().cmp(&assign[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        if assign[donor].len() <= min_rows {
            break;
        }
        let row = assign[donor].pop().expect("donor is non-empty");
        assign[needy].push(row);
    }
}

/// Label-skew split: each class is divided among clients by a `Dir(alpha)`
/// draw, with largest-remainder rounding so every row lands exactly once.
pub fn partition_dirichlet(data: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    let PartitionLaw::Dirichlet { alpha } = spec.law else {
        return Err(Error::config("partition_dirichlet needs a dirichlet law"));
    };
    let n = spec.num_clients;
    if data.len() < n {
        return Err(Error::InsufficientData {
            rows: data.len(),
            clients: n,
        });
    }
    let mut assign: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (class, mut rows) in rows_by_class(data).into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let mut rng = rng_for(spec.seed, seed::DIRICHLET, class as u64, 0);
        let shares = dirichlet_draw(alpha, n, &mut rng);
        rows.shuffle(&mut rng);
        let counts = largest_remainder(&shares, rows.len());
        let mut start = 0;
        for (client, &c) in counts.iter().enumerate() {
            assign[client].extend_from_slice(&rows[start..start + c]);
            start += c;
        }
    }
    let min_rows = if data.len() >= 2 * n { 2 } else { 1 };
    apply_floor(&mut assign, min_rows);
    Ok(finish(data, spec, assign))
}

/// Sort rows by label, cut them into `num_clients * shards_per_client`
/// contiguous shards and deal the shards out at random.
pub fn partition_pathological(data: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    let PartitionLaw::Pathological { shards_per_client } = spec.law else {
        return Err(Error::config(
            "partition_pathological needs a pathological law",
        ));
    };
    let shards = spec.num_clients * shards_per_client;
    let base = data.len() / shards;
    if base == 0 {
        return Err(Error::config(alloc::format!(
            "{} rows cannot fill {shards} shards",
            data.len()
        )));
    }
    let extra = data.len() % shards;
    let mut sorted: Vec<usize> = (0..data.len()).collect();
    sorted.sort_by_key(|&r| (data.labels()[r], r));

    let mut bounds = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let len = base + usize::from(s < extra);
        bounds.push(start..start + len);
        start += len;
    }

    let mut deck: Vec<usize> = (0..shards).collect();
    deck.shuffle(&mut rng_for(spec.seed, seed::SHARDS, 0, 0));
    let assign = deck
        .chunks(shards_per_client)
        .map(|hand| {
            hand.iter()
                .flat_map(|&s| sorted[bounds[s].clone()].iter().copied())
                .collect()
        })
        .collect();
    Ok(finish(data, spec, assign))
}

fn finish(data: &Dataset, spec: &PartitionSpec, assign: Vec<Vec<usize>>) -> Partition {
    let clients = assign
        .into_iter()
        .enumerate()
        .map(|(client, mut rows)| {
            rows.sort_unstable();
            let (train, test) = split_client(data, &rows, spec, client);
            ClientShard { rows, train, test }
        })
        .collect();
    Partition { clients }
}

/// Holdout of about `test_fraction` of a client's rows, stratified by label
/// where counts allow. Keeps at least one train row, and one test row when the
/// client has two or more rows.
fn split_client(
    data: &Dataset,
    rows: &[usize],
    spec: &PartitionSpec,
    client: usize,
) -> (Vec<usize>, Vec<usize>) {
    let n = rows.len();
    if n < 2 {
        return (rows.to_vec(), Vec::new());
    }
    let n_test = (libm::round(spec.test_fraction * n as f64) as usize).clamp(1, n - 1);
    let mut rng = rng_for(spec.seed, seed::SPLIT, client as u64, 0);

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for &r in rows {
        groups[data.labels()[r] as usize].push(r);
    }
    let sizes: Vec<f64> = groups.iter().map(|g| g.len() as f64).collect();
    let quotas = largest_remainder(&sizes, n_test);

    let mut train = Vec::with_capacity(n - n_test);
    let mut test = Vec::with_capacity(n_test);
    for (group, quota) in groups.iter_mut().zip(quotas) {
        group.shuffle(&mut rng);
        test.extend_from_slice(&group[..quota]);
        train.extend_from_slice(&group[quota..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
