//! Client-side package scoring, selection and masking.
//!
//! A flat parameter vector of length `d` is tiled into `J = ceil(d / pack)`
//! contiguous packages; only the last one may be shorter than `pack`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::FlatParams;

/// Floor applied to the global-side probabilities inside [`kl_package`].
pub const KL_FLOOR: f64 = 1e-8;
/// Smallest weight a selected package may carry in a mask.
pub const MIN_MASK_WEIGHT: f64 = 1e-6;

/// One contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackageView {
    pub index: usize,
    pub offset: usize,
    pub len: usize,
}

impl PackageView {
    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

pub fn package_count(total: usize, pack: usize) -> usize {
    total.div_ceil(pack)
}

/// Package tiling of `[0, total)`.
pub fn package_views(total: usize, pack: usize) -> impl Iterator<Item = PackageView> {
    (0..package_count(total, pack)).map(move |index| {
        let offset = index * pack;
        PackageView {
            index,
            offset,
            len: pack.min(total - offset),
        }
    })
}

pub fn package_view(total: usize, pack: usize, index: usize) -> Option<PackageView> {
    let offset = index.checked_mul(pack)?;
    if offset >= total {
        return None;
    }
    Some(PackageView {
        index,
        offset,
        len: pack.min(total - offset),
    })
}

/// `ceil(ratio * n)` with a small tolerance so `0.7 * 10` counts as 7, kept in `[1, n]`.
pub fn ceil_share(ratio: f64, n: usize) -> usize {
    let raw = libm::ceil(ratio * n as f64 - 1e-9);
    (raw.max(1.0) as usize).min(n.max(1))
}

/// Cosine similarity with `f64` accumulation. Zero-norm inputs give 0.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine operands", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::shape("cosine operands", 1, 0));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (libm::sqrt(na) * libm::sqrt(nb))).clamp(-1.0, 1.0))
}

fn softmax(v: &[f32]) -> Vec<f64> {
    let max = v
        .iter()
        .map(|&x| x as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| libm::exp(x as f64 - max)).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// KL divergence between the softmax distributions of two packages,
/// `sum p * ln(p / q)` with `q` floored at [`KL_FLOOR`] and renormalized.
pub fn kl_package(local: &[f32], global: &[f32]) -> Result<f64> {
    if local.len() != global.len() {
        return Err(Error::shape("kl operands", local.len(), global.len()));
    }
    if local.is_empty() {
        return Err(Error::shape("kl operands", 1, 0));
    }
    let p = softmax(local);
    let mut q = softmax(global);
    for x in &mut q {
        *x = x.max(KL_FLOOR);
    }
    let qsum: f64 = q.iter().sum();
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(&q) {
        if pi > 0.0 {
            kl += pi * libm::log(pi / (qi / qsum));
        }
    }
    Ok(kl.max(0.0))
}

/// Whole-model and per-package similarity of a trained local model to the
/// global model it started from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityProfile {
    pub overall: f64,
    pub per_package_cos: Vec<f64>,
    pub per_package_kl: Vec<f64>,
}

impl SimilarityProfile {
    pub fn num_packages(&self) -> usize {
        self.per_package_cos.len()
    }
}

pub fn score_packages(
    local: &FlatParams,
    global: &FlatParams,
    pack: usize,
) -> Result<SimilarityProfile> {
    local.check_same_shape(global)?;
    if pack == 0 {
        return Err(Error::config("pack must be at least 1"));
    }
    let (l, g) = (local.values(), global.values());
    let overall = cosine(l, g)?;
    let mut per_package_cos = Vec::new();
    let mut per_package_kl = Vec::new();
    for view in package_views(l.len(), pack) {
        let r = view.range();
        per_package_cos.push(cosine(&l[r.clone()], &g[r.clone()])?);
        per_package_kl.push(kl_package(&l[r.clone()], &g[r])?);
    }
    Ok(SimilarityProfile {
        overall,
        per_package_cos,
        per_package_kl,
    })
}

/// Packages to share, ascending.
///
/// Candidates are the packages less similar than the model as a whole. At
/// most `ceil(cap_ratio * J)` of them are kept, least similar first, ties to
/// the lower index. With no candidate the single least similar package is
/// shared so a client never goes silent.
pub fn select_topk(profile: &SimilarityProfile, cap_ratio: f64) -> Result<Vec<usize>> {
    if !(cap_ratio > 0.0 && cap_ratio <= 1.0) {
        return Err(Error::config("cap_ratio must lie in (0, 1]"));
    }
    let j = profile.num_packages();
    if j == 0 {
        return Ok(Vec::new());
    }
    let by_similarity = |a: &usize, b: &usize| {
        profile.per_package_cos[*a]
            .total_cmp(&profile.per_package_cos[*b])
            .then(a.cmp(b))
    };
    let mut candidates: Vec<usize> = (0..j)
        .filter(|&k| profile.per_package_cos[k] < profile.overall)
        .collect();
    if candidates.is_empty() {
        let least = (0..j).min_by(by_similarity).unwrap_or(0);
        return Ok(alloc::vec![least]);
    }
    candidates.sort_by(by_similarity);
    candidates.truncate(ceil_share(cap_ratio, j));
    candidates.sort_unstable();
    Ok(candidates)
}

/// Per-package mask of one client. Nonzero exactly on the shared packages.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMask {
    pub weights: Vec<f64>,
    pub selected: Vec<usize>,
}

impl LocalMask {
    /// Mask with weight `max(theta + beta, MIN_MASK_WEIGHT)` on each listed package.
    pub fn from_terms(num_packages: usize, terms: &[(usize, f64, f64)]) -> Result<Self> {
        let mut weights = alloc::vec![0.0; num_packages];
        let mut selected = Vec::with_capacity(terms.len());
        for &(j, theta, beta) in terms {
            if j >= num_packages {
                return Err(Error::shape("mask package index", num_packages, j + 1));
            }
            weights[j] = mask_weight(theta, beta);
            selected.push(j);
        }
        selected.sort_unstable();
        selected.dedup();
        Ok(LocalMask { weights, selected })
    }

    pub fn num_packages(&self) -> usize {
        self.weights.len()
    }
}

#[inline]
pub fn mask_weight(theta: f64, beta: f64) -> f64 {
    (theta + beta).max(MIN_MASK_WEIGHT)
}

pub fn build_mask(profile: &SimilarityProfile, selected: &[usize]) -> Result<LocalMask> {
    let terms: Vec<(usize, f64, f64)> = selected
        .iter()
        .map(|&j| {
            let theta = profile.per_package_cos.get(j).copied().unwrap_or(0.0);
            let beta = profile.per_package_kl.get(j).copied().unwrap_or(0.0);
            (j, theta, beta)
        })
        .collect();
    LocalMask::from_terms(profile.num_packages(), &terms)
}

/// Shared package payloads keyed by package index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeltaPackages {
    pub packages: BTreeMap<usize, Vec<f32>>,
}

fn slices_of(
    local: &FlatParams,
    global: &FlatParams,
    selected: &[usize],
    pack: usize,
    f: impl Fn(f32, f32) -> f32,
) -> Result<DeltaPackages> {
    local.check_same_shape(global)?;
    let total = local.len();
    let mut packages = BTreeMap::new();
    for &j in selected {
        let view = package_view(total, pack, j)
            .ok_or_else(|| Error::shape("package index", package_count(total, pack), j + 1))?;
        let r = view.range();
        let payload = local.values()[r.clone()]
            .iter()
            .zip(&global.values()[r])
            .map(|(&l, &g)| f(l, g))
            .collect();
        packages.insert(j, payload);
    }
    Ok(DeltaPackages { packages })
}

/// Local-minus-global slices for the selected packages.
pub fn extract_deltas(
    local: &FlatParams,
    global: &FlatParams,
    selected: &[usize],
    pack: usize,
) -> Result<DeltaPackages> {
    slices_of(local, global, selected, pack, |l, g| l - g)
}

/// Raw local slices for the selected packages.
pub fn extract_raw(
    local: &FlatParams,
    global: &FlatParams,
    selected: &[usize],
    pack: usize,
) -> Result<DeltaPackages> {
    slices_of(local, global, selected, pack, |l, _| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ShapeSpec;

    fn profile(overall: f64, cos: &[f64]) -> SimilarityProfile {
        SimilarityProfile {
            overall,
            per_package_cos: cos.to_vec(),
            per_package_kl: alloc::vec![0.0; cos.len()],
        }
    }

    #[test]
    fn cosine_identities() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[3.0, -4.0, 0.5], &[3.0, -4.0, 0.5]).unwrap() - 1.0).abs() < 1e-12);
        // 32 / (sqrt(14) * sqrt(77))
        assert!((cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - 0.974631846).abs() < 1e-9);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kl_identities() {
        assert!(
            kl_package(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0])
                .unwrap()
                .abs()
                < 1e-12
        );
        assert_eq!(kl_package(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_high_precision_value() {
        // p = softmax([1,0]), q = softmax([0,1]); KL = tanh(1/2) evaluated in
        // 50-digit arithmetic: 0.46211715726000975850231848364367254873...
        let kl = kl_package(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((kl - 0.462_117_157_260_009_76).abs() < 1e-9, "{kl}");
    }

    #[test]
    fn tiling_of_ten_by_four() {
        let views: Vec<_> = package_views(10, 4).collect();
        assert_eq!(views.iter().map(|v| v.len).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(views[2].offset, 8);
        assert!(package_view(10, 4, 3).is_none());
    }

    #[test]
    fn identical_models_score_perfectly() {
        let shape = ShapeSpec::logistic(3, 3).unwrap();
        let p = FlatParams::new(shape, (0..12).map(|i| i as f32 * 0.1 - 0.5).collect()).unwrap();
        let prof = score_packages(&p, &p, 5).unwrap();
        assert!((prof.overall - 1.0).abs() < 1e-12);
        assert_eq!(prof.num_packages(), 3);
        assert!(prof.per_package_cos.iter().all(|c| (c - 1.0).abs() < 1e-12));
        assert!(prof.per_package_kl.iter().all(|&k| k < 1e-12));
        // identical models leave no candidate: fallback to the first package
        assert_eq!(select_topk(&prof, 1.0).unwrap().len(), 1);
    }

    #[test]
    fn single_package_equals_overall() {
        let shape = ShapeSpec::logistic(2, 2).unwrap();
        let a = FlatParams::new(shape.clone(), alloc::vec![0.1, -0.4, 0.9, 0.2, 0.0, 0.3]).unwrap();
        let b = FlatParams::new(shape, alloc::vec![0.5, 0.4, -0.9, 0.1, 0.2, 0.1]).unwrap();
        let prof = score_packages(&a, &b, 100).unwrap();
        assert_eq!(prof.num_packages(), 1);
        assert_eq!(prof.per_package_cos[0], prof.overall);
    }

    #[test]
    fn selection_prefers_least_similar() {
        let prof = profile(0.9, &[0.95, 0.5, 0.8, 0.92]);
        assert_eq!(select_topk(&prof, 1.0).unwrap(), [1, 2]);
        assert_eq!(select_topk(&prof, 0.3).unwrap(), [1, 2]);
        assert_eq!(select_topk(&prof, 0.25).unwrap(), [1]);
        assert!(select_topk(&prof, 0.0).is_err());
        assert!(select_topk(&prof, 1.5).is_err());
    }

    #[test]
    fn selection_fallback_and_ties() {
        assert_eq!(
            select_topk(&profile(0.7, &[0.7, 0.7, 0.7]), 1.0).unwrap(),
            [0]
        );
        assert_eq!(
            select_topk(&profile(0.9, &[0.95, 0.93, 0.91]), 1.0).unwrap(),
            [2]
        );
        assert_eq!(
            select_topk(&profile(0.9, &[0.5, 0.2, 0.2, 0.5]), 0.5).unwrap(),
            [1, 2]
        );
        assert_eq!(
            select_topk(&profile(0.9, &[0.5, 0.5, 0.5]), 0.3).unwrap(),
            [0]
        );
    }

    #[test]
    fn mask_weights() {
        let mut prof = profile(0.9, &[0.1, 0.2, 0.3, 0.5, -0.9]);
        prof.per_package_kl = alloc::vec![0.0, 0.0, 0.0, 0.2, 0.1];
        let m = build_mask(&prof, &[3, 4]).unwrap();
        assert!((m.weights[3] - 0.7).abs() < 1e-12);
        assert_eq!(m.weights[4], MIN_MASK_WEIGHT);
        assert_eq!(&m.weights[..3], &[0.0, 0.0, 0.0]);
        let empty = build_mask(&prof, &[]).unwrap();
        assert!(empty.weights.iter().all(|&w| w == 0.0));
        assert!(empty.selected.is_empty());
    }

    #[test]
    fn deltas() {
        let shape = ShapeSpec::logistic(2, 2).unwrap();
        let g = FlatParams::new(shape.clone(), alloc::vec![0.1, -0.4, 0.9, 0.2, 0.0, 0.3]).unwrap();
        let same = extract_deltas(&g, &g, &[0, 1], 4).unwrap();
        assert!(same.packages.values().flatten().all(|&x| x == 0.0));
        let l = FlatParams::new(shape, g.values().iter().map(|v| v + 1.0).collect()).unwrap();
        let d = extract_deltas(&l, &g, &[0], 6).unwrap();
        assert_eq!(d.packages[&0].len(), 6);
        assert!(d.packages[&0].iter().all(|&x| (x - 1.0).abs() < 1e-6));
        let raw = extract_raw(&l, &g, &[1], 4).unwrap();
        assert_eq!(raw.packages[&1], &l.values()[4..6]);
        assert!(extract_deltas(&l, &g, &[2], 4).is_err());
    }
}
