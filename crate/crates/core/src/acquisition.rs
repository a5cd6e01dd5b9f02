//! Query strategies: scoring and selecting unlabeled samples.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::metrics::check_distributions;
use crate::tensor::Real;
use crate::vit::ViTModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    Random,
    Entropy,
    GciVital,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Entropy, Strategy::GciVital];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::GciVital => "gci_vital",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "random" => Ok(Strategy::Random),
            "entropy" => Ok(Strategy::Entropy),
            "gci_vital" | "gcivital" => Ok(Strategy::GciVital),
            _ => Err(Error::Config(format!("unknown strategy '{s}' (expected random, entropy or gci_vital)"))),
        }
    }
}

/// A sample acquired during an active-learning round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Acquired {
    pub index: usize,
    /// Label as delivered by the (noisy) oracle.
    pub label: usize,
    pub flipped: bool,
    pub round: usize,
    /// Label smoothing used when training on this sample.
    pub smoothing: f64,
}

/// Disjoint partition of a training set into the clean seed, the acquired
/// samples and the unlabeled remainder.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    size: usize,
    seed: Vec<usize>,
    acquired: Vec<Acquired>,
    unlabeled: Vec<usize>,
}

impl Pool {
    pub fn new(size: usize, seed: Vec<usize>) -> Result<Self> {
        let mut taken = vec![false; size];
        for &i in &seed {
            if i >= size {
                return Err(Error::Index { op: "Pool::new", index: i, bound: size });
            }
            if std::mem::replace(&mut taken[i], true) {
                return Err(Error::Input(format!("seed index {i} repeated")));
            }
        }
        let unlabeled = (0..size).filter(|&i| !taken[i]).collect();
        Ok(Self { size, seed, acquired: Vec::new(), unlabeled })
    }

    /// Pool whose seed is `seed_size` indices drawn uniformly from `0..size`.
    pub fn random_seed(size: usize, seed_size: usize, rng: &mut impl Rng) -> Result<Self> {
        if seed_size > size {
            return Err(Error::Budget { requested: seed_size, available: size });
        }
        Self::new(size, rand::seq::index::sample(rng, size, seed_size).into_vec())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn seed(&self) -> &[usize] {
        &self.seed
    }

    pub fn acquired(&self) -> &[Acquired] {
        &self.acquired
    }

    /// Unlabeled indices in ascending order.
    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn labeled_len(&self) -> usize {
        self.seed.len() + self.acquired.len()
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled_len() as f64 / self.size as f64
    }

    /// Moves acquired samples out of the unlabeled set.
    pub fn acquire(&mut self, batch: Vec<Acquired>) -> Result<()> {
        let mut chosen = vec![false; self.size];
        for a in &batch {
            if a.index >= self.size {
                return Err(Error::Index { op: "Pool::acquire", index: a.index, bound: self.size });
            }
            if std::mem::replace(&mut chosen[a.index], true) {
                return Err(Error::Input(format!("index {} acquired twice", a.index)));
            }
        }
        let before = self.unlabeled.len();
        self.unlabeled.retain(|&i| !chosen[i]);
        if before - self.unlabeled.len() != batch.len() {
            return Err(Error::Input("acquired indices must come from the unlabeled set".into()));
        }
        self.acquired.extend(batch);
        Ok(())
    }

    /// Verifies the three sets are disjoint and cover `0..size`.
    pub fn check(&self) -> Result<()> {
        let mut seen = vec![0u8; self.size];
        let all = self.seed.iter().chain(self.acquired.iter().map(|a| &a.index)).chain(&self.unlabeled);
        for &i in all {
            let slot = seen.get_mut(i).ok_or(Error::Index { op: "Pool::check", index: i, bound: self.size })?;
            *slot += 1;
        }
        match seen.iter().position(|&c| c != 1) {
            Some(i) => Err(Error::Input(format!("index {i} appears {} times across the pool", seen[i]))),
            None => Ok(()),
        }
    }
}

/// `k` distinct unlabeled indices, uniformly without replacement.
pub fn select_random(pool: &Pool, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let u = pool.unlabeled();
    if k > u.len() {
        return Err(Error::Budget { requested: k, available: u.len() });
    }
    Ok(rand::seq::index::sample(rng, u.len(), k).into_iter().map(|j| u[j]).collect())
}

/// Natural-log entropy of each row of a row-major `[n, classes]` matrix.
pub fn entropy_scores(probs: &[f64], classes: usize) -> Result<Vec<f64>> {
    check_distributions("entropy_scores", probs, classes)?;
    Ok(probs.chunks_exact(classes).map(entropy).collect())
}

pub(crate) fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Positions of the `k` largest scores, highest first; equal scores go to
/// the lower position.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Budget { requested: k, available: scores.len() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric { op: "select_top_k" });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Which centroid a sample's attention is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CentroidTarget {
    /// Centroid of the class the model predicts.
    Predicted,
    /// Closest centroid of any class.
    Nearest,
}

impl FromStr for CentroidTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(Self::Predicted),
            "nearest" => Ok(Self::Nearest),
            _ => Err(Error::Config(format!("unknown centroid target '{s}' (expected predicted or nearest)"))),
        }
    }
}

impl fmt::Display for CentroidTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Predicted => "predicted",
            Self::Nearest => "nearest",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GciConfig {
    /// Weight on the normalized distance term.
    pub distance_weight: f64,
    pub target: CentroidTarget,
    /// Label smoothing for samples this strategy acquires.
    pub smoothing: f64,
}

impl Default for GciConfig {
    fn default() -> Self {
        Self { distance_weight: 1.0, target: CentroidTarget::Predicted, smoothing: 0.1 }
    }
}

impl GciConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_weight.is_finite() && self.distance_weight >= 0.0) {
            return Err(Error::Config(format!("gci distance weight {} must be >= 0", self.distance_weight)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("gci smoothing {} outside [0, 1)", self.smoothing)));
        }
        Ok(())
    }
}

/// Per-class mean of last-layer attention over the clean seed.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanCoreCentroids {
    pub heads: usize,
    pub tokens: usize,
    /// One `[heads, tokens, tokens]` tensor per class, flattened.
    pub centroids: Vec<Vec<f64>>,
}

impl CleanCoreCentroids {
    pub fn map_len(&self) -> usize {
        self.heads * self.tokens * self.tokens
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.heads, self.tokens, self.tokens]
    }

    /// Builds centroids from explicit per-sample maps and their classes.
    pub fn from_maps(heads: usize, tokens: usize, classes: usize, maps: &[f64], labels: &[usize]) -> Result<Self> {
        let len = heads * tokens * tokens;
        if len == 0 || maps.len() != labels.len() * len {
            return Err(Error::shape(
                "compute_centroids",
                format!("{} values for {} maps of {heads}x{tokens}x{tokens}", maps.len(), labels.len()),
            ));
        }
        let mut sums = vec![vec![0.0; len]; classes];
        let mut counts = vec![0usize; classes];
        for (map, &y) in maps.chunks_exact(len).zip(labels) {
            if y >= classes {
                return Err(Error::Index { op: "compute_centroids", index: y, bound: classes });
            }
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(map) {
                *s += v;
            }
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Coverage(format!("class {c} has no clean seed sample")));
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
        let out = Self { heads, tokens, centroids: sums };
        out.check_row_stochastic(1e-5)?;
        Ok(out)
    }

    fn check_row_stochastic(&self, tol: f64) -> Result<()> {
        for (c, m) in self.centroids.iter().enumerate() {
            for row in m.chunks_exact(self.tokens) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::Input(format!("centroid {c} has a row summing to {s}")));
                }
            }
        }
        Ok(())
    }

    /// Frobenius distance from `map` to the chosen centroid.
    pub fn distance(&self, map: &[f64], probs: &[f64], target: CentroidTarget) -> Result<f64> {
        if map.len() != self.map_len() {
            return Err(Error::shape(
                "gci_vital_scores",
                format!("attention has {} values, centroids {:?}", map.len(), self.shape()),
            ));
        }
        if probs.len() != self.num_classes() {
            return Err(Error::shape(
                "gci_vital_scores",
                format!("{} class probabilities for {} centroids", probs.len(), self.num_classes()),
            ));
        }
        let frob = |c: &[f64]| c.iter().zip(map).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        Ok(match target {
            CentroidTarget::Predicted => frob(&self.centroids[argmax(probs)]),
            CentroidTarget::Nearest => self.centroids.iter().map(|c| frob(c)).fold(f64::INFINITY, f64::min),
        })
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Last-layer attention centroids of the seed, computed in eval mode
/// without augmentation using the seed's clean labels.
pub fn compute_centroids<R: Real>(
    model: &ViTModel<R>,
    seed: &[usize],
    data: &ImageDataset,
    batch: usize,
) -> Result<CleanCoreCentroids> {
    let cfg = model.config();
    let (heads, tokens, classes) = (cfg.heads, cfg.tokens(), cfg.num_classes);
    let labels: Vec<usize> = seed.iter().map(|&i| data.label(i)).collect();
    let mut present = vec![false; classes];
    for &y in &labels {
        if y < classes {
            present[y] = true;
        }
    }
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(Error::Coverage(format!("class {c} has no clean seed sample")));
    }
    let mut maps = Vec::with_capacity(seed.len() * heads * tokens * tokens);
    model.forward_batches(data, seed, batch, |_, fwd| {
        let b = fwd.probs.shape()[0];
        for i in 0..b {
            maps.extend(fwd.attention.last(i).iter().map(|v| v.as_f64()));
        }
        Ok(())
    })?;
    CleanCoreCentroids::from_maps(heads, tokens, classes, &maps, &labels)
}

/// Rescales to [0, 1]; a constant vector maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Combines per-sample entropy and centroid distance into GCI_ViTAL scores:
/// `minmax(entropy) + weight * minmax(distance)`.
pub fn combine_gci(entropy: &[f64], distance: &[f64], weight: f64) -> Result<Vec<f64>> {
    if entropy.len() != distance.len() {
        return Err(Error::shape(
            "gci_vital_scores",
            format!("{} entropies for {} distances", entropy.len(), distance.len()),
        ));
    }
    if entropy.iter().chain(distance).any(|v| !v.is_finite()) {
        return Err(Error::Numeric { op: "gci_vital_scores" });
    }
    Ok(min_max(entropy).into_iter().zip(min_max(distance)).map(|(e, d)| e + weight * d).collect())
}

/// GCI_ViTAL scores for `n` samples given their class probabilities
/// (`[n, classes]`) and last-layer attention maps (`[n, heads, tokens, tokens]`).
pub fn gci_vital_scores(
    probs: &[f64],
    attentions: &[f64],
    centroids: &CleanCoreCentroids,
    cfg: &GciConfig,
) -> Result<Vec<f64>> {
    let classes = centroids.num_classes();
    let n = check_distributions("gci_vital_scores", probs, classes)?;
    let len = centroids.map_len();
    if attentions.len() != n * len {
        return Err(Error::shape(
            "gci_vital_scores",
            format!("{} attention values for {n} maps of shape {:?}", attentions.len(), centroids.shape()),
        ));
    }
    let ent: Vec<f64> = probs.chunks_exact(classes).map(entropy).collect();
    let dist = probs
        .chunks_exact(classes)
        .zip(attentions.chunks_exact(len))
        .map(|(p, a)| centroids.distance(a, p, cfg.target))
        .collect::<Result<Vec<_>>>()?;
    combine_gci(&ent, &dist, cfg.distance_weight)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;
    use crate::rng::StdRng;

    #[test]
    fn random_selection_is_distinct_and_exhaustive() {
        let pool = Pool::new(50, (0..10).collect()).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let mut all = select_random(&pool, 40, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, pool.unlabeled());
        let some = select_random(&pool, 25, &mut rng).unwrap();
        let mut dedup = some.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 25);
        assert!(some.iter().all(|i| *i >= 10));
        assert!(matches!(select_random(&pool, 41, &mut rng), Err(Error::Budget { .. })));
    }

    #[test]
    fn random_selection_frequency_is_uniform() {
        let pool = Pool::new(100, Vec::new()).unwrap();
        let mut rng = StdRng::seed_from_u64(11);
        let trials = 10_000;
        let mut hits = [0usize; 100];
        for _ in 0..trials {
            for i in select_random(&pool, 10, &mut rng).unwrap() {
                hits[i] += 1;
            }
        }
        let sigma = (0.1f64 * 0.9 / trials as f64).sqrt();
        for (i, &h) in hits.iter().enumerate() {
            let f = h as f64 / trials as f64;
            assert!((f - 0.1).abs() <= 3.0 * sigma, "index {i}: {f}");
        }
    }

    #[test]
    fn entropy_cases() {
        let s = entropy_scores(&[1.0, 0.0, 0.5, 0.5], 2).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 2f64.ln()).abs() < 1e-15);
        assert!(entropy_scores(&[0.25, 0.25], 2).is_err());
        let u = entropy_scores(&[0.1; 10], 10).unwrap();
        assert!((u[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn top_k_ties_and_edges() {
        assert_eq!(select_top_k(&[3.0, 3.0, 1.0], 1).unwrap(), vec![0]);
        assert!(select_top_k(&[1.0], 0).unwrap().is_empty());
        assert!(matches!(select_top_k(&[1.0], 2), Err(Error::Budget { .. })));
        assert!(select_top_k(&[f64::NAN], 1).is_err());
    }

    #[test]
    fn pool_tracks_partition() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut pool = Pool::random_seed(30, 5, &mut rng).unwrap();
        let picked = select_random(&pool, 7, &mut rng).unwrap();
        let batch = picked
            .iter()
            .map(|&index| Acquired { index, label: 0, flipped: false, round: 1, smoothing: 0.0 })
            .collect();
        pool.acquire(batch).unwrap();
        pool.check().unwrap();
        assert_eq!(pool.labeled_len(), 12);
        assert_eq!(pool.unlabeled().len(), 18);
        let again = vec![Acquired { index: picked[0], label: 0, flipped: false, round: 2, smoothing: 0.0 }];
        assert!(pool.acquire(again).is_err());
        assert!(Pool::new(5, vec![1, 1]).is_err());
    }

    fn uniform_rows(tokens: usize, heads: usize) -> Vec<f64> {
        vec![1.0 / tokens as f64; heads * tokens * tokens]
    }

    #[test]
    fn centroids_average_per_class() {
        let a = uniform_rows(2, 1);
        let b = vec![1.0, 0.0, 0.0, 1.0];
        let maps: Vec<f64> = a.iter().chain(&b).chain(&b).copied().collect();
        let c = CleanCoreCentroids::from_maps(1, 2, 2, &maps, &[0, 0, 1]).unwrap();
        assert_eq!(c.centroids[0], vec![0.75, 0.25, 0.25, 0.75]);
        assert_eq!(c.centroids[1], b);
        assert_eq!(c.shape(), [1, 2, 2]);
        let err = CleanCoreCentroids::from_maps(1, 2, 3, &maps, &[0, 0, 1]).unwrap_err();
        assert!(matches!(err, Error::Coverage(ref m) if m.contains("class 2")));
    }

    #[test]
    fn gci_minimum_is_zero() {
        let map = vec![1.0, 0.0, 0.0, 1.0];
        let other = uniform_rows(2, 1);
        let cents = CleanCoreCentroids::from_maps(1, 2, 2, &[map.clone(), other.clone()].concat(), &[0, 1]).unwrap();
        let probs = [1.0, 0.0, 0.5, 0.5];
        let atts = [map, other].concat();
        let s = gci_vital_scores(&probs, &atts, &cents, &GciConfig::default()).unwrap();
        assert_eq!(s[0], 0.0);
        let bad = gci_vital_scores(&probs, &atts[..6], &cents, &GciConfig::default());
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn gci_increases_with_entropy_at_fixed_distance() {
        let e = [0.1, 0.5, 0.9, 0.2];
        let d = [0.3, 0.3, 0.3, 0.7];
        let s = combine_gci(&e, &d, 1.0).unwrap();
        assert!(s[0] < s[1] && s[1] < s[2]);
        assert_eq!(min_max(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn top_k_invariant_under_monotone_maps(
            raw in proptest::collection::vec(-500i32..500, 1..60),
            k_frac in 0.0f64..=1.0,
        ) {
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            let k = (k_frac * scores.len() as f64) as usize;
            let base = select_top_k(&scores, k).unwrap();
            let maps: [fn(f64) -> f64; 3] = [|x| (x / 100.0).exp(), |x| 3.0 * x + 7.0, |x| x * x * x];
            for f in maps {
                let t: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
                prop_assert_eq!(&select_top_k(&t, k).unwrap(), &base);
            }
        }
    }
}
