//! Symmetric label noise.
//!
//! A corrupted label is redrawn uniformly from the *other* `C - 1` classes,
//! so the observed change rate equals the noise rate. Each sample's draw
//! comes from its own stream keyed by `(seed, sample index)`, which makes a
//! sample's noisy label independent of when or alongside what it is
//! acquired.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Upper end of the studied noise range.
pub const MAX_NOISE_RATE: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    rate: f64,
    seed: u64,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=MAX_NOISE_RATE).contains(&rate) {
            return Err(Error::Config(format!("noise rate {rate} outside [0, {MAX_NOISE_RATE}]")));
        }
        Ok(Self { rate, seed })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Noisy label for dataset sample `index` whose true label is `label`.
    pub fn corrupt_one(&self, index: usize, label: usize, classes: usize) -> Result<(usize, bool)> {
        check_classes(label, classes)?;
        let mut r = rng::indexed_stream(self.seed, "label-noise", index as u64);
        Ok(flip(label, self.rate, classes, &mut r))
    }

    /// Corrupts the labels of the given dataset indices.
    pub fn corrupt_indexed(
        &self,
        indices: &[usize],
        labels: &[usize],
        classes: usize,
    ) -> Result<(Vec<usize>, Vec<bool>)> {
        if indices.len() != labels.len() {
            return Err(Error::Input(format!("{} indices for {} labels", indices.len(), labels.len())));
        }
        indices
            .iter()
            .zip(labels)
            .map(|(&i, &l)| self.corrupt_one(i, l, classes))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().unzip())
    }
}

fn check_classes(label: usize, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Input(format!("symmetric noise needs at least 2 classes, got {classes}")));
    }
    if label >= classes {
        return Err(Error::Index { op: "corrupt_labels", index: label, bound: classes });
    }
    Ok(())
}

fn flip(label: usize, rate: f64, classes: usize, rng: &mut impl Rng) -> (usize, bool) {
    if rate > 0.0 && rng.random::<f64>() < rate {
        let other = rng.random_range(0..classes - 1);
        (if other >= label { other + 1 } else { other }, true)
    } else {
        (label, false)
    }
}

/// Corrupts every label independently with probability `rate`, drawing from
/// a single stream. Returns the noisy labels and the flip mask.
pub fn corrupt_labels(
    labels: &[usize],
    rate: f64,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Input(format!("noise rate {rate} not a probability")));
    }
    let mut noisy = Vec::with_capacity(labels.len());
    let mut mask = Vec::with_capacity(labels.len());
    for &l in labels {
        check_classes(l, classes)?;
        let (n, f) = flip(l, rate, classes, rng);
        noisy.push(n);
        mask.push(f);
    }
    Ok((noisy, mask))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::rng::StdRng;

    #[test]
    fn zero_rate_is_identity() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 7).collect();
        let (noisy, mask) = corrupt_labels(&labels, 0.0, 7, &mut StdRng::seed_from_u64(1)).unwrap();
        assert_eq!(noisy, labels);
        assert!(mask.iter().all(|m| !m));
    }

    #[test]
    fn high_rate_matches_binomial() {
        let n = 100_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let (noisy, mask) = corrupt_labels(&labels, 0.9, 10, &mut StdRng::seed_from_u64(2)).unwrap();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / n as f64;
        assert!((frac - 0.9).abs() <= 3.0 * (0.9f64 * 0.1 / n as f64).sqrt(), "{frac}");
        for ((&l, &y), &m) in labels.iter().zip(&noisy).zip(&mask) {
            assert_eq!(m, l != y);
        }
    }

    #[test]
    fn needs_two_classes() {
        assert!(corrupt_labels(&[0], 0.5, 1, &mut StdRng::seed_from_u64(0)).is_err());
        assert!(corrupt_labels(&[3], 0.5, 3, &mut StdRng::seed_from_u64(0)).is_err());
        assert!(NoiseSpec::symmetric(0.95, 0).is_err());
    }

    #[test]
    fn per_index_corruption_commutes_with_subsetting() {
        let spec = NoiseSpec::symmetric(0.5, 77).unwrap();
        let indices: Vec<usize> = (0..500).collect();
        let labels: Vec<usize> = indices.iter().map(|i| i % 10).collect();
        let (all, _) = spec.corrupt_indexed(&indices, &labels, 10).unwrap();
        let picked = [3usize, 499, 17, 250, 4];
        let sub_labels: Vec<usize> = picked.iter().map(|&i| labels[i]).collect();
        let (sub, _) = spec.corrupt_indexed(&picked, &sub_labels, 10).unwrap();
        for (k, &i) in picked.iter().enumerate() {
            assert_eq!(sub[k], all[i]);
        }
    }
}
