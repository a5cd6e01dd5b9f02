//! Accuracy, calibration and grid aggregation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::acquisition::Strategy;
use crate::engine::RoundRecord;
use crate::error::{Error, Result};

/// Tolerance on probability rows summing to one.
pub const ROW_SUM_TOL: f64 = 1e-4;

pub fn top1_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::Input("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Checks `probs` is a row-major `[n, classes]` stack of distributions.
pub(crate) fn check_distributions(op: &'static str, probs: &[f64], classes: usize) -> Result<usize> {
    if classes == 0 || !probs.len().is_multiple_of(classes) {
        return Err(Error::shape(op, format!("{} values do not split into rows of {classes}", probs.len())));
    }
    for (i, row) in probs.chunks_exact(classes).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(0.0..=1.0 + ROW_SUM_TOL).contains(p)) || (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Input(format!("{op}: row {i} is not a distribution (sum {sum})")));
        }
    }
    Ok(probs.len() / classes)
}

/// Mean over samples of the squared distance between the predicted
/// distribution and the one-hot truth. Ranges over [0, 2].
pub fn brier_score(probs: &[f64], classes: usize, truth: &[usize]) -> Result<f64> {
    let n = check_distributions("brier_score", probs, classes)?;
    if n != truth.len() {
        return Err(Error::Input(format!("{n} prediction rows for {} labels", truth.len())));
    }
    if n == 0 {
        return Err(Error::Input("brier score of an empty set".into()));
    }
    let mut total = 0.0;
    for (row, &y) in probs.chunks_exact(classes).zip(truth) {
        if y >= classes {
            return Err(Error::Index { op: "brier_score", index: y, bound: classes });
        }
        total += row
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let d = p - if j == y { 1.0 } else { 0.0 };
                d * d
            })
            .sum::<f64>();
    }
    Ok(total / n as f64)
}

/// f64 with a total order, for use as a grouping key.
#[derive(Clone, Copy, Debug)]
pub struct Key(pub f64);

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Which record fields survive grouping. Dropped fields are averaged over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupBy {
    pub model: bool,
    pub noise: bool,
    pub strategy: bool,
    pub proportion: bool,
}

impl GroupBy {
    pub const ALL: Self = Self { model: true, noise: true, strategy: true, proportion: true };
    pub const MODEL_NOISE: Self = Self { model: true, noise: true, strategy: false, proportion: false };
    pub const STRATEGY_NOISE: Self = Self { model: false, noise: true, strategy: true, proportion: false };
    pub const MODEL_STRATEGY_NOISE: Self = Self { model: true, noise: true, strategy: true, proportion: false };
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub model: Option<String>,
    pub noise_rate: Option<Key>,
    pub strategy: Option<Strategy>,
    pub labeled_fraction: Option<Key>,
}

impl CellKey {
    fn of(r: &RoundRecord, by: GroupBy) -> Self {
        Self {
            model: by.model.then(|| r.model.clone()),
            noise_rate: by.noise.then_some(Key(r.noise_rate)),
            strategy: by.strategy.then_some(r.strategy),
            labeled_fraction: by.proportion.then_some(Key(r.labeled_fraction)),
        }
    }

    fn with_strategy(&self, s: Strategy) -> Self {
        Self { strategy: Some(s), ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub key: CellKey,
    pub top1: f64,
    pub brier: f64,
    pub seconds: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub by: GroupBy,
    cells: BTreeMap<CellKey, GridCell>,
}

impl Grid {
    pub fn cells(&self) -> impl Iterator<Item = &GridCell> {
        self.cells.values()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, key: &CellKey) -> Result<&GridCell> {
        self.cells.get(key).ok_or_else(|| Error::Coverage(format!("no records for cell {key:?}")))
    }

    /// Cell lookup with every grouped field given explicitly.
    pub fn cell(
        &self,
        model: Option<&str>,
        noise_rate: Option<f64>,
        strategy: Option<Strategy>,
        labeled_fraction: Option<f64>,
    ) -> Result<&GridCell> {
        self.get(&CellKey {
            model: model.map(str::to_string),
            noise_rate: noise_rate.map(Key),
            strategy,
            labeled_fraction: labeled_fraction.map(Key),
        })
    }
}

/// Unweighted means of accuracy, Brier and seconds per group.
pub fn aggregate_grid(records: &[RoundRecord], by: GroupBy) -> Result<Grid> {
    if records.is_empty() {
        return Err(Error::Input("cannot aggregate an empty record set".into()));
    }
    let mut sums: BTreeMap<CellKey, (f64, f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(CellKey::of(r, by)).or_default();
        e.0 += r.top1;
        e.1 += r.brier;
        e.2 += r.seconds;
        e.3 += 1;
    }
    let cells = sums
        .into_iter()
        .map(|(key, (a, b, s, n))| {
            let m = n as f64;
            let cell = GridCell { key: key.clone(), top1: a / m, brier: b / m, seconds: s / m, runs: n };
            (key, cell)
        })
        .collect();
    Ok(Grid { by, cells })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Delta {
    pub key: CellKey,
    /// `acc_strategy - acc_random`; positive means more accurate.
    pub accuracy: f64,
    /// `brier_random - brier_strategy`; positive means better calibrated.
    pub brier: f64,
}

/// Per-cell differences against the random strategy with every other key
/// held fixed. Random cells come out as exact zeros.
pub fn delta_vs_random(grid: &Grid) -> Result<Vec<Delta>> {
    if !grid.by.strategy {
        return Err(Error::Input("deltas need a grid grouped by strategy".into()));
    }
    grid.cells()
        .map(|cell| {
            let base = grid
                .get(&cell.key.with_strategy(Strategy::Random))
                .map_err(|_| Error::Coverage(format!("no random baseline for {:?}", cell.key)))?;
            Ok(Delta { key: cell.key.clone(), accuracy: cell.top1 - base.top1, brier: base.brier - cell.brier })
        })
        .collect()
}
