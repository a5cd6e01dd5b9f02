//! The active-learning loop: seed, score, acquire, corrupt, fine-tune,
//! evaluate, record.

use crate::acquisition::{
    combine_gci, compute_centroids, entropy, entropy_scores, select_random, select_top_k, Acquired, GciConfig, Pool,
    Strategy,
};
use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::metrics::{brier_score, top1_accuracy};
use crate::noise::NoiseSpec;
use crate::rng;
use crate::vit::{evaluate, fit_round, LabeledSample, TrainConfig, ViTConfig, ViTModel};

#[derive(Clone, Debug, PartialEq)]
pub struct DalConfig {
    pub seed_size: usize,
    pub round_budget: usize,
    pub rounds: usize,
    pub strategy: Strategy,
    pub noise_rate: f64,
    /// Identifier reported in records, normally a preset id.
    pub model: String,
    pub vit: ViTConfig,
    pub master_seed: u64,
    pub train: TrainConfig,
    pub gci: GciConfig,
    /// Start every round from the initial weights instead of fine-tuning.
    pub reinit_each_round: bool,
}

impl DalConfig {
    /// Desk-scale defaults around a preset model.
    pub fn preset(model: &str, num_classes: usize) -> Result<Self> {
        let vit = ViTConfig::preset(model, num_classes)
            .ok_or_else(|| Error::Config(format!("unknown model preset '{model}'")))?;
        Ok(Self {
            seed_size: 256,
            round_budget: 512,
            rounds: 8,
            strategy: Strategy::Random,
            noise_rate: 0.0,
            model: model.to_string(),
            vit,
            master_seed: 0,
            train: TrainConfig::default(),
            gci: GciConfig::default(),
            reinit_each_round: false,
        })
    }

    pub fn validate(&self, train_len: usize) -> Result<()> {
        if self.seed_size == 0 || self.round_budget == 0 {
            return Err(Error::Config("seed size and round budget must be positive".into()));
        }
        let needed = self.rounds.checked_mul(self.round_budget).and_then(|n| n.checked_add(self.seed_size));
        match needed {
            Some(n) if n <= train_len => {}
            _ => return Err(Error::Budget { requested: needed.unwrap_or(usize::MAX), available: train_len }),
        }
        NoiseSpec::symmetric(self.noise_rate, self.master_seed)?;
        self.vit.validate()?;
        self.train.validate()?;
        self.gci.validate()
    }

    fn init_seed(&self) -> u64 {
        rng::derive_seed(self.master_seed, rng::label_hash("model-init"))
    }
}

/// Metrics recorded after one round of training.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub labeled: usize,
    pub labeled_fraction: f64,
    pub top1: f64,
    pub brier: f64,
    /// Wall-clock seconds spent in `fit_round`.
    pub seconds: f64,
    pub epochs: usize,
    pub strategy: Strategy,
    pub noise_rate: f64,
    pub model: String,
    pub seed: u64,
}

/// A DAL run advanced one round at a time.
pub struct DalSession<'a> {
    cfg: DalConfig,
    train: &'a ImageDataset,
    test: &'a ImageDataset,
    noise: NoiseSpec,
    model: ViTModel,
    pool: Pool,
    records: Vec<RoundRecord>,
}

impl<'a> DalSession<'a> {
    pub fn new(train: &'a ImageDataset, test: &'a ImageDataset, cfg: DalConfig) -> Result<Self> {
        cfg.validate(train.len())?;
        let classes = cfg.vit.num_classes;
        if train.num_classes() != classes || test.num_classes() != classes {
            return Err(Error::Config(format!(
                "model predicts {classes} classes, datasets have {} and {}",
                train.num_classes(),
                test.num_classes()
            )));
        }
        if train.side() != cfg.vit.image_size || test.side() != cfg.vit.image_size {
            return Err(Error::Config(format!(
                "model expects {0}x{0} images, datasets have side {1} and {2}",
                cfg.vit.image_size,
                train.side(),
                test.side()
            )));
        }
        if test.is_empty() {
            return Err(Error::Input("test set is empty".into()));
        }
        let noise = NoiseSpec::symmetric(cfg.noise_rate, cfg.master_seed)?;
        let pool = Pool::random_seed(train.len(), cfg.seed_size, &mut rng::stream(cfg.master_seed, "seed-set"))?;
        let model = ViTModel::init(cfg.vit.clone(), cfg.init_seed())?;
        Ok(Self { cfg, train, test, noise, model, pool, records: Vec::new() })
    }

    pub fn config(&self) -> &DalConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &Pool {
        &self.pool
    }

    pub fn model(&self) -> &ViTModel {
        &self.model
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<RoundRecord> {
        self.records
    }

    /// Index of the next round to run.
    pub fn round(&self) -> usize {
        self.records.len()
    }

    pub fn is_done(&self) -> bool {
        self.round() > self.cfg.rounds
    }

    /// Scores for every unlabeled sample under the current model, aligned
    /// with `pool().unlabeled()`.
    pub fn score_unlabeled(&self) -> Result<Vec<f64>> {
        let batch = self.cfg.train.eval_batch_size;
        let u = self.pool.unlabeled();
        match self.cfg.strategy {
            Strategy::Random => Ok(vec![0.0; u.len()]),
            Strategy::Entropy => {
                let eval = evaluate(&self.model, self.train, u, batch)?;
                entropy_scores(&eval.probs, eval.num_classes)
            }
            Strategy::GciVital => {
                let cents = compute_centroids(&self.model, self.pool.seed(), self.train, batch)?;
                let classes = self.cfg.vit.num_classes;
                let mut ent = Vec::with_capacity(u.len());
                let mut dist = Vec::with_capacity(u.len());
                let mut probs = vec![0.0; classes];
                let mut map = vec![0.0; cents.map_len()];
                self.model.forward_batches(self.train, u, batch, |_, fwd| {
                    for (i, row) in fwd.probs.data().chunks_exact(classes).enumerate() {
                        probs.iter_mut().zip(row).for_each(|(d, s)| *d = *s as f64);
                        map.iter_mut().zip(fwd.attention.last(i)).for_each(|(d, s)| *d = *s as f64);
                        ent.push(entropy(&probs));
                        dist.push(cents.distance(&map, &probs, self.cfg.gci.target)?);
                    }
                    Ok(())
                })?;
                combine_gci(&ent, &dist, self.cfg.gci.distance_weight)
            }
        }
    }

    /// Dataset indices the strategy picks for the next acquisition.
    pub fn select(&self) -> Result<Vec<usize>> {
        let k = self.cfg.round_budget;
        let u = self.pool.unlabeled();
        match self.cfg.strategy {
            Strategy::Random => {
                let mut r = rng::indexed_stream(self.cfg.master_seed, "acquire", self.round() as u64);
                select_random(&self.pool, k, &mut r)
            }
            _ => Ok(select_top_k(&self.score_unlabeled()?, k)?.into_iter().map(|j| u[j]).collect()),
        }
    }

    /// Runs the next round: acquisition (after round 0), training and test
    /// evaluation.
    pub fn step(&mut self) -> Result<&RoundRecord> {
        if self.is_done() {
            return Err(Error::Input(format!("all {} rounds already ran", self.cfg.rounds)));
        }
        let round = self.round();
        if round > 0 {
            let chosen = self.select()?;
            let classes = self.cfg.vit.num_classes;
            let smoothing = match self.cfg.strategy {
                Strategy::GciVital => self.cfg.gci.smoothing,
                _ => 0.0,
            };
            let batch = chosen
                .into_iter()
                .map(|index| {
                    let (label, flipped) = self.noise.corrupt_one(index, self.train.label(index), classes)?;
                    Ok(Acquired { index, label, flipped, round, smoothing })
                })
                .collect::<Result<Vec<_>>>()?;
            self.pool.acquire(batch)?;
            if self.cfg.reinit_each_round {
                self.model = ViTModel::init(self.cfg.vit.clone(), self.cfg.init_seed())?;
            }
        }

        let samples = self.labeled_samples();
        let mut r = rng::indexed_stream(self.cfg.master_seed, "train", round as u64);
        let stats = fit_round(&mut self.model, self.train, &samples, &self.cfg.train, &mut r)?;

        let all: Vec<usize> = (0..self.test.len()).collect();
        let eval = evaluate(&self.model, self.test, &all, self.cfg.train.eval_batch_size)?;
        let top1 = top1_accuracy(&eval.predicted, self.test.labels())?;
        let brier = brier_score(&eval.probs, eval.num_classes, self.test.labels())?;

        self.records.push(RoundRecord {
            round,
            labeled: self.pool.labeled_len(),
            labeled_fraction: self.pool.labeled_fraction(),
            top1,
            brier,
            seconds: stats.seconds,
            epochs: stats.epochs_run,
            strategy: self.cfg.strategy,
            noise_rate: self.cfg.noise_rate,
            model: self.cfg.model.clone(),
            seed: self.cfg.master_seed,
        });
        Ok(self.records.last().expect("record just pushed"))
    }

    /// Training targets: clean labels for the seed, oracle labels for
    /// everything acquired since.
    pub fn labeled_samples(&self) -> Vec<LabeledSample> {
        let seed = self.pool.seed().iter().map(|&index| LabeledSample {
            index,
            label: self.train.label(index),
            smoothing: 0.0,
        });
        let acquired = self.pool.acquired().iter().map(|a| LabeledSample {
            index: a.index,
            label: a.label,
            smoothing: a.smoothing,
        });
        seed.chain(acquired).collect()
    }
}

/// Runs rounds `0..=cfg.rounds` and returns one record per round.
pub fn run_dal(train: &ImageDataset, test: &ImageDataset, cfg: DalConfig) -> Result<Vec<RoundRecord>> {
    run_dal_with(train, test, cfg, |_| {})
}

/// [`run_dal`] with a callback after each round.
pub fn run_dal_with(
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: DalConfig,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<Vec<RoundRecord>> {
    let mut session = DalSession::new(train, test, cfg)?;
    while !session.is_done() {
        on_round(session.step()?);
    }
    Ok(session.into_records())
}
