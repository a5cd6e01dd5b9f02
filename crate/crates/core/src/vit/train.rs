use std::time::Instant;

use rand::seq::SliceRandom;

use super::{argmax_rows, patchify, ViTModel};
use crate::dataset::{augment, normalize_into, ImageDataset};
use crate::error::{Error, Result};
use crate::rng::StdRng;
use crate::tensor::{Real, Tape, Tensor};

/// Per-round fine-tuning schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Upper bound on epochs per round.
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Peak Adam learning rate; decays along a half cosine over the round.
    pub learning_rate: f64,
    /// Share of the labeled set held out for early stopping.
    pub val_fraction: f64,
    pub augment: bool,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 20,
            patience: 10,
            batch_size: 64,
            learning_rate: 3e-4,
            val_fraction: 0.1,
            augment: true,
            eval_batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be at least 1".into()));
        }
        if self.max_epochs > 20 {
            return Err(Error::Config(format!("at most 20 epochs per round, got {}", self.max_epochs)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::Config(format!("validation fraction {} not in [0,0.5)", self.val_fraction)));
        }
        Ok(())
    }
}

/// One training example: dataset index, (possibly noisy) label and the
/// label-smoothing epsilon to train it with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledSample {
    pub index: usize,
    pub label: usize,
    pub smoothing: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStats {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Wall-clock seconds spent inside the round's fit.
    pub seconds: f64,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopVerdict {
    Improved,
    Continue,
    Stop,
}

/// Patience-based stopping on a loss that should decrease.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Records the loss of 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopVerdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopVerdict::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopVerdict::Stop
            } else {
                StopVerdict::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Adam with bias correction; the step size is supplied per step.
pub struct Adam<R: Real = f32> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(params: &[Tensor<R>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![R::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![R::zero(); p.numel()]).collect(),
        }
    }

    pub fn step<'g>(&mut self, params: &mut [Tensor<R>], grads: impl Fn(usize) -> Option<&'g [R]>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let (c1, c2) = (R::one() - b1, R::one() - b2);
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = R::lit(lr * bc2.sqrt() / bc1);
        let eps = R::lit(self.eps * bc2.sqrt());
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads(i) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Normalized (optionally augmented) patch matrix for a batch of samples.
fn batch_patches<R: Real>(
    model: &ViTModel<R>,
    data: &ImageDataset,
    indices: impl ExactSizeIterator<Item = usize>,
    mut augment_rng: Option<&mut StdRng>,
) -> Result<(Tensor<R>, usize)> {
    let s = model.config().image_size;
    if data.side() != s {
        return Err(Error::shape(
            "vit forward",
            format!("dataset images are {0}x{0}, model expects {s}x{s}", data.side()),
        ));
    }
    let n = data.image_len();
    let batch = indices.len();
    let mut buf = vec![R::zero(); batch * n];
    for (k, i) in indices.enumerate() {
        let out = &mut buf[k * n..(k + 1) * n];
        match augment_rng.as_deref_mut() {
            Some(r) => normalize_into(&augment(data.image(i), s, r), out),
            None => normalize_into(data.image(i), out),
        }
    }
    let images = Tensor::new([batch, 3, s, s], buf)?;
    Ok((patchify(&images, model.config().patch_size)?, batch))
}

fn train_step<R: Real>(
    model: &mut ViTModel<R>,
    adam: &mut Adam<R>,
    data: &ImageDataset,
    batch: &[LabeledSample],
    lr: f64,
    rng: &mut StdRng,
    augment: bool,
) -> Result<f64> {
    let (patches, b) = batch_patches(model, data, batch.iter().map(|s| s.index), augment.then_some(&mut *rng))?;
    let mut tape = Tape::new();
    let out = model.forward_on_tape(&mut tape, patches, b, Some(rng))?;
    let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let smoothing: Vec<f64> = batch.iter().map(|s| s.smoothing).collect();
    let loss = tape.cross_entropy_smoothed(out.logits, &targets, &smoothing)?;
    let value = tape.value(loss).item().as_f64();
    tape.backward(loss)?;
    adam.step(model.params_mut(), |i| tape.grad(out.params[i]), lr);
    Ok(value)
}

/// Mean unsmoothed cross-entropy over `samples` in evaluation mode.
fn eval_loss<R: Real>(
    model: &ViTModel<R>,
    data: &ImageDataset,
    samples: &[LabeledSample],
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch) {
        let (patches, b) = batch_patches(model, data, chunk.iter().map(|s| s.index), None)?;
        let mut tape = Tape::inference();
        let out = model.forward_on_tape(&mut tape, patches, b, None)?;
        let targets: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let loss = tape.cross_entropy_smoothed(out.logits, &targets, &vec![0.0; b])?;
        total += tape.value(loss).item().as_f64() * b as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Fine-tunes `model` on `samples` for at most `max_epochs` epochs.
///
/// A `val_fraction` share of the samples is held out (shuffled with `rng`)
/// as the early-stopping signal; training stops once the validation loss has
/// not improved for `patience` epochs, and the best-validation weights are
/// restored before returning. Mini-batches are `min(batch_size, n)`.
pub fn fit_round<R: Real>(
    model: &mut ViTModel<R>,
    data: &ImageDataset,
    samples: &[LabeledSample],
    cfg: &TrainConfig,
    rng: &mut StdRng,
) -> Result<TrainStats> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Input("cannot fit on an empty labeled set".into()));
    }
    let classes = model.config().num_classes;
    if let Some(s) = samples.iter().find(|s| s.label >= classes || s.index >= data.len()) {
        return Err(Error::Input(format!(
            "sample {} with label {} is outside the dataset or class range",
            s.index, s.label
        )));
    }
    let start = Instant::now();

    let mut order = samples.to_vec();
    order.shuffle(rng);
    let n_val = if order.len() >= 2 && cfg.val_fraction > 0.0 {
        ((order.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, order.len() - 1)
    } else {
        0
    };
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();

    let batch = cfg.batch_size.min(train.len());
    let per_epoch = train.len().div_ceil(batch);
    let total_steps = cfg.max_epochs * per_epoch;
    let mut adam = Adam::new(model.params());
    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let mut best = model.params().to_vec();
    let mut stats = TrainStats {
        epochs_run: 0,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        seconds: 0.0,
        train_losses: Vec::new(),
        val_losses: Vec::new(),
    };

    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        train.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in train.chunks(batch) {
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            epoch_loss += train_step(model, &mut adam, data, chunk, lr, rng, cfg.augment)? * chunk.len() as f64;
            step += 1;
        }
        let train_loss = epoch_loss / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric { op: "fit_round" });
        }
        stats.train_losses.push(train_loss);
        let signal = if val.is_empty() { train_loss } else { eval_loss(model, data, val, cfg.eval_batch_size)? };
        stats.val_losses.push(signal);
        stats.epochs_run = epoch;
        match stopper.observe(epoch, signal) {
            StopVerdict::Improved => best.clone_from_slice(model.params()),
            StopVerdict::Continue => {}
            StopVerdict::Stop => break,
        }
    }
    model.params_mut().clone_from_slice(&best);
    stats.best_epoch = stopper.best_epoch();
    stats.best_val_loss = stopper.best();
    stats.seconds = start.elapsed().as_secs_f64();
    Ok(stats)
}

/// Class probabilities and argmax predictions for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub num_classes: usize,
    /// Row-major `[n, C]`.
    pub probs: Vec<f64>,
    pub predicted: Vec<usize>,
}

impl Evaluation {
    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

/// Evaluation-mode predictions over `indices`, no augmentation.
pub fn evaluate<R: Real>(
    model: &ViTModel<R>,
    data: &ImageDataset,
    indices: &[usize],
    batch: usize,
) -> Result<Evaluation> {
    let mut eval = Evaluation {
        num_classes: model.config().num_classes,
        probs: Vec::with_capacity(indices.len() * model.config().num_classes),
        predicted: Vec::with_capacity(indices.len()),
    };
    model.forward_batches(data, indices, batch, |_, fwd| {
        eval.probs.extend(fwd.probs.data().iter().map(|v| v.as_f64()));
        eval.predicted.extend(argmax_rows(&fwd.probs));
        Ok(())
    })?;
    Ok(eval)
}

impl<R: Real> ViTModel<R> {
    /// Runs evaluation-mode forward passes over `indices` in chunks of
    /// `batch`, handing each chunk's offset and output to `visit`.
    pub fn forward_batches(
        &self,
        data: &ImageDataset,
        indices: &[usize],
        batch: usize,
        mut visit: impl FnMut(usize, &super::Forward<R>) -> Result<()>,
    ) -> Result<()> {
        for (c, chunk) in indices.chunks(batch.max(1)).enumerate() {
            let (patches, b) = batch_patches(self, data, chunk.iter().copied(), None)?;
            let fwd = self.forward_patches(patches, b)?;
            visit(c * batch.max(1), &fwd)?;
        }
        Ok(())
    }
}
