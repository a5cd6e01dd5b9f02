//! Miniature vision transformer.
//!
//! Pre-norm encoder blocks, learnable 1-D positional embeddings and a
//! class-token readout. Attention follows the usual per-head form
//! `softmax(x W_q (x W_k)^T / sqrt(d_k)) (x W_v)`, heads concatenated and
//! projected by `W_o`.

mod checkpoint;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{normalize_into, ImageDataset};
use crate::error::{Error, Result};
use crate::rng::{self, StdRng};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use train::{
    evaluate, fit_round, Adam, EarlyStopping, Evaluation, LabeledSample, StopVerdict, TrainConfig, TrainStats,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl ViTConfig {
    /// Built-in desk-scale analogues of the base/large, fine/coarse-patch
    /// grid: `vit-b8`, `vit-b4` (E=32, L=2, H=2) and `vit-l8`, `vit-l4`
    /// (E=64, L=4, H=4), with a 4x MLP expansion and 32x32 inputs.
    pub fn preset(id: &str, num_classes: usize) -> Option<Self> {
        let (patch_size, embed_dim, layers, heads) = match id {
            "vit-b8" => (8, 32, 2, 2),
            "vit-b4" => (4, 32, 2, 2),
            "vit-l8" => (8, 64, 4, 4),
            "vit-l4" => (4, 64, 4, 4),
            _ => return None,
        };
        Some(Self {
            image_size: 32,
            patch_size,
            embed_dim,
            layers,
            heads,
            mlp_dim: 4 * embed_dim,
            num_classes,
            dropout: 0.0,
        })
    }

    pub const PRESETS: [&'static str; 4] = ["vit-b8", "vit-b4", "vit-l8", "vit-l4"];

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding size {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens `N = (S / P)^2`.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Parameters of one encoder block.
    pub fn block_param_count(&self) -> usize {
        let (e, m) = (self.embed_dim, self.mlp_dim);
        4 * e + 4 * e * e + e * m + m + m * e + e
    }

    pub fn param_count(&self) -> usize {
        let (e, c) = (self.embed_dim, self.num_classes);
        self.patch_dim() * e + e + e + self.tokens() * e + self.layers * self.block_param_count() + 2 * e + e * c + c
    }
}

const BLOCK_PARAMS: usize = 12;
const STEM_PARAMS: usize = 4;

/// Parameter slots of one encoder block, as offsets from the block start.
mod slot {
    pub const NORM1_GAMMA: usize = 0;
    pub const NORM1_BETA: usize = 1;
    pub const W_Q: usize = 2;
    pub const W_K: usize = 3;
    pub const W_V: usize = 4;
    pub const W_O: usize = 5;
    pub const NORM2_GAMMA: usize = 6;
    pub const NORM2_BETA: usize = 7;
    pub const FC1_W: usize = 8;
    pub const FC1_B: usize = 9;
    pub const FC2_W: usize = 10;
    pub const FC2_B: usize = 11;
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Learned weights, stored in a fixed declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel<R: Real = f32> {
    config: ViTConfig,
    names: Vec<String>,
    params: Vec<Tensor<R>>,
}

/// Attention projections of one block, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Per-layer attention weights of one forward batch, each `[B, H, T, T]`.
#[derive(Clone, Debug)]
pub struct AttentionRecord<R: Real = f32> {
    pub heads: usize,
    pub tokens: usize,
    pub layers: Vec<Tensor<R>>,
}

impl<R: Real> AttentionRecord<R> {
    /// `[H, T, T]` map of sample `i` at `layer`.
    pub fn sample(&self, layer: usize, i: usize) -> &[R] {
        let n = self.heads * self.tokens * self.tokens;
        &self.layers[layer].data()[i * n..(i + 1) * n]
    }

    pub fn last(&self, i: usize) -> &[R] {
        self.sample(self.layers.len() - 1, i)
    }
}

/// Result of an evaluation-mode forward pass over a batch.
#[derive(Clone, Debug)]
pub struct Forward<R: Real = f32> {
    pub logits: Tensor<R>,
    pub probs: Tensor<R>,
    pub attention: AttentionRecord<R>,
}

/// Tape handles produced by [`ViTModel::forward_on_tape`].
pub struct TapeForward {
    pub logits: Var,
    pub attention: Vec<Var>,
    pub params: Vec<Var>,
}

fn layout(config: &ViTConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (e, m, c) = (config.embed_dim, config.mlp_dim, config.num_classes);
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![config.patch_dim(), e], Init::Normal),
        ("patch_embed.bias".to_string(), vec![e], Init::Zeros),
        ("cls_token".to_string(), vec![e], Init::Normal),
        ("pos_embed".to_string(), vec![config.tokens(), e], Init::Normal),
    ];
    for l in 0..config.layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            (p("norm1.gamma"), vec![e], Init::Ones),
            (p("norm1.beta"), vec![e], Init::Zeros),
            (p("attn.w_q"), vec![e, e], Init::Normal),
            (p("attn.w_k"), vec![e, e], Init::Normal),
            (p("attn.w_v"), vec![e, e], Init::Normal),
            (p("attn.w_o"), vec![e, e], Init::Normal),
            (p("norm2.gamma"), vec![e], Init::Ones),
            (p("norm2.beta"), vec![e], Init::Zeros),
            (p("mlp.fc1.weight"), vec![e, m], Init::Normal),
            (p("mlp.fc1.bias"), vec![m], Init::Zeros),
            (p("mlp.fc2.weight"), vec![m, e], Init::Normal),
            (p("mlp.fc2.bias"), vec![e], Init::Zeros),
        ]);
    }
    out.extend([
        ("norm.gamma".to_string(), vec![e], Init::Ones),
        ("norm.beta".to_string(), vec![e], Init::Zeros),
        ("head.weight".to_string(), vec![e, c], Init::Normal),
        ("head.bias".to_string(), vec![c], Init::Zeros),
    ]);
    out
}

/// Draws from N(0, 0.02^2) truncated at two standard deviations.
fn trunc_normal(rng: &mut impl Rng) -> f64 {
    let normal = Normal::new(0.0, 0.02).expect("valid sigma");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 0.04 {
            return v;
        }
    }
}

impl<R: Real> ViTModel<R> {
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "vit-init");
        let (names, params) = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Normal => Tensor::from_fn(shape, |_| R::lit(trunc_normal(&mut r))),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, R::one()),
                };
                (name, t)
            })
            .unzip();
        Ok(Self { config, names, params })
    }

    /// Builds a model from named tensors in declaration order.
    pub fn from_named(config: ViTConfig, named: Vec<(String, Tensor<R>)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", expected.len(), named.len())));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor '{got_name}' {:?} does not match '{name}' {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<R>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<R>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Parameters inside the encoder blocks.
    pub fn encoder_param_count(&self) -> usize {
        self.params[STEM_PARAMS..STEM_PARAMS + self.config.layers * BLOCK_PARAMS].iter().map(Tensor::numel).sum()
    }

    pub fn cast<S: Real>(&self) -> ViTModel<S> {
        ViTModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_images(&self, images: &Tensor<R>) -> Result<usize> {
        let s = self.config.image_size;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape("vit forward", format!("expected [B, 3, {s}, {s}], got {shape:?}")));
        }
        Ok(shape[0])
    }

    /// Records a forward pass on `tape`. `patches` comes from [`patchify`];
    /// a `dropout_rng` switches dropout on (training mode).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<R>,
        patches: Tensor<R>,
        batch: usize,
        mut dropout_rng: Option<&mut StdRng>,
    ) -> Result<TapeForward> {
        let cfg = &self.config;
        if patches.shape() != [batch * cfg.num_patches(), cfg.patch_dim()] {
            return Err(Error::shape(
                "vit forward",
                format!(
                    "patch matrix {:?} for batch {batch}, expected [{}, {}]",
                    patches.shape(),
                    batch * cfg.num_patches(),
                    cfg.patch_dim()
                ),
            ));
        }
        let p: Vec<Var> = self.params.iter().map(|t| tape.param(t.clone())).collect();
        let dropout = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };

        let x = tape.constant(patches);
        let emb = tape.matmul(x, p[0])?;
        let emb = tape.add_bias(emb, p[1])?;
        let mut h = tape.prepend_class_token(emb, p[2], p[3], batch)?;

        let mut attention = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let b = &p[STEM_PARAMS + l * BLOCK_PARAMS..STEM_PARAMS + (l + 1) * BLOCK_PARAMS];
            let a = tape.layer_norm(h, b[slot::NORM1_GAMMA], b[slot::NORM1_BETA])?;
            let weights =
                AttentionWeights { w_q: b[slot::W_Q], w_k: b[slot::W_K], w_v: b[slot::W_V], w_o: b[slot::W_O] };
            let (out, attn) = multi_head_attention(tape, a, weights, batch, cfg.heads)?;
            attention.push(attn);
            let out = match dropout_rng.as_deref_mut() {
                Some(r) => tape.dropout(out, dropout, r)?,
                None => out,
            };
            h = tape.add(h, out)?;

            let m = tape.layer_norm(h, b[slot::NORM2_GAMMA], b[slot::NORM2_BETA])?;
            let m = tape.matmul(m, b[slot::FC1_W])?;
            let m = tape.add_bias(m, b[slot::FC1_B])?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, b[slot::FC2_W])?;
            let m = tape.add_bias(m, b[slot::FC2_B])?;
            let m = match dropout_rng.as_deref_mut() {
                Some(r) => tape.dropout(m, dropout, r)?,
                None => m,
            };
            h = tape.add(h, m)?;
        }
        let n = p.len();
        let h = tape.layer_norm(h, p[n - 4], p[n - 3])?;
        let t = cfg.tokens();
        let rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let cls = tape.gather_rows(h, &rows)?;
        let logits = tape.matmul(cls, p[n - 2])?;
        let logits = tape.add_bias(logits, p[n - 1])?;
        Ok(TapeForward { logits, attention, params: p })
    }

    /// Evaluation-mode forward pass over normalized images `[B, 3, S, S]`.
    pub fn forward(&self, images: &Tensor<R>) -> Result<Forward<R>> {
        let batch = self.check_images(images)?;
        self.forward_patches(patchify(images, self.config.patch_size)?, batch)
    }

    pub(crate) fn forward_patches(&self, patches: Tensor<R>, batch: usize) -> Result<Forward<R>> {
        let mut tape = Tape::inference();
        let out = self.forward_on_tape(&mut tape, patches, batch, None)?;
        let probs = tape.softmax(out.logits, 1)?;
        let (h, t) = (self.config.heads, self.config.tokens());
        let layers =
            out.attention.iter().map(|&a| tape.take_value(a).reshape([batch, h, t, t])).collect::<Result<Vec<_>>>()?;
        Ok(Forward {
            probs: tape.take_value(probs),
            logits: tape.take_value(out.logits),
            attention: AttentionRecord { heads: h, tokens: t, layers },
        })
    }

    /// Token sequence `[N+1, E]` for one normalized image `[3, S, S]`: class
    /// token followed by projected patches, positional embeddings added.
    pub fn patchify_embed(&self, image: &Tensor<R>) -> Result<Tensor<R>> {
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape("patchify_embed", format!("expected [3, {s}, {s}], got {:?}", image.shape())));
        }
        let batch = image.clone().reshape([1, 3, s, s])?;
        let mut tape = Tape::inference();
        let x = tape.constant(patchify(&batch, self.config.patch_size)?);
        let w = tape.constant(self.params[0].clone());
        let b = tape.constant(self.params[1].clone());
        let cls = tape.constant(self.params[2].clone());
        let pos = tape.constant(self.params[3].clone());
        let emb = tape.matmul(x, w)?;
        let emb = tape.add_bias(emb, b)?;
        let seq = tape.prepend_class_token(emb, cls, pos, 1)?;
        Ok(tape.take_value(seq))
    }

    /// Evaluation-mode forward pass over dataset samples, normalized without
    /// augmentation.
    pub fn forward_samples(&self, data: &ImageDataset, indices: &[usize]) -> Result<Forward<R>> {
        let s = self.config.image_size;
        if data.side() != s {
            return Err(Error::shape(
                "vit forward",
                format!("dataset images are {0}x{0}, model expects {s}x{s}", data.side()),
            ));
        }
        let n = data.image_len();
        let mut buf = vec![R::zero(); indices.len() * n];
        for (k, &i) in indices.iter().enumerate() {
            normalize_into(data.image(i), &mut buf[k * n..(k + 1) * n]);
        }
        let images = Tensor::new([indices.len(), 3, s, s], buf)?;
        self.forward(&images)
    }
}

/// Multi-head scaled dot-product attention over `x: [B*T, E]`.
///
/// Returns the projected output `[B*T, E]` and the attention weights
/// `[B*H, T, T]`.
pub fn multi_head_attention<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    w: AttentionWeights,
    batch: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let e = tape.value(x).shape().get(1).copied().unwrap_or(0);
    if heads == 0 || e % heads != 0 {
        return Err(Error::shape("multi_head_attention", format!("embedding {e} not divisible by {heads} heads")));
    }
    let dk = e / heads;
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    let (q, k, v) =
        (tape.split_heads(q, batch, heads)?, tape.split_heads(k, batch, heads)?, tape.split_heads(v, batch, heads)?);
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.batch_matmul(attn, v, false)?;
    let merged = tape.merge_heads(ctx, batch, heads)?;
    let out = tape.matmul(merged, w.w_o)?;
    Ok((out, attn))
}

/// Non-overlapping `P x P` patches of `[B, 3, S, S]` images, flattened as
/// `(channel, row, col)` into rows of a `[B * N, 3 P^2]` matrix. Patches are
/// ordered row-major over the patch grid.
pub fn patchify<R: Real>(images: &Tensor<R>, patch: usize) -> Result<Tensor<R>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] || patch == 0 || !shape[2].is_multiple_of(patch) {
        return Err(Error::shape("patchify", format!("images {shape:?} with patch size {patch}")));
    }
    let (batch, side) = (shape[0], shape[2]);
    let g = side / patch;
    let pd = 3 * patch * patch;
    let src = images.data();
    let mut out = vec![R::zero(); batch * g * g * pd];
    for b in 0..batch {
        for gy in 0..g {
            for gx in 0..g {
                let row = ((b * g + gy) * g + gx) * pd;
                for c in 0..3 {
                    for py in 0..patch {
                        let s = ((b * 3 + c) * side + gy * patch + py) * side + gx * patch;
                        let d = row + (c * patch + py) * patch;
                        out[d..d + patch].copy_from_slice(&src[s..s + patch]);
                    }
                }
            }
        }
    }
    Tensor::new([batch * g * g, pd], out)
}

/// Index of the largest entry of each row.
pub fn argmax_rows<R: Real>(probs: &Tensor<R>) -> Vec<usize> {
    let c = probs.shape().last().copied().unwrap_or(1);
    probs
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, R::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn tiny(patch: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: patch,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_dim: 16,
            num_classes: 3,
            dropout: 0.0,
        }
    }

    fn random_images(batch: usize, side: usize, seed: u64) -> Tensor<f64> {
        let mut r = StdRng::seed_from_u64(seed);
        Tensor::from_fn([batch, 3, side, side], |_| r.random_range(-2.0..2.0))
    }

    #[test]
    fn token_geometry() {
        let mut c = ViTConfig::preset("vit-l4", 10).unwrap();
        assert_eq!((c.num_patches(), c.tokens()), (64, 65));
        c.patch_size = 32;
        assert_eq!((c.num_patches(), c.tokens()), (1, 2));
        c.image_size = 224;
        c.patch_size = 16;
        assert_eq!(c.num_patches(), 196);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(4);
        assert!(c.validate().is_ok());
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(4);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(4);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny(4);
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let c = tiny(4);
        let m = ViTModel::<f32>::init(c.clone(), 1).unwrap();
        assert_eq!(m.param_count(), c.param_count());
        assert_eq!(ViTModel::<f32>::init(c.clone(), 2).unwrap().param_count(), m.param_count());
        let mut deep = c.clone();
        deep.layers *= 2;
        let d = ViTModel::<f32>::init(deep, 1).unwrap();
        assert_eq!(d.encoder_param_count(), 2 * m.encoder_param_count());
        assert_eq!(d.param_count() - m.param_count(), m.encoder_param_count());
    }

    #[test]
    fn patchify_layout() {
        // one image, side 4, patch 2: patch (gy=0,gx=1) channel 1 row 1
        let img = Tensor::<f64>::from_fn([1, 3, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // channel 1 starts at 16; row 1, cols 2..4 -> 16 + 4 + 2 = 22, 23
        let row = p.row(1);
        assert_eq!(&row[4 + 2..4 + 4], &[22.0, 23.0]);
    }

    #[test]
    fn patchify_embed_shapes_and_errors() {
        let m = ViTModel::<f64>::init(tiny(4), 3).unwrap();
        let img = random_images(1, 8, 0).reshape([3, 8, 8]).unwrap();
        let seq = m.patchify_embed(&img).unwrap();
        assert_eq!(seq.shape(), &[5, 8]);
        // class token row is cls + pos[0]
        let cls = m.param("cls_token").unwrap().data();
        let pos = m.param("pos_embed").unwrap().data();
        for j in 0..8 {
            assert!((seq.data()[j] - (cls[j] + pos[j])).abs() < 1e-12);
        }
        let wrong = random_images(1, 4, 0).reshape([3, 4, 4]).unwrap();
        assert!(matches!(m.patchify_embed(&wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_contracts() {
        let m = ViTModel::<f64>::init(tiny(2), 4).unwrap();
        let out = m.forward(&random_images(3, 8, 1)).unwrap();
        assert_eq!(out.logits.shape(), &[3, 3]);
        for row in out.probs.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(out.attention.layers.len(), 2);
        assert_eq!(out.attention.layers[1].shape(), &[3, 2, 17, 17]);
        for layer in &out.attention.layers {
            for row in layer.data().chunks(17) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        assert!(m.forward(&random_images(2, 4, 1)).is_err());
    }

    #[test]
    fn zero_query_weights_give_uniform_attention() {
        let mut r = StdRng::seed_from_u64(5);
        let (t, e, heads) = (3usize, 4usize, 2usize);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([t, e], |_| r.random_range(-1.0..1.0)));
        let wv_t = Tensor::from_fn([e, e], |_| r.random_range(-1.0..1.0));
        let w = AttentionWeights {
            w_q: tape.constant(Tensor::zeros([e, e])),
            w_k: tape.constant(Tensor::from_fn([e, e], |_| r.random_range(-1.0..1.0))),
            w_v: tape.constant(wv_t.clone()),
            w_o: tape.constant(Tensor::from_fn([e, e], |i| if i % (e + 1) == 0 { 1.0 } else { 0.0 })),
        };
        let (out, attn) = multi_head_attention(&mut tape, x, w, 1, heads).unwrap();
        for &a in tape.value(attn).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        // with W_o = I each head output is the column mean of x W_v
        let xv = {
            let xd = tape.value(x).data();
            let mut xv = vec![0.0; t * e];
            for i in 0..t {
                for j in 0..e {
                    xv[i * e + j] = (0..e).map(|k| xd[i * e + k] * wv_t.data()[k * e + j]).sum();
                }
            }
            xv
        };
        for j in 0..e {
            let mean = (0..t).map(|i| xv[i * e + j]).sum::<f64>() / t as f64;
            for i in 0..t {
                assert!((tape.value(out).data()[i * e + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_matches_scalar_loop() {
        let mut r = StdRng::seed_from_u64(6);
        let (t, e) = (3usize, 4usize);
        let rand_mat = |r: &mut StdRng, rows, cols| Tensor::<f64>::from_fn([rows, cols], |_| r.random_range(-1.0..1.0));
        let x = rand_mat(&mut r, t, e);
        let (wq, wk, wv, wo) =
            (rand_mat(&mut r, e, e), rand_mat(&mut r, e, e), rand_mat(&mut r, e, e), rand_mat(&mut r, e, e));
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let w = AttentionWeights {
            w_q: tape.constant(wq.clone()),
            w_k: tape.constant(wk.clone()),
            w_v: tape.constant(wv.clone()),
            w_o: tape.constant(wo.clone()),
        };
        let (out, _) = multi_head_attention(&mut tape, xv, w, 1, 1).unwrap();

        let at = |m: &Tensor<f64>, i: usize, j: usize| m.data()[i * m.shape()[1] + j];
        let proj = |w: &Tensor<f64>| -> Vec<Vec<f64>> {
            (0..t).map(|i| (0..e).map(|j| (0..e).map(|k| at(&x, i, k) * at(w, k, j)).sum()).collect()).collect()
        };
        let (q, k, v) = (proj(&wq), proj(&wk), proj(&wv));
        for i in 0..t {
            let logits: Vec<f64> =
                (0..t).map(|j| (0..e).map(|d| q[i][d] * k[j][d]).sum::<f64>() / (e as f64).sqrt()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let ctx: Vec<f64> = (0..e).map(|d| (0..t).map(|j| logits[j].exp() / z * v[j][d]).sum()).collect();
            for j in 0..e {
                let expected: f64 = (0..e).map(|d| ctx[d] * at(&wo, d, j)).sum();
                assert!((tape.value(out).data()[i * e + j] - expected).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn training_loss_gradient_matches_finite_differences() {
        let config = ViTConfig {
            image_size: 8,
            patch_size: 2,
            embed_dim: 16,
            layers: 2,
            heads: 2,
            mlp_dim: 32,
            num_classes: 4,
            dropout: 0.0,
        };
        let mut model = ViTModel::<f64>::init(config, 11).unwrap();
        // spread weights so gradients are not vanishingly small
        let mut r = StdRng::seed_from_u64(12);
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        let images = random_images(2, 8, 13);
        let targets = [1usize, 3];
        let loss_of = |m: &ViTModel<f64>| {
            let mut tape = Tape::new();
            let out = m.forward_on_tape(&mut tape, patchify(&images, 2).unwrap(), 2, None).unwrap();
            let loss = tape.cross_entropy_smoothed(out.logits, &targets, &[0.0, 0.1]).unwrap();
            (tape, out, loss)
        };
        let (mut tape, out, loss) = loss_of(&model);
        tape.backward(loss).unwrap();
        let h = 1e-4;
        for trial in 0..20 {
            let p = r.random_range(0..model.params().len());
            let j = r.random_range(0..model.params()[p].numel());
            let analytic = tape.grad(out.params[p]).unwrap()[j];
            let mut plus = model.clone();
            plus.params_mut()[p].data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut()[p].data_mut()[j] -= h;
            let (tp, _, lp) = loss_of(&plus);
            let (tm, _, lm) = loss_of(&minus);
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel <= 1e-3 || (analytic - numeric).abs() < 1e-9,
                "trial {trial} {} [{j}]: {analytic} vs {numeric}",
                model.param_names()[p]
            );
        }
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let t = Tensor::<f32>::new([2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.5, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
