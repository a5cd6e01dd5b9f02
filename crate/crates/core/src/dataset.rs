//! Image datasets: CIFAR binary ingestion/export, the synthetic blob
//! generator, training-time augmentation and per-channel normalization.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, StdRng};
use crate::tensor::{Real, Tensor};

/// Per-channel means of CIFAR-10 training pixels (scaled to [0,1]).
pub const CHANNEL_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
/// Per-channel standard deviations paired with [`CHANNEL_MEAN`].
pub const CHANNEL_STD: [f64; 3] = [0.2023, 0.1994, 0.2010];

/// Zero padding applied on each side before the random crop.
pub const CROP_PAD: usize = 4;

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    /// Bytes per record: label byte(s) followed by 3072 channel-planar pixels.
    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

impl FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" => Ok(CifarVariant::Cifar10),
            "cifar100" | "cifar-100" => Ok(CifarVariant::Cifar100),
            other => Err(Error::Input(format!("unknown CIFAR variant '{other}'"))),
        }
    }
}

/// Images stored as bytes `[num, 3, side, side]` with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    name: String,
    side: usize,
    num_classes: usize,
    images: Vec<u8>,
    labels: Vec<usize>,
    coarse_labels: Option<Vec<u8>>,
}

impl ImageDataset {
    pub fn new(
        name: impl Into<String>,
        side: usize,
        num_classes: usize,
        images: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if side == 0 || num_classes == 0 {
            return Err(Error::Input("image side and class count must be positive".into()));
        }
        let per = 3 * side * side;
        if images.len() != labels.len() * per {
            return Err(Error::Input(format!(
                "{} image bytes for {} labels of {per} bytes each",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index { op: "ImageDataset::new", index: bad, bound: num_classes });
        }
        Ok(Self { name: name.into(), side, num_classes, images, labels, coarse_labels: None })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        3 * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn coarse_labels(&self) -> Option<&[u8]> {
        self.coarse_labels.as_deref()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index { op: "subset", index: i, bound: self.len() });
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let coarse_labels = self.coarse_labels.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect());
        Ok(Self { name: name.into(), side: self.side, num_classes: self.num_classes, images, labels, coarse_labels })
    }

    /// Concatenates datasets sharing geometry and class count.
    pub fn concat(name: impl Into<String>, parts: &[ImageDataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut coarse = first.coarse_labels.as_ref().map(|_| Vec::new());
        for p in parts {
            if p.side != first.side || p.num_classes != first.num_classes {
                return Err(Error::Input(format!(
                    "cannot concatenate '{}' with '{}': geometry differs",
                    first.name, p.name
                )));
            }
            images.extend_from_slice(&p.images);
            labels.extend_from_slice(&p.labels);
            match (&mut coarse, &p.coarse_labels) {
                (Some(c), Some(pc)) => c.extend_from_slice(pc),
                _ => coarse = None,
            }
        }
        Ok(Self {
            name: name.into(),
            side: first.side,
            num_classes: first.num_classes,
            images,
            labels,
            coarse_labels: coarse,
        })
    }
}

/// Parses one CIFAR binary batch file. CIFAR-100 records carry a coarse
/// and a fine label; the fine label is used as the class.
pub fn load_cifar_binary(path: impl AsRef<Path>, variant: CifarVariant) -> Result<ImageDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_cifar(&bytes, variant, name)
}

pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, name: impl Into<String>) -> Result<ImageDataset> {
    let record = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::Format(format!(
            "file length {} is not a positive multiple of the {record}-byte record",
            bytes.len()
        )));
    }
    let count = bytes.len() / record;
    let mut images = Vec::with_capacity(count * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(count);
    let mut coarse = Vec::new();
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let fine = rec[variant.label_bytes() - 1] as usize;
        if fine >= variant.num_classes() {
            return Err(Error::Format(format!(
                "record {i}: label {fine} out of range for {} classes",
                variant.num_classes()
            )));
        }
        if variant == CifarVariant::Cifar100 {
            if rec[0] >= 20 {
                return Err(Error::Format(format!("record {i}: coarse label {} out of range", rec[0])));
            }
            coarse.push(rec[0]);
        }
        labels.push(fine);
        images.extend_from_slice(&rec[variant.label_bytes()..]);
    }
    let mut ds = ImageDataset::new(name, CIFAR_SIDE, variant.num_classes(), images, labels)?;
    if variant == CifarVariant::Cifar100 {
        ds.coarse_labels = Some(coarse);
    }
    Ok(ds)
}

/// Serializes a 32x32 dataset in the CIFAR record layout. Missing coarse
/// labels are written as 0.
pub fn encode_cifar(ds: &ImageDataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if ds.side != CIFAR_SIDE {
        return Err(Error::Input(format!("CIFAR records need 32x32 images, got {}", ds.side)));
    }
    if ds.num_classes > variant.num_classes() {
        return Err(Error::Input(format!("{} classes do not fit the {variant:?} label range", ds.num_classes)));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        if variant == CifarVariant::Cifar100 {
            out.push(ds.coarse_labels.as_ref().map_or(0, |c| c[i]));
        }
        out.push(ds.labels[i] as u8);
        out.extend_from_slice(ds.image(i));
    }
    Ok(out)
}

pub fn write_cifar_binary(ds: &ImageDataset, path: impl AsRef<Path>, variant: CifarVariant) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cifar(ds, variant)?).map_err(|e| Error::path(path, e))
}

/// Synthetic "blob" dataset: one random template image per class, each
/// sample the template plus i.i.d. Gaussian pixel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub side: usize,
    /// Pixel noise standard deviation, in 0..255 units.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_classes: 10, per_class: 1000, side: 32, sigma: 8.0, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 || self.side == 0 {
            return Err(Error::Config("synthetic dataset counts must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("blob noise sigma {} must be >= 0", self.sigma)));
        }
        Ok(())
    }
}

const BACKGROUND_BLOBS: usize = 6;
const CLASS_BLOBS: usize = 6;
const CLASS_BLOB_AMPLITUDE: f64 = 32.0;

type Blob = (f64, f64, f64, [f64; 3]);

fn random_blobs(r: &mut StdRng, count: usize, side: usize, amplitude: f64) -> Vec<Blob> {
    let scale = side as f64 / 32.0;
    (0..count)
        .map(|_| {
            let cx = r.random_range(0.0..side as f64);
            let cy = r.random_range(0.0..side as f64);
            let radius = r.random_range(2.0..6.0) * scale;
            let amp = [0; 3].map(|_| r.random_range(-amplitude..amplitude));
            (cx, cy, radius, amp)
        })
        .collect()
}

/// Class templates as floating-point pixels in [0,255]: a background shared
/// by every class plus a few class-specific Gaussian blobs.
pub fn synth_templates(config: &SynthConfig) -> Vec<Vec<f64>> {
    let side = config.side;
    let mut r = rng::stream(config.seed, "template-background");
    let base: Vec<f64> = (0..3).map(|_| r.random_range(96.0..160.0)).collect();
    let background = random_blobs(&mut r, BACKGROUND_BLOBS, side, 64.0);
    (0..config.num_classes)
        .map(|c| {
            let mut r = rng::indexed_stream(config.seed, "template", c as u64);
            let blobs: Vec<Blob> = background
                .iter()
                .copied()
                .chain(random_blobs(&mut r, CLASS_BLOBS, side, CLASS_BLOB_AMPLITUDE))
                .collect();
            let mut img = vec![0.0; 3 * side * side];
            for ch in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        let mut v = base[ch];
                        for &(cx, cy, radius, amp) in &blobs {
                            let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                            v += amp[ch] * (-d2 / (2.0 * radius * radius)).exp();
                        }
                        img[(ch * side + y) * side + x] = v.clamp(0.0, 255.0);
                    }
                }
            }
            img
        })
        .collect()
}

/// Generates `config.per_class` samples per class, classes interleaved
/// (`label(i) == i % num_classes`). Deterministic per seed.
pub fn synth_blobs(config: &SynthConfig) -> Result<ImageDataset> {
    config.validate()?;
    synth_samples(config, &synth_templates(config), "sample", config.per_class, "synthetic")
}

/// Train set of `config.per_class` and test set of `test_per_class`
/// samples per class drawn around the same templates from disjoint noise
/// streams.
pub fn synth_blobs_split(config: &SynthConfig, test_per_class: usize) -> Result<(ImageDataset, ImageDataset)> {
    config.validate()?;
    let templates = synth_templates(config);
    let train = synth_samples(config, &templates, "sample", config.per_class, "synthetic-train")?;
    let test = synth_samples(config, &templates, "test-sample", test_per_class.max(1), "synthetic-test")?;
    Ok((train, test))
}

fn synth_samples(
    config: &SynthConfig,
    templates: &[Vec<f64>],
    stream: &str,
    per_class: usize,
    name: &str,
) -> Result<ImageDataset> {
    let count = per_class * config.num_classes;
    let pixels = 3 * config.side * config.side;
    let noise = Normal::new(0.0, config.sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut images = Vec::with_capacity(count * pixels);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % config.num_classes;
        let mut r = rng::indexed_stream(config.seed, stream, i as u64);
        for &t in &templates[class] {
            let v = if config.sigma > 0.0 { t + noise.sample(&mut r) } else { t };
            images.push(v.round().clamp(0.0, 255.0) as u8);
        }
        labels.push(class);
    }
    ImageDataset::new(name, config.side, config.num_classes, images, labels)
}

/// Crop offsets (in the padded frame, each in `0..=2*CROP_PAD`) and flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub dx: usize,
    pub dy: usize,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { dx: CROP_PAD, dy: CROP_PAD, flip: false };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            dx: rng.random_range(0..=2 * CROP_PAD),
            dy: rng.random_range(0..=2 * CROP_PAD),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Training-time augmentation: zero-pad by [`CROP_PAD`], crop back to
/// `side x side` at a random offset, then mirror horizontally with p = 0.5.
pub fn augment(image: &[u8], side: usize, rng: &mut impl Rng) -> Vec<u8> {
    apply_augmentation(image, side, Augmentation::sample(rng))
}

pub fn apply_augmentation(image: &[u8], side: usize, aug: Augmentation) -> Vec<u8> {
    let mut out = vec![0u8; image.len()];
    for ch in 0..3 {
        for y in 0..side {
            let sy = (y + aug.dy) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= side as isize {
                continue;
            }
            for x in 0..side {
                let sx = (x + aug.dx) as isize - CROP_PAD as isize;
                if sx < 0 || sx >= side as isize {
                    continue;
                }
                let tx = if aug.flip { side - 1 - x } else { x };
                out[(ch * side + y) * side + tx] = image[(ch * side + sy as usize) * side + sx as usize];
            }
        }
    }
    out
}

/// `(pixel / 255 - mean_c) / std_c` per channel, into `out`.
pub fn normalize_into<R: Real>(image: &[u8], out: &mut [R]) {
    let plane = image.len() / 3;
    for (i, (&p, o)) in image.iter().zip(out.iter_mut()).enumerate() {
        let c = i / plane;
        *o = R::lit((p as f64 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c]);
    }
}

pub fn normalize(image: &[u8], side: usize) -> Result<Tensor<f32>> {
    if image.len() != 3 * side * side {
        return Err(Error::shape("normalize", format!("{} bytes for a 3x{side}x{side} image", image.len())));
    }
    let mut data = vec![0.0f32; image.len()];
    normalize_into(image, &mut data);
    Tensor::new([3, side, side], data)
}

/// Inverse of [`normalize`]: pixel values scaled to [0,1].
pub fn denormalize<R: Real>(t: &Tensor<R>) -> Vec<f64> {
    let plane = t.numel() / 3;
    t.data().iter().enumerate().map(|(i, &v)| v.as_f64() * CHANNEL_STD[i / plane] + CHANNEL_MEAN[i / plane]).collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::rng::StdRng;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { num_classes: 4, per_class: 5, side: 32, sigma: 8.0, seed }
    }

    #[test]
    fn cifar10_round_trip_and_stride() {
        let ds = synth_blobs(&small(1)).unwrap();
        let bytes = encode_cifar(&ds, CifarVariant::Cifar10).unwrap();
        assert_eq!(bytes.len(), ds.len() * 3073);
        let back = parse_cifar(&bytes, CifarVariant::Cifar10, "x").unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.images(), ds.images());
        assert_eq!(back.num_classes(), 10);
    }

    #[test]
    fn cifar100_uses_fine_label_and_3074_stride() {
        let mut bytes = Vec::new();
        for i in 0..3u8 {
            bytes.push(i); // coarse
            bytes.push(90 + i); // fine
            bytes.extend(std::iter::repeat_n(i, 3072));
        }
        let ds = parse_cifar(&bytes, CifarVariant::Cifar100, "c100").unwrap();
        assert_eq!(ds.labels(), &[90, 91, 92]);
        assert_eq!(ds.coarse_labels().unwrap(), &[0, 1, 2]);
        assert!(ds.image(2).iter().all(|&p| p == 2));
        assert_eq!(encode_cifar(&ds, CifarVariant::Cifar100).unwrap(), bytes);
    }

    #[test]
    fn truncated_and_out_of_range_files_are_format_errors() {
        let bytes = vec![0u8; 3073 * 2 + 5];
        assert!(matches!(parse_cifar(&bytes, CifarVariant::Cifar10, "t"), Err(Error::Format(_))));
        let mut bytes = vec![0u8; 3073];
        bytes[0] = 10;
        assert!(matches!(parse_cifar(&bytes, CifarVariant::Cifar10, "t"), Err(Error::Format(_))));
        assert!(matches!(parse_cifar(&[], CifarVariant::Cifar10, "t"), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_path_error() {
        let err = load_cifar_binary("/nonexistent/data_batch_1.bin", CifarVariant::Cifar10).unwrap_err();
        assert!(matches!(err, Error::Path { .. }));
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_blobs(&small(9)).unwrap();
        let b = synth_blobs(&small(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![5; 4]);
        let c = synth_blobs(&small(10)).unwrap();
        assert_ne!(a.images(), c.images());
    }

    #[test]
    fn augmentation_keeps_dims_and_flip_is_involution() {
        let ds = synth_blobs(&small(2)).unwrap();
        let img = ds.image(0);
        let mut r = StdRng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(augment(img, 32, &mut r).len(), img.len());
        }
        let flip = Augmentation { flip: true, ..Augmentation::IDENTITY };
        let twice = apply_augmentation(&apply_augmentation(img, 32, flip), 32, flip);
        assert_eq!(twice, img);
        assert_eq!(apply_augmentation(img, 32, Augmentation::IDENTITY), img);
    }

    #[test]
    fn crop_shifts_content() {
        let mut img = vec![0u8; 3 * 32 * 32];
        img[5 * 32 + 7] = 200;
        let shifted = apply_augmentation(&img, 32, Augmentation { dx: CROP_PAD + 2, dy: CROP_PAD - 1, flip: false });
        assert_eq!(shifted[6 * 32 + 5], 200);
    }

    #[test]
    fn flip_rate_is_one_half() {
        let mut r = StdRng::seed_from_u64(42);
        let n = 10_000;
        let flips = (0..n).filter(|_| Augmentation::sample(&mut r).flip).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((flips - n as f64 * 0.5).abs() <= 3.0 * sd, "{flips}");
    }

    #[test]
    fn normalization_constants_and_inverse() {
        let mut img = vec![0u8; 3 * 4 * 4];
        img.iter_mut().enumerate().for_each(|(i, p)| *p = (i * 5) as u8);
        let t = normalize(&img, 4).unwrap();
        assert_eq!(t.shape(), &[3, 4, 4]);
        let back = denormalize(&t);
        for (p, b) in img.iter().zip(back) {
            assert!((*p as f64 / 255.0 - b).abs() < 1e-6);
        }
        let mut black = [0.0f64; 3];
        normalize_into(&[0u8, 0, 0], &mut black);
        for c in 0..3 {
            assert!((black[c] + CHANNEL_MEAN[c] / CHANNEL_STD[c]).abs() < 1e-12);
        }
        assert!(normalize(&img, 5).is_err());
    }

    #[test]
    fn mean_red_pixel_normalizes_to_zero() {
        // 125.307 = 0.4914 * 255 is not a byte; evaluate the affine map directly
        let v = (125.307 / 255.0 - CHANNEL_MEAN[0]) / CHANNEL_STD[0];
        assert!(v.abs() < 1e-5);
    }

    #[test]
    fn nearest_template_separates_classes() {
        let config = SynthConfig { num_classes: 10, per_class: 100, ..SynthConfig::default() };
        let (train, test) = synth_blobs_split(&config, 50).unwrap();
        let n = train.image_len();
        let mut centroids = vec![vec![0.0f64; n]; 10];
        for i in 0..train.len() {
            for (c, &p) in centroids[train.label(i)].iter_mut().zip(train.image(i)) {
                *c += p as f64 / 100.0;
            }
        }
        let correct = (0..test.len())
            .filter(|&i| {
                let img = test.image(i);
                let best = (0..10)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(img).map(|(c, &p)| (c - p as f64).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(img).map(|(c, &p)| (c - p as f64).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == test.label(i)
            })
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.99);
    }
}
