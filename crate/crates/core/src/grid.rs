//! Experiment grids: the grid file format, the resumable runner and the
//! results CSV.
//!
//! A grid file is line-oriented `key = value` text with `[section]`
//! headers. `#` starts a comment. Lists are comma-separated.
//!
//! ```text
//! [grid]
//! output = results/smoke
//! models = vit-b8, tiny
//! noise_rates = 0.0, 0.4, 0.8
//! strategies = random, entropy, gci_vital
//! seeds = 0, 1
//!
//! [dataset]
//! kind = synth
//! per_class = 1000
//! test_per_class = 200
//!
//! [dal]
//! rounds = 4
//!
//! [model.tiny]
//! base = vit-b8
//! embed_dim = 16
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{CentroidTarget, GciConfig, Strategy};
use crate::dataset::{load_cifar_binary, synth_blobs_split, CifarVariant, ImageDataset, SynthConfig};
use crate::engine::{run_dal_with, DalConfig, RoundRecord};
use crate::error::{Error, Result};
use crate::rng;
use crate::vit::{TrainConfig, ViTConfig};

/// Environment variable overriding the number of concurrent runs.
pub const WORKERS_ENV: &str = "NOISY_DAL_WORKERS";

pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "runs.jsonl";
pub const RUNS_DIR: &str = "runs";

/// Fixed column order of `results.csv`.
pub const RESULT_COLUMNS: [&str; 11] = [
    "run_id",
    "model",
    "strategy",
    "noise_rate",
    "round",
    "labeled_fraction",
    "top1",
    "brier",
    "seconds",
    "epochs",
    "seed",
];

/// Columns that hold wall-clock measurements.
pub const TIMING_COLUMNS: [&str; 1] = ["seconds"];

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Section {
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    let mut names = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| Error::Parse { line, message: format!("malformed section header '{content}'") })?;
            if !names.insert(name.to_string()) {
                return Err(Error::Parse { line, message: format!("section [{name}] appears twice") });
            }
            sections.push(Section { name: name.to_string(), line, entries: Vec::new() });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Parse { line, message: format!("expected 'key = value', found '{content}'") })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse { line, message: "empty key".into() });
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| Error::Parse { line, message: format!("'{key}' appears before any [section]") })?;
        if section.entries.iter().any(|e| e.key == key) {
            return Err(Error::Parse { line, message: format!("key '{key}' repeated in [{}]", section.name) });
        }
        section.entries.push(Entry { key: key.to_string(), value: value.trim().to_string(), line });
    }
    Ok(sections)
}

impl Section {
    fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !allowed.contains(&e.key.as_str())) {
            Some(e) => Err(Error::Parse {
                line: e.line,
                message: format!(
                    "unknown key '{}' in [{}] (expected one of: {})",
                    e.key,
                    self.name,
                    allowed.join(", ")
                ),
            }),
            None => Ok(()),
        }
    }

    fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.entry(key)
            .map(|e| {
                e.value.parse::<T>().map_err(|err| Error::Parse {
                    line: e.line,
                    message: format!("bad value '{}' for '{key}': {err}", e.value),
                })
            })
            .transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.entry(key) else { return Ok(None) };
        let items = e
            .value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|err| Error::Parse { line: e.line, message: format!("bad item '{s}' in '{key}': {err}") })
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(Error::Parse { line: e.line, message: format!("'{key}' is an empty list") });
        }
        Ok(Some(items))
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }
}

/// Where a grid's train and test images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Synth {
        config: SynthConfig,
        test_per_class: usize,
    },
    Cifar {
        variant: CifarVariant,
        train: Vec<PathBuf>,
        test: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synth { config, .. } => config.num_classes,
            DatasetSpec::Cifar { variant, .. } => variant.num_classes(),
        }
    }

    pub fn side(&self) -> usize {
        match self {
            DatasetSpec::Synth { config, .. } => config.side,
            DatasetSpec::Cifar { .. } => 32,
        }
    }

    /// Training-set size, checking that referenced files exist.
    pub fn train_len(&self) -> Result<usize> {
        match self {
            DatasetSpec::Synth { config, .. } => Ok(config.per_class * config.num_classes),
            DatasetSpec::Cifar { variant, train, test, train_limit, .. } => {
                let mut total = 0;
                for p in train {
                    let bytes = fs::metadata(p).map_err(|e| Error::path(p, e))?.len() as usize;
                    total += bytes / variant.record_len();
                }
                fs::metadata(test).map_err(|e| Error::path(test, e))?;
                Ok(train_limit.map_or(total, |l| l.min(total)))
            }
        }
    }

    pub fn load(&self) -> Result<(ImageDataset, ImageDataset)> {
        match self {
            DatasetSpec::Synth { config, test_per_class } => synth_blobs_split(config, *test_per_class),
            DatasetSpec::Cifar { variant, train, test, train_limit, test_limit } => {
                let parts = train.iter().map(|p| load_cifar_binary(p, *variant)).collect::<Result<Vec<_>>>()?;
                let train = limit(ImageDataset::concat("cifar-train", &parts)?, *train_limit)?;
                let test = limit(load_cifar_binary(test, *variant)?, *test_limit)?;
                Ok((train, test))
            }
        }
    }
}

fn limit(ds: ImageDataset, n: Option<usize>) -> Result<ImageDataset> {
    match n {
        Some(n) if n < ds.len() => {
            let name = ds.name().to_string();
            ds.subset(&(0..n).collect::<Vec<_>>(), name)
        }
        _ => Ok(ds),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub id: String,
    pub config: ViTConfig,
}

/// A parsed grid file: the Cartesian product of models, noise rates,
/// strategies and seeds over one shared DAL template.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub name: String,
    pub output: PathBuf,
    pub models: Vec<ModelSpec>,
    pub noise_rates: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub workers: Option<usize>,
    pub dataset: DatasetSpec,
    /// Shared settings; strategy, noise, model and seed are filled per run.
    pub template: DalConfig,
}

/// One cell of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub run_id: String,
    pub model: ModelSpec,
    pub strategy: Strategy,
    pub noise_rate: f64,
    pub seed: u64,
}

const GRID_KEYS: &[&str] = &["name", "output", "models", "noise_rates", "strategies", "seeds", "workers"];
const SYNTH_KEYS: &[&str] = &["kind", "classes", "per_class", "test_per_class", "side", "sigma", "seed"];
const CIFAR_KEYS: &[&str] = &["kind", "train", "test", "train_limit", "test_limit"];
const DAL_KEYS: &[&str] = &["seed_size", "round_budget", "rounds", "reinit_each_round"];
const TRAIN_KEYS: &[&str] =
    &["max_epochs", "patience", "batch_size", "learning_rate", "val_fraction", "augment", "eval_batch_size"];
const GCI_KEYS: &[&str] = &["distance_weight", "target", "smoothing"];
const MODEL_KEYS: &[&str] = &["base", "patch_size", "embed_dim", "layers", "heads", "mlp_dim", "dropout"];

impl ExperimentGrid {
    /// Reads a grid file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut grid = Self::parse(&text, base)?;
        if grid.name.is_empty() {
            grid.name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid").to_string();
        }
        Ok(grid)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let sections = parse_sections(text)?;
        let find = |name: &str| sections.iter().find(|s| s.name == name);
        for s in &sections {
            let known = matches!(s.name.as_str(), "grid" | "dataset" | "dal" | "train" | "gci")
                || s.name.strip_prefix("model.").is_some_and(|n| !n.is_empty());
            if !known {
                return Err(Error::Parse { line: s.line, message: format!("unknown section [{}]", s.name) });
            }
        }
        let grid = find("grid").ok_or(Error::Parse { line: 1, message: "missing [grid] section".into() })?;
        grid.check_keys(GRID_KEYS)?;
        let required = |key: &str| Error::Parse { line: grid.line, message: format!("[grid] needs '{key}'") };

        let dataset = match find("dataset") {
            Some(s) => parse_dataset(s, base_dir)?,
            None => DatasetSpec::Synth { config: SynthConfig::default(), test_per_class: 200 },
        };
        let classes = dataset.num_classes();

        let mut customs = BTreeMap::new();
        for s in sections.iter().filter(|s| s.name.starts_with("model.")) {
            let id = &s.name["model.".len()..];
            customs.insert(id.to_string(), parse_model(s, id, classes, dataset.side())?);
        }
        let model_entry = grid.entry("models").ok_or_else(|| required("models"))?;
        let models = grid
            .list::<String>("models")?
            .unwrap_or_default()
            .into_iter()
            .map(|id| {
                if let Some(config) = customs.get(&id) {
                    return Ok(ModelSpec { id, config: config.clone() });
                }
                let mut config = ViTConfig::preset(&id, classes).ok_or_else(|| Error::Parse {
                    line: model_entry.line,
                    message: format!("'{id}' is neither a preset nor a [model.{id}] section"),
                })?;
                config.image_size = dataset.side();
                Ok(ModelSpec { id, config })
            })
            .collect::<Result<Vec<_>>>()?;

        let noise_rates = grid.list::<f64>("noise_rates")?.ok_or_else(|| required("noise_rates"))?;
        let strategies = grid.list::<Strategy>("strategies")?.ok_or_else(|| required("strategies"))?;
        let seeds = grid.list::<u64>("seeds")?.unwrap_or_else(|| vec![0]);
        let output = grid.get::<String>("output")?.ok_or_else(|| required("output"))?;

        let mut template = DalConfig::preset("vit-b8", classes)?;
        if let Some(s) = find("dal") {
            s.check_keys(DAL_KEYS)?;
            s.set("seed_size", &mut template.seed_size)?;
            s.set("round_budget", &mut template.round_budget)?;
            s.set("rounds", &mut template.rounds)?;
            s.set("reinit_each_round", &mut template.reinit_each_round)?;
        }
        if let Some(s) = find("train") {
            s.check_keys(TRAIN_KEYS)?;
            let t: &mut TrainConfig = &mut template.train;
            s.set("max_epochs", &mut t.max_epochs)?;
            s.set("patience", &mut t.patience)?;
            s.set("batch_size", &mut t.batch_size)?;
            s.set("learning_rate", &mut t.learning_rate)?;
            s.set("val_fraction", &mut t.val_fraction)?;
            s.set("augment", &mut t.augment)?;
            s.set("eval_batch_size", &mut t.eval_batch_size)?;
        }
        if let Some(s) = find("gci") {
            s.check_keys(GCI_KEYS)?;
            let g: &mut GciConfig = &mut template.gci;
            s.set("distance_weight", &mut g.distance_weight)?;
            s.set::<CentroidTarget>("target", &mut g.target)?;
            s.set("smoothing", &mut g.smoothing)?;
        }

        let out = Self {
            name: grid.get("name")?.unwrap_or_default(),
            output: base_dir.join(output),
            models,
            noise_rates,
            strategies,
            seeds,
            workers: grid.get("workers")?,
            dataset,
            template,
        };
        out.check_shape(grid.line)?;
        Ok(out)
    }

    fn check_shape(&self, line: usize) -> Result<()> {
        let dup = |what: &str| Error::Parse { line, message: format!("duplicate entry in '{what}'") };
        let ids: HashSet<_> = self.models.iter().map(|m| &m.id).collect();
        if ids.len() != self.models.len() {
            return Err(dup("models"));
        }
        let rates: HashSet<_> = self.noise_rates.iter().map(|r| r.to_bits()).collect();
        if rates.len() != self.noise_rates.len() {
            return Err(dup("noise_rates"));
        }
        if self.strategies.iter().collect::<HashSet<_>>().len() != self.strategies.len() {
            return Err(dup("strategies"));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(dup("seeds"));
        }
        if self.workers == Some(0) {
            return Err(Error::Parse { line, message: "workers must be at least 1".into() });
        }
        Ok(())
    }

    /// Every cell in a fixed order: model, noise rate, strategy, seed.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for model in &self.models {
            for &noise_rate in &self.noise_rates {
                for &strategy in &self.strategies {
                    for &seed in &self.seeds {
                        out.push(RunSpec {
                            run_id: run_id(&model.id, strategy, noise_rate, seed),
                            model: model.clone(),
                            strategy,
                            noise_rate,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    /// Full configuration of one run.
    pub fn dal_config(&self, run: &RunSpec) -> DalConfig {
        DalConfig {
            strategy: run.strategy,
            noise_rate: run.noise_rate,
            model: run.model.id.clone(),
            vit: run.model.config.clone(),
            master_seed: rng::derive_seed(run.seed, rng::label_hash(&run.run_id)),
            ..self.template.clone()
        }
    }

    /// Semantic checks beyond parsing: dataset files exist and every run's
    /// configuration is valid for the training-set size.
    pub fn validate(&self) -> Result<()> {
        let train_len = self.dataset.train_len()?;
        for run in self.runs() {
            self.dal_config(&run).validate(train_len).map_err(|e| Error::Config(format!("{}: {e}", run.run_id)))?;
        }
        Ok(())
    }

    fn fingerprint(&self, run: &RunSpec) -> String {
        let text = format!("{:?}|{:?}", self.dataset, self.dal_config(run));
        format!("{:016x}", rng::label_hash(&text))
    }
}

/// Deterministic, filesystem-safe identifier of a grid cell.
pub fn run_id(model: &str, strategy: Strategy, noise_rate: f64, seed: u64) -> String {
    format!("{model}__{strategy}__n{noise_rate:.3}__s{seed}")
}

fn parse_dataset(s: &Section, base: &Path) -> Result<DatasetSpec> {
    let kind: String = s.get("kind")?.unwrap_or_else(|| "synth".into());
    if kind == "synth" {
        s.check_keys(SYNTH_KEYS)?;
        let mut config = SynthConfig::default();
        s.set("classes", &mut config.num_classes)?;
        s.set("per_class", &mut config.per_class)?;
        s.set("side", &mut config.side)?;
        s.set("sigma", &mut config.sigma)?;
        s.set("seed", &mut config.seed)?;
        config.validate().map_err(|e| Error::Parse { line: s.line, message: e.to_string() })?;
        let test_per_class = s.get("test_per_class")?.unwrap_or(200);
        return Ok(DatasetSpec::Synth { config, test_per_class });
    }
    let variant = CifarVariant::from_str(&kind).map_err(|_| Error::Parse {
        line: s.entry("kind").map_or(s.line, |e| e.line),
        message: format!("unknown dataset kind '{kind}' (expected synth, cifar10 or cifar100)"),
    })?;
    s.check_keys(CIFAR_KEYS)?;
    let missing = |k: &str| Error::Parse { line: s.line, message: format!("[dataset] needs '{k}'") };
    let train = s.list::<String>("train")?.ok_or_else(|| missing("train"))?.into_iter().map(|p| base.join(p)).collect();
    let test = base.join(s.get::<String>("test")?.ok_or_else(|| missing("test"))?);
    Ok(DatasetSpec::Cifar {
        variant,
        train,
        test,
        train_limit: s.get("train_limit")?,
        test_limit: s.get("test_limit")?,
    })
}

fn parse_model(s: &Section, id: &str, classes: usize, side: usize) -> Result<ViTConfig> {
    s.check_keys(MODEL_KEYS)?;
    let base: String = s.get("base")?.unwrap_or_else(|| "vit-b8".into());
    let mut c = ViTConfig::preset(&base, classes).ok_or_else(|| Error::Parse {
        line: s.entry("base").map_or(s.line, |e| e.line),
        message: format!("unknown base preset '{base}'"),
    })?;
    c.image_size = side;
    s.set("patch_size", &mut c.patch_size)?;
    s.set("embed_dim", &mut c.embed_dim)?;
    s.set("layers", &mut c.layers)?;
    s.set("heads", &mut c.heads)?;
    s.set("mlp_dim", &mut c.mlp_dim)?;
    s.set("dropout", &mut c.dropout)?;
    c.validate().map_err(|e| Error::Parse { line: s.line, message: format!("[model.{id}]: {e}") })?;
    Ok(c)
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub model: String,
    pub strategy: String,
    pub noise_rate: f64,
    pub round: usize,
    pub labeled_fraction: f64,
    pub top1: f64,
    pub brier: f64,
    pub seconds: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl ResultRow {
    pub fn new(run_id: &str, seed: u64, r: &RoundRecord) -> Self {
        Self {
            run_id: run_id.to_string(),
            model: r.model.clone(),
            strategy: r.strategy.to_string(),
            noise_rate: r.noise_rate,
            round: r.round,
            labeled_fraction: r.labeled_fraction,
            top1: r.top1,
            brier: r.brier,
            seconds: r.seconds,
            epochs: r.epochs,
            seed,
        }
    }

    pub fn to_record(&self) -> Result<RoundRecord> {
        Ok(RoundRecord {
            round: self.round,
            labeled: 0,
            labeled_fraction: self.labeled_fraction,
            top1: self.top1,
            brier: self.brier,
            seconds: self.seconds,
            epochs: self.epochs,
            strategy: self.strategy.parse()?,
            noise_rate: self.noise_rate,
            model: self.model.clone(),
            seed: self.seed,
        })
    }
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(RESULT_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Reads a results CSV, rejecting unexpected headers or malformed rows.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = File::open(path).map_err(|e| Error::path(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if headers != RESULT_COLUMNS {
        return Err(Error::Format(format!(
            "{}: expected columns {}, found {}",
            path.display(),
            RESULT_COLUMNS.join(","),
            headers.join(",")
        )));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            let row: ResultRow = row.map_err(|e| Error::Format(format!("{} row {}: {e}", path.display(), i + 2)))?;
            row.strategy
                .parse::<Strategy>()
                .map_err(|e| Error::Format(format!("{} row {}: {e}", path.display(), i + 2)))?;
            Ok(row)
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::path(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::path(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub run_id: String,
    pub fingerprint: String,
    pub rounds: usize,
    pub file: String,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::path(path, e)),
        }
    }

    pub fn store(&self, dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&dir.join(MANIFEST_FILE), &bytes)
    }

    pub fn get(&self, run_id: &str) -> Option<&ManifestEntry> {
        self.runs.iter().find(|e| e.run_id == run_id)
    }

    fn insert(&mut self, entry: ManifestEntry) {
        self.runs.retain(|e| e.run_id != entry.run_id);
        self.runs.push(entry);
        self.runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridSummary {
    pub total: usize,
    pub skipped: usize,
    pub completed: usize,
    pub rows: usize,
}

/// Number of concurrent runs: the environment override, then the grid
/// setting, then the machine's parallelism.
pub fn worker_count(grid: &ExperimentGrid) -> Result<usize> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        };
    }
    Ok(grid.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from)))
}

enum Message {
    Round(usize, RoundRecord),
    Done(usize, Result<Vec<RoundRecord>>, f64),
}

/// Executes every grid cell not already completed in the output directory.
///
/// Completed runs are recorded in `manifest.json` (rewritten atomically per
/// run) with their rows in `runs/<run_id>.csv`; `results.csv` is rebuilt in
/// grid order after each completion and `runs.jsonl` logs every round.
/// `progress` receives one human-readable line per event.
pub fn run_grid(grid: &ExperimentGrid, progress: &(dyn Fn(&str) + Sync)) -> Result<GridSummary> {
    let dir = &grid.output;
    let runs_dir = dir.join(RUNS_DIR);
    fs::create_dir_all(&runs_dir).map_err(|e| Error::path(&runs_dir, e))?;
    let mut manifest = Manifest::load(dir)?;
    remove_orphans(&runs_dir, &manifest)?;

    let runs = grid.runs();
    let mut pending = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        match manifest.get(&run.run_id) {
            Some(e) if e.fingerprint == grid.fingerprint(run) => {}
            Some(_) => {
                return Err(Error::Config(format!(
                    "{} in {} was produced by a different configuration; use a fresh output directory",
                    run.run_id,
                    dir.display()
                )))
            }
            None => pending.push(i),
        }
    }
    let mut summary = GridSummary { total: runs.len(), skipped: runs.len() - pending.len(), ..Default::default() };
    if summary.skipped > 0 {
        progress(&format!("{} of {} runs already complete", summary.skipped, runs.len()));
    }

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(LOG_FILE))
        .map_err(|e| Error::path(dir.join(LOG_FILE), e))?;
    let mut failures: Vec<String> = Vec::new();

    if !pending.is_empty() {
        grid.validate()?;
        let (train, test) = grid.dataset.load()?;
        let workers = worker_count(grid)?.min(pending.len());
        progress(&format!("running {} runs on {workers} worker(s)", pending.len()));
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel::<Message>();
        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, pending, runs, train, test) = (&next, &pending, &runs, &train, &test);
                scope.spawn(move || loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&i) = pending.get(k) else { break };
                    let start = Instant::now();
                    let cfg = grid.dal_config(&runs[i]);
                    let result = run_dal_with(train, test, cfg, |r| {
                        let _ = tx.send(Message::Round(i, r.clone()));
                    });
                    let _ = tx.send(Message::Done(i, result, start.elapsed().as_secs_f64()));
                });
            }
            drop(tx);
            for msg in rx {
                match msg {
                    Message::Round(i, r) => {
                        let run = &runs[i];
                        log_line(&mut log, &round_event(run, &r))?;
                        progress(&format!(
                            "{} round {} labeled {:.3} top1 {:.4} brier {:.4} ({:.1}s)",
                            run.run_id, r.round, r.labeled_fraction, r.top1, r.brier, r.seconds
                        ));
                    }
                    Message::Done(i, Ok(records), secs) => {
                        let run = &runs[i];
                        let rows: Vec<ResultRow> =
                            records.iter().map(|r| ResultRow::new(&run.run_id, run.seed, r)).collect();
                        let file = format!("{RUNS_DIR}/{}.csv", run.run_id);
                        write_results(&dir.join(&file), &rows)?;
                        manifest.insert(ManifestEntry {
                            run_id: run.run_id.clone(),
                            fingerprint: grid.fingerprint(run),
                            rounds: rows.len(),
                            file,
                        });
                        manifest.store(dir)?;
                        summary.completed += 1;
                        log_line(
                            &mut log,
                            &serde_json::json!({
                                "event": "complete", "run_id": run.run_id, "seconds": secs
                            }),
                        )?;
                        rebuild_results(grid, &runs, &manifest)?;
                        progress(&format!("{} complete in {secs:.1}s", run.run_id));
                    }
                    Message::Done(i, Err(e), _) => {
                        let run = &runs[i];
                        log_line(
                            &mut log,
                            &serde_json::json!({
                                "event": "failed", "run_id": run.run_id, "error": e.to_string()
                            }),
                        )?;
                        progress(&format!("{} failed: {e}", run.run_id));
                        failures.push(format!("{}: {e}", run.run_id));
                    }
                }
            }
            Ok(())
        })?;
    }

    summary.rows = rebuild_results(grid, &runs, &manifest)?;
    if let Some(first) = failures.first() {
        return Err(Error::RunsFailed { failed: failures.len(), total: runs.len(), first: first.clone() });
    }
    Ok(summary)
}

fn round_event(run: &RunSpec, r: &RoundRecord) -> serde_json::Value {
    serde_json::json!({
        "event": "round",
        "run_id": run.run_id,
        "model": r.model,
        "strategy": r.strategy.as_str(),
        "noise_rate": r.noise_rate,
        "seed": run.seed,
        "round": r.round,
        "labeled": r.labeled,
        "labeled_fraction": r.labeled_fraction,
        "top1": r.top1,
        "brier": r.brier,
        "seconds": r.seconds,
        "epochs": r.epochs,
    })
}

fn log_line(log: &mut File, value: &serde_json::Value) -> Result<()> {
    let mut line = serde_json::to_string(value)?;
    line.push('\n');
    log.write_all(line.as_bytes())?;
    Ok(())
}

/// Deletes files under `runs/` that no manifest entry accounts for.
fn remove_orphans(runs_dir: &Path, manifest: &Manifest) -> Result<()> {
    let known: HashSet<String> = manifest
        .runs
        .iter()
        .filter_map(|e| Path::new(&e.file).file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect();
    for entry in fs::read_dir(runs_dir).map_err(|e| Error::path(runs_dir, e))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if path.is_file() && !known.contains(&name) {
            fs::remove_file(&path).map_err(|e| Error::path(&path, e))?;
        }
    }
    Ok(())
}

/// Writes `results.csv` from completed run files in grid order and
/// returns the number of data rows.
fn rebuild_results(grid: &ExperimentGrid, runs: &[RunSpec], manifest: &Manifest) -> Result<usize> {
    let mut rows = Vec::new();
    for run in runs {
        if let Some(e) = manifest.get(&run.run_id) {
            rows.extend(read_results(&grid.output.join(&e.file))?);
        }
    }
    write_results(&grid.output.join(RESULTS_FILE), &rows)?;
    Ok(rows.len())
}

/// Human-readable description of what a grid would run.
pub fn describe(grid: &ExperimentGrid) -> String {
    let runs = grid.runs();
    let t = &grid.template;
    let mut s = String::new();
    let _ = writeln!(s, "grid '{}' -> {}", grid.name, grid.output.display());
    let _ = writeln!(
        s,
        "{} models x {} noise rates x {} strategies x {} seeds = {} runs of {} rounds",
        grid.models.len(),
        grid.noise_rates.len(),
        grid.strategies.len(),
        grid.seeds.len(),
        runs.len(),
        t.rounds + 1
    );
    for m in &grid.models {
        let c = &m.config;
        let _ = writeln!(
            s,
            "  {}: P={} E={} L={} H={} MLP={} tokens={} params={}",
            m.id,
            c.patch_size,
            c.embed_dim,
            c.layers,
            c.heads,
            c.mlp_dim,
            c.tokens(),
            c.param_count()
        );
    }
    let _ = writeln!(
        s,
        "seed {} + {} x {} acquired, max {} epochs, batch {}",
        t.seed_size, t.rounds, t.round_budget, t.train.max_epochs, t.train.batch_size
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[grid]\noutput = out\nmodels = vit-b8\nnoise_rates = 0, 0.5\nstrategies = random, entropy\n";

    #[test]
    fn parses_minimal_grid_with_defaults() {
        let g = ExperimentGrid::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(g.output, PathBuf::from("/base/out"));
        assert_eq!(g.noise_rates, vec![0.0, 0.5]);
        assert_eq!(g.seeds, vec![0]);
        assert_eq!(g.runs().len(), 4);
        assert_eq!(g.template.seed_size, 256);
        assert_eq!(g.template.round_budget, 512);
        assert_eq!(g.template.rounds, 8);
    }

    #[test]
    fn run_ids_are_unique_and_stable() {
        let g = ExperimentGrid::parse(MINIMAL, Path::new(".")).unwrap();
        let ids: HashSet<_> = g.runs().into_iter().map(|r| r.run_id).collect();
        assert_eq!(ids.len(), 4);
        assert_eq!(run_id("vit-b8", Strategy::GciVital, 0.3, 2), "vit-b8__gci_vital__n0.300__s2");
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("[grid]\noutput = o\nbogus = 1\n", 3),
            ("[grid]\noutput = o\nmodels = vit-b8\nnoise_rates = x\n", 4),
            ("models = vit-b8\n", 1),
            ("[grid]\n[grid]\n", 2),
            ("[grid]\nno equals sign\n", 2),
            ("[grid]\noutput=o\nmodels=nope\nnoise_rates=0\nstrategies=random\n", 3),
            ("[grid]\noutput=o\nmodels=vit-b8\nnoise_rates=0\nstrategies=random\n[extra]\n", 6),
        ];
        for (text, line) in cases {
            match ExperimentGrid::parse(text, Path::new(".")) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn custom_models_and_sections() {
        let text = "[grid]\noutput=o\nmodels=tiny, vit-l4\nnoise_rates=0.2\nstrategies=gci_vital\nseeds=3,4\n\
                    [dataset]\nkind=synth\nclasses=4\nper_class=10\nside=16\n\
                    [model.tiny]\npatch_size=4\nembed_dim=8\nlayers=1\nheads=2\nmlp_dim=16\n\
                    [train]\nmax_epochs=3\naugment=false\n[gci]\ntarget=nearest\ndistance_weight=0.5\n";
        let g = ExperimentGrid::parse(text, Path::new(".")).unwrap();
        assert_eq!(g.models[0].config.embed_dim, 8);
        assert_eq!(g.models[0].config.image_size, 16);
        assert_eq!(g.models[1].config.num_classes, 4);
        assert_eq!(g.template.train.max_epochs, 3);
        assert!(!g.template.train.augment);
        assert_eq!(g.template.gci.target, CentroidTarget::Nearest);
        assert_eq!(g.runs().len(), 4);
        let a = g.dal_config(&g.runs()[0]);
        let b = g.dal_config(&g.runs()[1]);
        assert_ne!(a.master_seed, b.master_seed);
    }

    #[test]
    fn validate_checks_budget_and_files() {
        let text = "[grid]\noutput=o\nmodels=vit-b8\nnoise_rates=0\nstrategies=random\n\
                    [dataset]\nper_class=10\n[dal]\nseed_size=50\nround_budget=40\nrounds=2\n";
        let g = ExperimentGrid::parse(text, Path::new(".")).unwrap();
        assert!(g.validate().is_err());
        let cifar = "[grid]\noutput=o\nmodels=vit-b8\nnoise_rates=0\nstrategies=random\n\
                     [dataset]\nkind=cifar10\ntrain=missing.bin\ntest=missing_test.bin\n";
        let g = ExperimentGrid::parse(cifar, Path::new("/nonexistent")).unwrap();
        assert!(matches!(g.validate(), Err(Error::Path { .. })));
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let row = ResultRow {
            run_id: "a".into(),
            model: "vit-b8".into(),
            strategy: "entropy".into(),
            noise_rate: 0.3,
            round: 2,
            labeled_fraction: 0.1024,
            top1: 0.75,
            brier: 0.31,
            seconds: 1.5,
            epochs: 7,
            seed: 9,
        };
        write_results(&path, std::slice::from_ref(&row)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&RESULT_COLUMNS.join(",")));
        assert_eq!(read_results(&path).unwrap(), vec![row]);
        fs::write(&path, "run_id,model\nx,y\n").unwrap();
        assert!(matches!(read_results(&path), Err(Error::Format(_))));
    }
}
