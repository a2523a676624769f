//! Design points, single runs and ablation grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::complexity::{config_for, cost_report, CostReport};
use crate::dataset::{generate_synthetic, load_manifest, split_validation, Dataset, MaskSplit, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{confusion, row_normalize, scores, ConfusionMatrix, Scores};
use crate::model::{save_checkpoint, Aggregation, ModelConfig};
use crate::sampler::{Arrangement, Boundary, Normalization, SamplerConfig, WindowShape, WindowSpec};
use crate::tokenizer::TokenMode;
use crate::train::{predict_set, train, PixelSet, TrainConfig, TrainReport};

pub const ARTIFACTS_ENV: &str = "PHENOVIT_ARTIFACTS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Manifest(PathBuf),
    /// A named generator preset and its seed.
    Synthetic { preset: String, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Manifest(path) => load_manifest(path),
            DataSource::Synthetic { preset, seed } => generate_synthetic(&synthetic_preset(preset, *seed)?),
        }
    }
}

pub fn synthetic_preset(name: &str, seed: u64) -> Result<SyntheticSpec> {
    match name {
        "four_class" => Ok(SyntheticSpec::default_four_class(seed)),
        "intensity_pair" => Ok(SyntheticSpec::intensity_pair(seed)),
        other => Err(Error::config(
            "data.synthetic",
            format!("unknown preset `{other}` (expected four_class or intensity_pair)"),
        )),
    }
}

/// One full assignment of the seven design dimensions plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignPoint {
    pub data: DataSource,
    pub validation_fraction: f64,
    pub sampler: SamplerConfig,
    pub token_mode: TokenMode,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub dropout: f64,
    pub use_pos_enc: bool,
    pub aggregation: Aggregation,
    pub train: TrainConfig,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for DesignPoint {
    /// The optimized design on the default synthetic dataset.
    fn default() -> Self {
        let base = ModelConfig::new(1, 1, 1);
        Self {
            data: DataSource::Synthetic { preset: "four_class".into(), seed: 42 },
            validation_fraction: 0.2,
            sampler: SamplerConfig {
                normalization: Normalization::Raw,
                arrangement: Arrangement::Rgbrgb,
                boundary: Boundary::BlackPadding,
                window: WindowSpec { shape: WindowShape::Square, k: 3 },
            },
            token_mode: TokenMode::Temporal,
            d_model: base.d_model,
            layers: base.layers,
            heads: base.heads,
            mlp_width: base.mlp_width,
            dropout: base.dropout,
            use_pos_enc: base.use_pos_enc,
            aggregation: base.aggregation,
            train: TrainConfig::default(),
            seed: 42,
            repeats: 1,
        }
    }
}

fn enum_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        _ => unreachable!("unit enum serializes to a string"),
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|_| Error::config(key, format!("invalid value {v}")))
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64().ok_or_else(|| Error::config(key, format!("expected a non-negative integer, got {v}")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::config(key, format!("expected a number, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::config(key, format!("expected true or false, got {v}")))
}

/// Every key accepted by [`DesignPoint::set`].
pub const KEYS: &[&str] = &[
    "data.manifest",
    "data.synthetic",
    "data.synthetic_seed",
    "data.validation_fraction",
    "sampler.normalization",
    "sampler.arrangement",
    "sampler.boundary",
    "sampler.window",
    "sampler.k",
    "token.mode",
    "model.d_model",
    "model.layers",
    "model.heads",
    "model.mlp_width",
    "model.dropout",
    "model.pos_enc",
    "model.aggregation",
    "train.epochs",
    "train.lr",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.batch_size",
    "seed",
    "repeats",
];

impl DesignPoint {
    /// Flat dotted-key form; the canonical config echo.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        match &self.data {
            DataSource::Manifest(p) => put("data.manifest", Value::from(p.to_string_lossy().into_owned())),
            DataSource::Synthetic { preset, seed } => {
                put("data.synthetic", Value::from(preset.clone()));
                put("data.synthetic_seed", Value::from(*seed));
            }
        }
        put("data.validation_fraction", Value::from(self.validation_fraction));
        put("sampler.normalization", Value::from(enum_str(&self.sampler.normalization)));
        put("sampler.arrangement", Value::from(enum_str(&self.sampler.arrangement)));
        put("sampler.boundary", Value::from(enum_str(&self.sampler.boundary)));
        put("sampler.window", Value::from(enum_str(&self.sampler.window.shape)));
        put("sampler.k", Value::from(self.sampler.window.k));
        put("token.mode", Value::from(enum_str(&self.token_mode)));
        put("model.d_model", Value::from(self.d_model));
        put("model.layers", Value::from(self.layers));
        put("model.heads", Value::from(self.heads));
        put("model.mlp_width", Value::from(self.mlp_width));
        put("model.dropout", Value::from(self.dropout));
        put("model.pos_enc", Value::from(self.use_pos_enc));
        put("model.aggregation", Value::from(enum_str(&self.aggregation)));
        put("train.epochs", Value::from(self.train.epochs));
        put("train.lr", Value::from(self.train.lr));
        put("train.weight_decay", Value::from(self.train.weight_decay));
        put("train.beta1", Value::from(self.train.beta1));
        put("train.beta2", Value::from(self.train.beta2));
        put("train.adam_eps", Value::from(self.train.adam_eps));
        put("train.batch_size", Value::from(self.train.batch_size));
        put("seed", Value::from(self.seed));
        put("repeats", Value::from(self.repeats));
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("flat config serializes") + "\n"
    }

    /// Applies one dotted key.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "data.manifest" => {
                let p = v.as_str().ok_or_else(|| Error::config(key, "expected a path"))?;
                self.data = DataSource::Manifest(PathBuf::from(p));
            }
            "data.synthetic" => {
                let preset = v.as_str().ok_or_else(|| Error::config(key, "expected a preset name"))?.to_string();
                synthetic_preset(&preset, 0)?;
                let seed = match &self.data {
                    DataSource::Synthetic { seed, .. } => *seed,
                    DataSource::Manifest(_) => 42,
                };
                self.data = DataSource::Synthetic { preset, seed };
            }
            "data.synthetic_seed" => {
                let s = as_u64(key, v)?;
                match &mut self.data {
                    DataSource::Synthetic { seed, .. } => *seed = s,
                    DataSource::Manifest(_) => {
                        return Err(Error::config(key, "only valid with data.synthetic"));
                    }
                }
            }
            "data.validation_fraction" => self.validation_fraction = as_f64(key, v)?,
            "sampler.normalization" => self.sampler.normalization = parse_enum(key, v)?,
            "sampler.arrangement" => self.sampler.arrangement = parse_enum(key, v)?,
            "sampler.boundary" => self.sampler.boundary = parse_enum(key, v)?,
            "sampler.window" => self.sampler.window.shape = parse_enum(key, v)?,
            "sampler.k" => self.sampler.window.k = as_usize(key, v)?,
            "token.mode" => self.token_mode = parse_enum(key, v)?,
            "model.d_model" => self.d_model = as_usize(key, v)?,
            "model.layers" => self.layers = as_usize(key, v)?,
            "model.heads" => self.heads = as_usize(key, v)?,
            "model.mlp_width" => self.mlp_width = as_usize(key, v)?,
            "model.dropout" => self.dropout = as_f64(key, v)?,
            "model.pos_enc" => self.use_pos_enc = as_bool(key, v)?,
            "model.aggregation" => self.aggregation = parse_enum(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.lr" => self.train.lr = as_f64(key, v)?,
            "train.weight_decay" => self.train.weight_decay = as_f64(key, v)?,
            "train.beta1" => self.train.beta1 = as_f64(key, v)?,
            "train.beta2" => self.train.beta2 = as_f64(key, v)?,
            "train.adam_eps" => self.train.adam_eps = as_f64(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "seed" => self.seed = as_u64(key, v)?,
            "repeats" => self.repeats = as_usize(key, v)?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Applies a flag value given as text: JSON literals (numbers, booleans)
    /// are parsed, anything else is taken as a string.
    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::from(raw));
        self.set(key, &v)
    }

    /// Applies a flat JSON object. Keys are applied in a fixed order so that
    /// `data.synthetic` precedes its seed.
    pub fn apply_flat(&mut self, flat: &serde_json::Map<String, Value>) -> Result<()> {
        if let Some(unknown) = flat.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::config(unknown.clone(), "unknown key"));
        }
        for key in KEYS {
            if let Some(v) = flat.get(*key) {
                self.set(key, v)?;
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let obj = value.as_object().ok_or_else(|| Error::config("<config>", "expected a JSON object"))?;
        let mut d = DesignPoint::default();
        d.apply_flat(obj)?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("data.validation_fraction", "must lie in (0, 1)"));
        }
        match self.sampler.window.shape {
            WindowShape::Single if self.sampler.window.k != 1 => {
                return Err(Error::config("sampler.k", "single window requires k = 1"));
            }
            WindowShape::Cross if self.sampler.window.k != 3 => {
                return Err(Error::config("sampler.k", "cross window requires k = 3"));
            }
            WindowShape::Square => {
                WindowSpec::square(self.sampler.window.k)?;
            }
            _ => {}
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be at least 1"));
        }
        self.train.validate()?;
        self.model_config(1, 1).validate()
    }

    /// Switches the window shape, fixing `k` for single and cross windows.
    pub fn with_window(mut self, window: WindowSpec) -> Self {
        self.sampler.window = window;
        self
    }

    pub fn model_config(&self, timestamps: usize, num_classes: usize) -> ModelConfig {
        let base = ModelConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            mlp_width: self.mlp_width,
            dropout: self.dropout,
            use_pos_enc: self.use_pos_enc,
            aggregation: self.aggregation,
            input_scale: match self.sampler.normalization {
                Normalization::Raw => 1.0 / 255.0,
                Normalization::Chromaticity => 1.0,
            },
            ..ModelConfig::new(1, 1, num_classes)
        };
        config_for(&base, timestamps, self.sampler.window, self.token_mode)
    }
}

/// SHA-256 over the dataset's pixels, labels, splits and class names.
pub fn dataset_digest(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update((ds.series.width() as u64).to_le_bytes());
    h.update((ds.series.height() as u64).to_le_bytes());
    for (t, name) in ds.series.timestamps().iter().enumerate() {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(ds.series.frame(t));
    }
    for y in 0..ds.mask.height() {
        for x in 0..ds.mask.width() {
            let label = ds.mask.label(x, y).map_or(u64::MAX, |l| l as u64);
            h.update(label.to_le_bytes());
            h.update([ds.mask.split_at(x, y) as u8]);
        }
    }
    for name in ds.mask.class_names() {
        h.update(name.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Directory name of a run: hash of the config echo and dataset digest.
pub fn run_id(design: &DesignPoint, digest: &str) -> String {
    let mut h = Sha256::new();
    h.update(design.to_json().as_bytes());
    h.update(digest.as_bytes());
    hex::encode(h.finalize())[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub seed: u64,
    pub best_val_accuracy: f64,
    pub test: Scores,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub dataset_digest: String,
    /// Seed of the repeat whose test balanced accuracy is reported.
    pub selected_seed: u64,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub test: Scores,
    pub test_confusion_percent: Vec<Vec<f64>>,
    pub repeats: Vec<RepeatResult>,
    pub params: u64,
    pub flops: u64,
}

pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub report: TrainReport,
    pub confusion: ConfusionMatrix,
    pub cost: CostReport,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains and evaluates `design` on an already loaded dataset, writing all
/// artifacts under `root/<run id>`.
pub fn run_on(design: &DesignPoint, dataset: &Dataset, root: &Path) -> Result<RunOutput> {
    design.validate()?;
    let digest = dataset_digest(dataset);
    let id = run_id(design, &digest);
    let dir = root.join(&id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let train_px = dataset.mask.pixels(MaskSplit::Train);
    let test_px = dataset.mask.pixels(MaskSplit::Test);
    if test_px.is_empty() {
        return Err(Error::Data("dataset has no test pixels".into()));
    }
    let (train_px, val_px) = split_validation(&train_px, design.validation_fraction, design.seed)?;
    let set = |pixels| PixelSet { dataset, pixels, sampler: design.sampler, mode: design.token_mode };
    let (train_set, val_set, test_set) = (set(train_px), set(val_px), set(test_px));
    let model = design.model_config(dataset.series.len(), dataset.mask.num_classes());
    model.validate()?;

    let mut best: Option<(RepeatResult, crate::train::TrainOutcome, ConfusionMatrix)> = None;
    let mut repeats = Vec::with_capacity(design.repeats);
    for r in 0..design.repeats {
        let seed = design.seed + r as u64;
        let cfg = TrainConfig { seed, ..design.train.clone() };
        let outcome = train(&train_set, &val_set, &model, &cfg)?;
        let preds = predict_set(&outcome.params, &test_set)?;
        let cm = confusion(&test_set.labels(), &preds, dataset.mask.class_names().to_vec())?;
        let result = RepeatResult { seed, best_val_accuracy: outcome.report.best_val_accuracy, test: scores(&cm)? };
        repeats.push(result.clone());
        // best of the repeats by test balanced accuracy, earliest on ties
        if best.as_ref().is_none_or(|(b, _, _)| result.test.balanced_accuracy > b.test.balanced_accuracy) {
            best = Some((result, outcome, cm));
        }
    }
    let (chosen, outcome, cm) = best.expect("at least one repeat");
    let cost = cost_report(&model)?;

    let metrics = RunMetrics {
        run_id: id,
        dataset_digest: digest,
        selected_seed: chosen.seed,
        best_epoch: outcome.report.best_epoch,
        best_val_accuracy: chosen.best_val_accuracy,
        test: chosen.test,
        test_confusion_percent: row_normalize(&cm),
        repeats,
        params: cost.params,
        flops: cost.flops,
    };

    write_file(&dir.join("config.json"), design.to_json())?;
    write_file(&dir.join("train_report.json"), serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    write_file(
        &dir.join("timing.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "wall_time_secs": outcome.report.wall_time_secs }))? + "\n",
    )?;
    let lineage = serde_json::json!({
        "init_seed": chosen.seed,
        "split_seed": design.seed,
        "best_epoch": outcome.report.best_epoch,
        "run_id": metrics.run_id,
        "dataset_digest": metrics.dataset_digest,
    });
    save_checkpoint(dir.join("checkpoint.bin"), &outcome.params, &lineage)?;
    let mut csv_buf = Vec::new();
    cm.write_csv(&mut csv_buf)?;
    write_file(&dir.join("confusion.csv"), csv_buf)?;
    write_file(&dir.join("confusion.json"), serde_json::to_string_pretty(&cm)? + "\n")?;
    write_file(&dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
    write_file(&dir.join("cost.json"), serde_json::to_string_pretty(&cost)? + "\n")?;

    Ok(RunOutput { dir, metrics, report: outcome.report, confusion: cm, cost })
}

pub fn run(design: &DesignPoint, root: &Path) -> Result<RunOutput> {
    design.validate()?;
    let dataset = design.data.load()?;
    run_on(design, &dataset, root)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Input24,
    Arch,
    Windows,
}

pub const WINDOW_SWEEP: [usize; 5] = [3, 7, 13, 19, 25];

/// The 24 input settings in table order: normalization, arrangement, window
/// (cross, square) and token mode vary slowest to fastest for settings
/// 1-16; settings 17-24 repeat the pattern with a single-pixel window.
pub fn input24(base: &DesignPoint) -> Vec<DesignPoint> {
    let arch = DesignPoint {
        sampler: SamplerConfig { boundary: Boundary::BlackPadding, ..base.sampler },
        use_pos_enc: true,
        aggregation: Aggregation::Cls,
        ..base.clone()
    };
    let norms = [Normalization::Raw, Normalization::Chromaticity];
    let arrs = [Arrangement::Rgbrgb, Arrangement::Rrggbb];
    let modes = [TokenMode::Temporal, TokenMode::Spatial];
    let square3 = WindowSpec { shape: WindowShape::Square, k: 3 };
    let mut out = Vec::with_capacity(24);
    let mut push = |n, a, w, m| {
        let mut d = arch.clone().with_window(w);
        d.sampler.normalization = n;
        d.sampler.arrangement = a;
        d.token_mode = m;
        out.push(d);
    };
    for n in norms {
        for a in arrs {
            for w in [WindowSpec::cross(), square3] {
                for m in modes {
                    push(n, a, w, m);
                }
            }
        }
    }
    for n in norms {
        for a in arrs {
            for m in modes {
                push(n, a, WindowSpec::single(), m);
            }
        }
    }
    out
}

/// Boundary, positional-encoding and aggregation variants of `winner`.
pub fn arch_rows(winner: &DesignPoint) -> Vec<DesignPoint> {
    let with = |b, pos, agg| DesignPoint {
        sampler: SamplerConfig { boundary: b, ..winner.sampler },
        use_pos_enc: pos,
        aggregation: agg,
        ..winner.clone()
    };
    vec![
        with(Boundary::BlackPadding, true, Aggregation::Cls),
        with(Boundary::RealValue, true, Aggregation::Cls),
        with(Boundary::BlackPadding, false, Aggregation::Cls),
        with(Boundary::BlackPadding, true, Aggregation::Gap),
    ]
}

pub fn window_rows(base: &DesignPoint) -> Vec<DesignPoint> {
    WINDOW_SWEEP
        .iter()
        .map(|&k| base.clone().with_window(WindowSpec { shape: WindowShape::Square, k }))
        .collect()
}

/// One row of a grid summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub setting: usize,
    pub normalization: Normalization,
    pub arrangement: Arrangement,
    pub window: WindowShape,
    pub k: usize,
    pub token: TokenMode,
    pub boundary: Boundary,
    pub pos_enc: bool,
    pub aggregation: Aggregation,
    pub run_id: String,
    pub best_val_accuracy: Option<f64>,
    pub test_balanced_accuracy: Option<f64>,
    pub params: Option<u64>,
    pub flops: Option<u64>,
    pub status: String,
}

impl GridRow {
    fn new(setting: usize, d: &DesignPoint, digest: &str) -> Self {
        Self {
            setting,
            normalization: d.sampler.normalization,
            arrangement: d.sampler.arrangement,
            window: d.sampler.window.shape,
            k: d.sampler.window.k,
            token: d.token_mode,
            boundary: d.sampler.boundary,
            pos_enc: d.use_pos_enc,
            aggregation: d.aggregation,
            run_id: run_id(d, digest),
            best_val_accuracy: None,
            test_balanced_accuracy: None,
            params: None,
            flops: None,
            status: String::new(),
        }
    }
}

/// Loads the metrics of a finished run, if its directory is complete.
fn cached_metrics(root: &Path, id: &str) -> Option<RunMetrics> {
    let text = fs::read_to_string(root.join(id).join("metrics.json")).ok()?;
    serde_json::from_str(&text).ok()
}

/// Runs every design (reusing finished run directories unless `force`) on
/// up to `jobs` threads. Failed cells keep their error in `status`.
pub fn run_cells(designs: &[DesignPoint], dataset: &Dataset, root: &Path, jobs: usize, force: bool) -> Vec<GridRow> {
    let digest = dataset_digest(dataset);
    let rows: Vec<Mutex<GridRow>> =
        designs.iter().enumerate().map(|(i, d)| Mutex::new(GridRow::new(i + 1, d, &digest))).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= designs.len() {
            break;
        }
        let id = rows[i].lock().unwrap().run_id.clone();
        let result = match cached_metrics(root, &id).filter(|_| !force) {
            Some(m) => Ok((m, "cached")),
            None => run_on(&designs[i], dataset, root).map(|o| (o.metrics, "ok")),
        };
        let mut row = rows[i].lock().unwrap();
        match result {
            Ok((m, status)) => {
                row.best_val_accuracy = Some(m.best_val_accuracy);
                row.test_balanced_accuracy = Some(m.test.balanced_accuracy);
                row.params = Some(m.params);
                row.flops = Some(m.flops);
                row.status = status.into();
            }
            Err(e) => row.status = format!("failed: {e}"),
        }
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(worker);
        }
    });
    rows.into_iter().map(|r| r.into_inner().unwrap()).collect()
}

/// Index of the completed row with the highest validation accuracy; the
/// lowest setting number wins ties.
pub fn winner(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(acc) = r.best_val_accuracy {
            if best.is_none_or(|b| acc > rows[b].best_val_accuracy.unwrap()) {
                best = Some(i);
            }
        }
    }
    best
}

pub struct GridOutput {
    pub rows: Vec<GridRow>,
    /// Stage-1 rows consulted to pick the architecture-stage base.
    pub input24_rows: Option<Vec<GridRow>>,
}

pub fn grid(stage: Stage, base: &DesignPoint, root: &Path, jobs: usize, force: bool) -> Result<GridOutput> {
    base.validate()?;
    let dataset = base.data.load()?;
    match stage {
        Stage::Input24 => Ok(GridOutput { rows: run_cells(&input24(base), &dataset, root, jobs, force), input24_rows: None }),
        Stage::Windows => Ok(GridOutput { rows: run_cells(&window_rows(base), &dataset, root, jobs, force), input24_rows: None }),
        Stage::Arch => {
            let cells = input24(base);
            let stage1 = run_cells(&cells, &dataset, root, jobs, force);
            let w = winner(&stage1).ok_or_else(|| Error::Data("no input setting completed; cannot pick a winner".into()))?;
            let rows = run_cells(&arch_rows(&cells[w]), &dataset, root, jobs, force);
            Ok(GridOutput { rows, input24_rows: Some(stage1) })
        }
    }
}

pub fn write_grid_csv<W: std::io::Write>(rows: &[GridRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Published parameter and FLOP figures for the two reference settings
/// (series length, window side): millions of parameters and GFLOPs.
pub const REFERENCE_COSTS: [(usize, usize, f64, f64); 2] = [(13, 13, 1.72, 0.05), (36, 25, 2.07, 0.16)];

pub const REFERENCE_NOTE: &str = "published figure, likely counted in multiply-accumulates; its encoder size is not \
reconstructible from D=256, L=6, mlp=512 and its op convention differs from 2pqr matmul counting";

/// One row of a cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub config_hash: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub k: usize,
    pub tokenization: TokenMode,
    pub tokens: usize,
    pub d_in: usize,
    pub params: u64,
    pub flops: u64,
    pub flops_embedding: u64,
    pub flops_pos_enc: u64,
    pub flops_attention: u64,
    pub flops_mlp: u64,
    pub flops_layer_norm: u64,
    pub flops_aggregation: u64,
    pub flops_head: u64,
    pub non_decreasing: Option<bool>,
    pub reference_params_m: Option<f64>,
    pub reference_gflops: Option<f64>,
    pub note: String,
}

pub fn model_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("model config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
}

/// Cost rows for `base` over `points` of (series length, window).
pub fn cost_rows(base: &ModelConfig, points: &[(usize, WindowSpec)], mode: TokenMode) -> Result<Vec<CostRow>> {
    let mut rows: Vec<CostRow> = Vec::with_capacity(points.len());
    for &(m, window) in points {
        let cfg = config_for(base, m, window, mode);
        let r = cost_report(&cfg)?;
        let reference = REFERENCE_COSTS
            .iter()
            .find(|(rm, rk, _, _)| *rm == m && *rk == window.k && window.shape == WindowShape::Square)
            .filter(|_| mode == TokenMode::Temporal);
        let non_decreasing = rows.last().map(|p| r.params >= p.params && r.flops >= p.flops);
        rows.push(CostRow {
            config_hash: model_hash(&cfg),
            m,
            k: window.k,
            tokenization: mode,
            tokens: cfg.tokens,
            d_in: cfg.d_in,
            params: r.params,
            flops: r.flops,
            flops_embedding: r.component_flops("embedding"),
            flops_pos_enc: r.component_flops("pos_enc"),
            flops_attention: r.component_flops(".attn"),
            flops_mlp: r.component_flops(".mlp"),
            flops_layer_norm: r.component_flops("ln1") + r.component_flops("ln2") + r.component_flops("final_ln"),
            flops_aggregation: r.component_flops("aggregation"),
            flops_head: r.component_flops("head"),
            non_decreasing,
            reference_params_m: reference.map(|r| r.2),
            reference_gflops: reference.map(|r| r.3),
            note: reference.map_or(String::new(), |_| REFERENCE_NOTE.to_string()),
        });
    }
    Ok(rows)
}

pub fn write_cost_csv<W: std::io::Write>(rows: &[CostRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
