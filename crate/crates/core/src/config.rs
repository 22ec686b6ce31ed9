//! Run configuration: model shapes, optimization, data generation and
//! comparison budgets, read from flat `key = value` text.
//!
//! Every key has a fixed type (integer, real, bool, integer list, task-name
//! list or path). Unknown keys, repeated keys and malformed values are all
//! reported together, as are the semantic checks in [`RunConfig::validate`].

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::data::TaskKind;

#[derive(Clone, Debug, PartialEq, Error, Serialize)]
pub enum ConfigError {
    #[error("fusion layer out of range: {layer} not in 1..={layers}")]
    FusionLayerOutOfRange { layer: usize, layers: usize },
    #[error("fusion layer set is empty")]
    EmptyFusionSet,
    #[error("fusion layer {0} listed twice")]
    DuplicateFusionLayer(usize),
    #[error("heads must divide d_h ({d_h} % {heads} != 0)")]
    HeadsMustDivide { d_h: usize, heads: usize },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("hd_mode requires an even d_v, got {0}")]
    HdRequiresEvenDv(usize),
    #[error("projector_layers must be 1 or 2, got {0}")]
    ProjectorLayers(usize),
    #[error("vocabulary too small: tasks need {needed} ids, vocab_size is {have}")]
    VocabularyTooSmall { needed: usize, have: usize },
    #[error("patches must be a perfect square for grid images, got {0}")]
    PatchesNotSquare(usize),
    #[error("max_count {max_count} exceeds the {patches} available cells")]
    MaxCountTooLarge { max_count: usize, patches: usize },
    #[error("num_colors must be at least 2 (background plus one color), got {0}")]
    TooFewColors(usize),
    #[error("num_colors {0} exceeds the palette size {1}")]
    TooManyColors(usize, usize),
    #[error("copy_len {copy_len} does not fit max_text_len {max_text_len}")]
    CopyTooLong { copy_len: usize, max_text_len: usize },
    #[error("task list is empty")]
    NoTasks,
    #[error("{key} must be positive and finite, got {value}")]
    LearningRate { key: &'static str, value: f64 },
    #[error("warmup_ratio must lie in [0, 1), got {0}")]
    WarmupRatio(f64),
    #[error("{key} must be a finite non-negative real, got {value}")]
    NegativeReal { key: &'static str, value: f64 },
    #[error("pretrain_target_acc must lie in [0, 1], got {0}")]
    TargetAccuracy(f64),
    #[error("train seeds [{train_lo}, {train_hi}) overlap eval seeds [{eval_lo}, {eval_hi})")]
    SeedRangesOverlap {
        train_lo: u64,
        train_hi: u64,
        eval_lo: u64,
        eval_hi: u64,
    },
    #[error("{units} units of {per_unit} samples is not a whole number of batches of {batch}")]
    UnitsNotWholeBatches {
        units: usize,
        per_unit: usize,
        batch: usize,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given more than once")]
    DuplicateKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
}

/// Shapes and architectural switches of the decoder and its fusion layers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub d_h: usize,
    /// Visual feature width fed to fusion; in HD mode this is twice the encoder width.
    pub d_v: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub patches: usize,
    pub max_text_len: usize,
    /// 1-based indices of fusion layers.
    pub fusion_layers: Vec<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub hd_mode: bool,
    /// Outside HD mode, feed the penultimate encoder stage instead of the final one.
    pub penultimate_features: bool,
    /// Side length in pixels of one grid cell; a patch has `3 · cell_pixels²` values.
    pub cell_pixels: usize,
    pub projector_layers: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn reference() -> Self {
        Self {
            d_h: 64,
            d_v: 32,
            layers: 4,
            heads: 4,
            vocab_size: 64,
            patches: 16,
            max_text_len: 24,
            fusion_layers: vec![1],
            lora_rank: 4,
            lora_alpha: 8.0,
            hd_mode: false,
            penultimate_features: false,
            cell_pixels: 2,
            projector_layers: 2,
            seed: 13,
        }
    }

    /// The smallest fusion model used for gradient checks.
    pub fn micro() -> Self {
        Self {
            d_h: 8,
            d_v: 4,
            layers: 2,
            heads: 2,
            vocab_size: 16,
            patches: 2,
            max_text_len: 4,
            fusion_layers: vec![1],
            lora_rank: 2,
            lora_alpha: 4.0,
            hd_mode: false,
            penultimate_features: false,
            cell_pixels: 1,
            projector_layers: 2,
            seed: 7,
        }
    }

    /// Whether both configs describe the same base LM architecture.
    pub fn same_base(&self, other: &ModelConfig) -> bool {
        let key = |m: &ModelConfig| (m.d_h, m.layers, m.heads, m.vocab_size, m.patches, m.max_text_len);
        key(self) == key(other)
    }

    pub fn d_head(&self) -> usize {
        self.d_h / self.heads
    }

    /// Output width of one encoder stage.
    pub fn d_enc(&self) -> usize {
        if self.hd_mode {
            self.d_v / 2
        } else {
            self.d_v
        }
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.cell_pixels * self.cell_pixels
    }

    pub fn max_seq_len(&self) -> usize {
        self.patches + self.max_text_len
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn is_fusion_layer(&self, layer: usize) -> bool {
        self.fusion_layers.contains(&layer)
    }

    /// Whether `d_v` sits in the recommended `[d_h/4, d_h]` band.
    pub fn d_v_in_recommended_range(&self) -> bool {
        4 * self.d_v >= self.d_h && self.d_v <= self.d_h
    }

    pub fn validate(&self) -> Result<(), Vec<ConfigError>> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("d_h", self.d_h),
            ("d_v", self.d_v),
            ("layers", self.layers),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("lora_rank", self.lora_rank),
            ("cell_pixels", self.cell_pixels),
        ] {
            if v == 0 {
                errs.push(ConfigError::NonPositive(name));
            }
        }
        if self.fusion_layers.is_empty() {
            errs.push(ConfigError::EmptyFusionSet);
        }
        for (i, &l) in self.fusion_layers.iter().enumerate() {
            if l == 0 || l > self.layers {
                errs.push(ConfigError::FusionLayerOutOfRange {
                    layer: l,
                    layers: self.layers,
                });
            }
            if self.fusion_layers[..i].contains(&l) {
                errs.push(ConfigError::DuplicateFusionLayer(l));
            }
        }
        if self.heads > 0 && !self.d_h.is_multiple_of(self.heads) {
            errs.push(ConfigError::HeadsMustDivide {
                d_h: self.d_h,
                heads: self.heads,
            });
        }
        if self.hd_mode && !self.d_v.is_multiple_of(2) {
            errs.push(ConfigError::HdRequiresEvenDv(self.d_v));
        }
        if !(1..=2).contains(&self.projector_layers) {
            errs.push(ConfigError::ProjectorLayers(self.projector_layers));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha >= 0.0) {
            errs.push(ConfigError::NegativeReal {
                key: "lora_alpha",
                value: self.lora_alpha,
            });
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Linear warmup from zero, then cosine decay to zero at the final step.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub eval_every: usize,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            warmup_ratio: 0.03,
            total_steps: 3000,
            batch_size: 8,
            weight_decay: 0.0,
            grad_clip: 0.0,
            eval_every: 250,
            schedule: Schedule::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub target_accuracy: f64,
    pub copy_len: usize,
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 2e-3,
            target_accuracy: 0.99,
            copy_len: 8,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    pub tasks: Vec<TaskKind>,
    pub num_colors: usize,
    pub max_count: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub pixel_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: vec![TaskKind::Count, TaskKind::Existence],
            num_colors: 4,
            max_count: 3,
            train_size: 24_000,
            eval_size: 400,
            train_seed: 0,
            eval_seed: 1_000_000,
            pixel_noise: 0.02,
        }
    }
}

/// Sample-budget units for the two-pipeline comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareConfig {
    pub align_units: usize,
    pub instruct_units: usize,
    pub samples_per_unit: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            align_units: 558,
            instruct_units: 665,
            samples_per_unit: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub compare: CompareConfig,
    /// Load a pretrained base LM instead of pretraining one.
    pub base_checkpoint: Option<String>,
    /// Model checkpoint evaluated by `eval`.
    pub checkpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::reference(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            data: DataConfig::default(),
            compare: CompareConfig::default(),
            base_checkpoint: None,
            checkpoint: None,
        }
    }
}

/// Every key [`RunConfig`] understands, in serialization order.
pub const KEYS: &[&str] = &[
    "d_h",
    "d_v",
    "layers",
    "heads",
    "vocab_size",
    "patches",
    "max_text_len",
    "fusion_layers",
    "lora_rank",
    "lora_alpha",
    "hd_mode",
    "penultimate_features",
    "cell_pixels",
    "projector_layers",
    "seed",
    "learning_rate",
    "warmup_ratio",
    "total_steps",
    "batch_size",
    "weight_decay",
    "grad_clip",
    "eval_every",
    "pretrain_steps",
    "pretrain_lr",
    "pretrain_target_acc",
    "copy_len",
    "pretrain_eval_every",
    "tasks",
    "num_colors",
    "max_count",
    "train_size",
    "eval_size",
    "train_seed",
    "eval_seed",
    "pixel_noise",
    "align_units",
    "instruct_units",
    "samples_per_unit",
    "base_checkpoint",
    "checkpoint",
];

fn parse_num<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "bool",
        }),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<Vec<T>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| parse_num(key, s.trim(), expected))
        .collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let p = &mut self.pretrain;
        let d = &mut self.data;
        let c = &mut self.compare;
        const INT: &str = "non-negative integer";
        const REAL: &str = "real";
        match key {
            "d_h" => m.d_h = parse_num(key, v, INT)?,
            "d_v" => m.d_v = parse_num(key, v, INT)?,
            "layers" => m.layers = parse_num(key, v, INT)?,
            "heads" => m.heads = parse_num(key, v, INT)?,
            "vocab_size" => m.vocab_size = parse_num(key, v, INT)?,
            "patches" => m.patches = parse_num(key, v, INT)?,
            "max_text_len" => m.max_text_len = parse_num(key, v, INT)?,
            "fusion_layers" => m.fusion_layers = parse_list(key, v, "integer list")?,
            "lora_rank" => m.lora_rank = parse_num(key, v, INT)?,
            "lora_alpha" => m.lora_alpha = parse_num(key, v, REAL)?,
            "hd_mode" => m.hd_mode = parse_bool(key, v)?,
            "penultimate_features" => m.penultimate_features = parse_bool(key, v)?,
            "cell_pixels" => m.cell_pixels = parse_num(key, v, INT)?,
            "projector_layers" => m.projector_layers = parse_num(key, v, INT)?,
            "seed" => m.seed = parse_num(key, v, INT)?,
            "learning_rate" => t.learning_rate = parse_num(key, v, REAL)?,
            "warmup_ratio" => t.warmup_ratio = parse_num(key, v, REAL)?,
            "total_steps" => t.total_steps = parse_num(key, v, INT)?,
            "batch_size" => t.batch_size = parse_num(key, v, INT)?,
            "weight_decay" => t.weight_decay = parse_num(key, v, REAL)?,
            "grad_clip" => t.grad_clip = parse_num(key, v, REAL)?,
            "eval_every" => t.eval_every = parse_num(key, v, INT)?,
            "pretrain_steps" => p.steps = parse_num(key, v, INT)?,
            "pretrain_lr" => p.learning_rate = parse_num(key, v, REAL)?,
            "pretrain_target_acc" => p.target_accuracy = parse_num(key, v, REAL)?,
            "copy_len" => p.copy_len = parse_num(key, v, INT)?,
            "pretrain_eval_every" => p.eval_every = parse_num(key, v, INT)?,
            "tasks" => d.tasks = parse_list(key, v, "task list (count, existence, color, copy)")?,
            "num_colors" => d.num_colors = parse_num(key, v, INT)?,
            "max_count" => d.max_count = parse_num(key, v, INT)?,
            "train_size" => d.train_size = parse_num(key, v, INT)?,
            "eval_size" => d.eval_size = parse_num(key, v, INT)?,
            "train_seed" => d.train_seed = parse_num(key, v, INT)?,
            "eval_seed" => d.eval_seed = parse_num(key, v, INT)?,
            "pixel_noise" => d.pixel_noise = parse_num(key, v, REAL)?,
            "align_units" => c.align_units = parse_num(key, v, INT)?,
            "instruct_units" => c.instruct_units = parse_num(key, v, INT)?,
            "samples_per_unit" => c.samples_per_unit = parse_num(key, v, INT)?,
            "base_checkpoint" => self.base_checkpoint = (!v.is_empty()).then(|| v.to_string()),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| v.to_string()),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Reports every problem found.
    pub fn parse(text: &str) -> Result<Self, Vec<ConfigError>> {
        let mut cfg = RunConfig::default();
        let mut errs = Vec::new();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(ConfigError::Syntax { line: i + 1 });
                continue;
            };
            let k = k.trim();
            if seen.iter().any(|s| s == k) {
                errs.push(ConfigError::DuplicateKey(k.to_string()));
                continue;
            }
            seen.push(k.to_string());
            if let Err(e) = cfg.set(k, v) {
                errs.push(e);
            }
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(errs)
        }
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), Vec<ConfigError>> {
        let mut errs = Vec::new();
        for (i, o) in overrides.iter().enumerate() {
            match o.as_ref().split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        errs.push(e);
                    }
                }
                None => errs.push(ConfigError::Syntax { line: i + 1 }),
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    fn get(&self, key: &str) -> String {
        let (m, t, p, d, c) = (&self.model, &self.train, &self.pretrain, &self.data, &self.compare);
        match key {
            "d_h" => m.d_h.to_string(),
            "d_v" => m.d_v.to_string(),
            "layers" => m.layers.to_string(),
            "heads" => m.heads.to_string(),
            "vocab_size" => m.vocab_size.to_string(),
            "patches" => m.patches.to_string(),
            "max_text_len" => m.max_text_len.to_string(),
            "fusion_layers" => join(&m.fusion_layers),
            "lora_rank" => m.lora_rank.to_string(),
            "lora_alpha" => m.lora_alpha.to_string(),
            "hd_mode" => m.hd_mode.to_string(),
            "penultimate_features" => m.penultimate_features.to_string(),
            "cell_pixels" => m.cell_pixels.to_string(),
            "projector_layers" => m.projector_layers.to_string(),
            "seed" => m.seed.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "warmup_ratio" => t.warmup_ratio.to_string(),
            "total_steps" => t.total_steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "pretrain_steps" => p.steps.to_string(),
            "pretrain_lr" => p.learning_rate.to_string(),
            "pretrain_target_acc" => p.target_accuracy.to_string(),
            "copy_len" => p.copy_len.to_string(),
            "pretrain_eval_every" => p.eval_every.to_string(),
            "tasks" => join(&d.tasks),
            "num_colors" => d.num_colors.to_string(),
            "max_count" => d.max_count.to_string(),
            "train_size" => d.train_size.to_string(),
            "eval_size" => d.eval_size.to_string(),
            "train_seed" => d.train_seed.to_string(),
            "eval_seed" => d.eval_seed.to_string(),
            "pixel_noise" => d.pixel_noise.to_string(),
            "align_units" => c.align_units.to_string(),
            "instruct_units" => c.instruct_units.to_string(),
            "samples_per_unit" => c.samples_per_unit.to_string(),
            "base_checkpoint" => self.base_checkpoint.clone().unwrap_or_default(),
            "checkpoint" => self.checkpoint.clone().unwrap_or_default(),
            _ => unreachable!("unlisted key {key}"),
        }
    }

    /// Serializes every key; `parse(to_text())` reproduces the record exactly.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k)))
            .collect()
    }

    /// Checks every invariant, returning all violations.
    pub fn validate(&self) -> Result<(), Vec<ConfigError>> {
        let mut errs = self.model.validate().err().unwrap_or_default();
        let (m, t, p, d, c) = (&self.model, &self.train, &self.pretrain, &self.data, &self.compare);

        for (key, value) in [("learning_rate", t.learning_rate), ("pretrain_lr", p.learning_rate)] {
            if !(value > 0.0 && value.is_finite()) {
                errs.push(ConfigError::LearningRate { key, value });
            }
        }
        if !(0.0..1.0).contains(&t.warmup_ratio) {
            errs.push(ConfigError::WarmupRatio(t.warmup_ratio));
        }
        for (key, value) in [
            ("weight_decay", t.weight_decay),
            ("grad_clip", t.grad_clip),
            ("pixel_noise", d.pixel_noise),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                errs.push(ConfigError::NegativeReal { key, value });
            }
        }
        if !(0.0..=1.0).contains(&p.target_accuracy) {
            errs.push(ConfigError::TargetAccuracy(p.target_accuracy));
        }
        for (name, v) in [
            ("total_steps", t.total_steps),
            ("batch_size", t.batch_size),
            ("eval_every", t.eval_every),
            ("pretrain_steps", p.steps),
            ("pretrain_eval_every", p.eval_every),
            ("copy_len", p.copy_len),
            ("train_size", d.train_size),
            ("eval_size", d.eval_size),
            ("samples_per_unit", c.samples_per_unit),
        ] {
            if v == 0 {
                errs.push(ConfigError::NonPositive(name));
            }
        }
        if d.tasks.is_empty() {
            errs.push(ConfigError::NoTasks);
        }
        if d.tasks.iter().any(|k| k.needs_image()) {
            let g = (m.patches as f64).sqrt().round() as usize;
            if g * g != m.patches || m.patches == 0 {
                errs.push(ConfigError::PatchesNotSquare(m.patches));
            }
        }
        if d.max_count > m.patches {
            errs.push(ConfigError::MaxCountTooLarge {
                max_count: d.max_count,
                patches: m.patches,
            });
        }
        if d.num_colors < 2 {
            errs.push(ConfigError::TooFewColors(d.num_colors));
        }
        if d.num_colors > crate::data::PALETTE.len() {
            errs.push(ConfigError::TooManyColors(d.num_colors, crate::data::PALETTE.len()));
        }
        let needed = crate::data::Vocab::required_size(m.patches, d.num_colors);
        if needed > m.vocab_size {
            errs.push(ConfigError::VocabularyTooSmall {
                needed,
                have: m.vocab_size,
            });
        }
        if 3 + 2 * p.copy_len > m.max_text_len {
            errs.push(ConfigError::CopyTooLong {
                copy_len: p.copy_len,
                max_text_len: m.max_text_len,
            });
        }
        let (tl, th) = (d.train_seed, d.train_seed.saturating_add(d.train_size as u64));
        let (el, eh) = (d.eval_seed, d.eval_seed.saturating_add(d.eval_size as u64));
        if tl < eh && el < th {
            errs.push(ConfigError::SeedRangesOverlap {
                train_lo: tl,
                train_hi: th,
                eval_lo: el,
                eval_hi: eh,
            });
        }
        if t.batch_size > 0 {
            for units in [c.align_units, c.instruct_units] {
                if (units * c.samples_per_unit) % t.batch_size != 0 {
                    errs.push(ConfigError::UnitsNotWholeBatches {
                        units,
                        per_unit: c.samples_per_unit,
                        batch: t.batch_size,
                    });
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}
