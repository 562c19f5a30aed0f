//! Experiment configuration and its `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! placement.video_layers = 3,4
//! heads.cmlm = false
//! ```
//!
//! Every key has a default, unknown keys are rejected, and
//! [`Config::to_text`] writes every key so a snapshot parses back to the same
//! configuration.

use std::fmt;
use std::str::FromStr;

use crate::error::{config, Result};

/// How the two TED-Adapter branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TedMode {
    Parallel,
    Sequential,
    TeOnly,
    TdOnly,
}

impl TedMode {
    pub const ALL: [TedMode; 4] = [TedMode::TeOnly, TedMode::TdOnly, TedMode::Parallel, TedMode::Sequential];

    pub fn as_str(self) -> &'static str {
        match self {
            TedMode::Parallel => "parallel",
            TedMode::Sequential => "sequential",
            TedMode::TeOnly => "te_only",
            TedMode::TdOnly => "td_only",
        }
    }
}

impl FromStr for TedMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "parallel" => TedMode::Parallel,
            "sequential" => TedMode::Sequential,
            "te_only" => TedMode::TeOnly,
            "td_only" => TedMode::TdOnly,
            _ => return Err(format!("expected parallel|sequential|te_only|td_only, got {s:?}")),
        })
    }
}

/// Branch order in sequential mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequentialOrder {
    TeTd,
    TdTe,
}

impl SequentialOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            SequentialOrder::TeTd => "te_td",
            SequentialOrder::TdTe => "td_te",
        }
    }
}

impl FromStr for SequentialOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "te_td" => Ok(SequentialOrder::TeTd),
            "td_te" => Ok(SequentialOrder::TdTe),
            _ => Err(format!("expected te_td|td_te, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(format!("expected adam|sgd, got {s:?}")),
        }
    }
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

/// A set of 1-based layer indices, possibly relative to the layer count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSet {
    All,
    None,
    /// First half of the layers.
    Front,
    /// Second half of the layers.
    Back,
    /// The `k` deepest layers.
    Last(usize),
    List(Vec<usize>),
}

impl LayerSet {
    /// Sorted layer indices for a stack of `layers`; out-of-range indices
    /// are a configuration error.
    pub fn resolve(&self, layers: usize) -> Result<Vec<usize>> {
        let v: Vec<usize> = match self {
            LayerSet::All => (1..=layers).collect(),
            LayerSet::None => Vec::new(),
            LayerSet::Front => (1..=layers / 2).collect(),
            LayerSet::Back => (layers / 2 + 1..=layers).collect(),
            LayerSet::Last(k) => {
                if *k > layers {
                    return Err(config(format!("last:{k} exceeds {layers} layers")));
                }
                (layers - k + 1..=layers).collect()
            }
            LayerSet::List(l) => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                if let Some(bad) = l.iter().find(|&&i| i == 0 || i > layers) {
                    return Err(config(format!("layer index {bad} outside 1..={layers}")));
                }
                l
            }
        };
        Ok(v)
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSet::All => f.write_str("all"),
            LayerSet::None => f.write_str("none"),
            LayerSet::Front => f.write_str("front"),
            LayerSet::Back => f.write_str("back"),
            LayerSet::Last(k) => write!(f, "last:{k}"),
            LayerSet::List(l) => {
                let s: Vec<String> = l.iter().map(|i| i.to_string()).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

impl FromStr for LayerSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => return Ok(LayerSet::All),
            "none" | "" => return Ok(LayerSet::None),
            "front" => return Ok(LayerSet::Front),
            "back" => return Ok(LayerSet::Back),
            _ => {}
        }
        if let Some(k) = s.strip_prefix("last:") {
            return k
                .trim()
                .parse()
                .map(LayerSet::Last)
                .map_err(|_| format!("bad layer count in {s:?}"));
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad layer index {p:?}")))
            .collect::<Result<Vec<_>, _>>()
            .map(LayerSet::List)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_classes: usize,
    pub holdout_classes: usize,
    pub per_class_train: usize,
    pub per_class_val: usize,
    pub per_class_holdout: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub video_layers: usize,
    pub text_layers: usize,
    pub video_width: usize,
    pub text_width: usize,
    pub joint_width: usize,
    pub patch_size: usize,
    pub video_heads: usize,
    pub text_heads: usize,
    pub max_text_len: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub bottleneck_ratio: f64,
    pub text_bottleneck_ratio: f64,
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementConfig {
    pub video_layers: LayerSet,
    pub ted_mode: TedMode,
    pub sequential_order: SequentialOrder,
    pub text_layers: LayerSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub temperature: f64,
    pub train_temperature: bool,
    pub min_temperature: f64,
    pub mask_ratio: f64,
}

/// Per-head switches or weights, in the order contrastive, cmc, cmlm, vc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Heads<T> {
    pub contrastive: T,
    pub cmc: T,
    pub cmlm: T,
    pub vc: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_every: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub placement: PlacementConfig,
    pub decoder: DecoderConfig,
    pub heads: Heads<bool>,
    pub weights: Heads<f64>,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                train_classes: 8,
                holdout_classes: 4,
                per_class_train: 32,
                per_class_val: 8,
                per_class_holdout: 16,
                frames: 8,
                height: 32,
                width: 32,
                noise: 0.2,
            },
            model: ModelConfig {
                video_layers: 4,
                text_layers: 4,
                video_width: 64,
                text_width: 48,
                joint_width: 32,
                patch_size: 8,
                video_heads: 4,
                text_heads: 4,
                max_text_len: 10,
                mlp_ratio: 4,
                init_std: 0.02,
            },
            adapter: AdapterConfig {
                bottleneck_ratio: 0.25,
                text_bottleneck_ratio: 0.25,
                temporal_kernel: 3,
                spatial_kernel: 3,
            },
            placement: PlacementConfig {
                video_layers: LayerSet::All,
                ted_mode: TedMode::Parallel,
                sequential_order: SequentialOrder::TeTd,
                text_layers: LayerSet::Last(1),
            },
            decoder: DecoderConfig {
                temperature: 0.07,
                train_temperature: true,
                min_temperature: 0.01,
                mask_ratio: 0.15,
            },
            heads: Heads {
                contrastive: true,
                cmc: true,
                cmlm: true,
                vc: true,
            },
            weights: Heads {
                contrastive: 1.0,
                cmc: 1.0,
                cmlm: 1.0,
                vc: 1.0,
            },
            train: TrainConfig {
                epochs: 30,
                batch_size: 4,
                learning_rate: 1e-3,
                optimizer: OptimizerKind::Adam,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                eval_every: 5,
                max_steps: 0,
            },
        }
    }
}

/// Every recognised key with a one-line description, in snapshot order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for data generation, initialization, batching and masking"),
    ("data.train_classes", "number of training classes taken from the class catalogue"),
    ("data.holdout_classes", "number of zero-shot classes, disjoint from training classes"),
    ("data.per_class_train", "training clips per class"),
    ("data.per_class_val", "validation clips per training class"),
    ("data.per_class_holdout", "clips per zero-shot class"),
    ("data.frames", "frames per clip (T)"),
    ("data.height", "frame height in pixels (H)"),
    ("data.width", "frame width in pixels (W)"),
    ("data.noise", "std of the per-frame background noise"),
    ("model.video_layers", "video transformer layers (L_v)"),
    ("model.text_layers", "text transformer layers (L_l)"),
    ("model.video_width", "video token width (d_v)"),
    ("model.text_width", "text token width (d_l)"),
    ("model.joint_width", "joint embedding width (d_vl)"),
    ("model.patch_size", "square patch side in pixels (P)"),
    ("model.video_heads", "attention heads in the video tower"),
    ("model.text_heads", "attention heads in the text tower"),
    ("model.max_text_len", "padded token sequence length"),
    ("model.mlp_ratio", "FFN hidden width as a multiple of the token width"),
    ("model.init_std", "std of the Gaussian initialization"),
    ("adapter.bottleneck_ratio", "TED-Adapter bottleneck width as a fraction of d_v"),
    ("adapter.text_bottleneck_ratio", "text adapter bottleneck width as a fraction of d_l"),
    ("adapter.temporal_kernel", "temporal convolution size (odd)"),
    ("adapter.spatial_kernel", "spatial convolution size (odd)"),
    ("placement.video_layers", "layers with a TED-Adapter: all|none|front|back|last:K|i,j,..."),
    ("placement.ted_mode", "TED branch combination: parallel|sequential|te_only|td_only"),
    ("placement.sequential_order", "branch order in sequential mode: te_td|td_te"),
    ("placement.text_layers", "layers with a text adapter: all|none|front|back|last:K|i,j,..."),
    ("decoder.temperature", "initial softmax temperature"),
    ("decoder.train_temperature", "learn the temperature"),
    ("decoder.min_temperature", "lower clamp on the temperature"),
    ("decoder.mask_ratio", "fraction of content tokens masked for the CMLM head"),
    ("heads.contrastive", "enable the contrastive head"),
    ("heads.cmc", "enable the cross-modal classification head"),
    ("heads.cmlm", "enable the cross-modal masked language modeling head"),
    ("heads.vc", "enable the visual classification head"),
    ("weights.contrastive", "loss weight of the contrastive head"),
    ("weights.cmc", "loss weight of the CMC head"),
    ("weights.cmlm", "loss weight of the CMLM head"),
    ("weights.vc", "loss weight of the VC head"),
    ("train.epochs", "passes over the training split"),
    ("train.batch_size", "clips per optimizer step"),
    ("train.learning_rate", "optimizer step size"),
    ("train.optimizer", "adam|sgd"),
    ("train.beta1", "first-moment decay (adam)"),
    ("train.beta2", "second-moment decay (adam)"),
    ("train.eps", "denominator guard (adam)"),
    ("train.eval_every", "evaluate every N epochs"),
    ("train.max_steps", "stop after N optimizer steps (0 = unlimited)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config(format!("invalid value {value:?} for {key}")))
}

fn parse_with<T: FromStr<Err = String>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e| config(format!("{key}: {e}")))
}

impl Config {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.train_classes" => self.data.train_classes = parse(key, v)?,
            "data.holdout_classes" => self.data.holdout_classes = parse(key, v)?,
            "data.per_class_train" => self.data.per_class_train = parse(key, v)?,
            "data.per_class_val" => self.data.per_class_val = parse(key, v)?,
            "data.per_class_holdout" => self.data.per_class_holdout = parse(key, v)?,
            "data.frames" => self.data.frames = parse(key, v)?,
            "data.height" => self.data.height = parse(key, v)?,
            "data.width" => self.data.width = parse(key, v)?,
            "data.noise" => self.data.noise = parse(key, v)?,
            "model.video_layers" => self.model.video_layers = parse(key, v)?,
            "model.text_layers" => self.model.text_layers = parse(key, v)?,
            "model.video_width" => self.model.video_width = parse(key, v)?,
            "model.text_width" => self.model.text_width = parse(key, v)?,
            "model.joint_width" => self.model.joint_width = parse(key, v)?,
            "model.patch_size" => self.model.patch_size = parse(key, v)?,
            "model.video_heads" => self.model.video_heads = parse(key, v)?,
            "model.text_heads" => self.model.text_heads = parse(key, v)?,
            "model.max_text_len" => self.model.max_text_len = parse(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse(key, v)?,
            "model.init_std" => self.model.init_std = parse(key, v)?,
            "adapter.bottleneck_ratio" => self.adapter.bottleneck_ratio = parse(key, v)?,
            "adapter.text_bottleneck_ratio" => self.adapter.text_bottleneck_ratio = parse(key, v)?,
            "adapter.temporal_kernel" => self.adapter.temporal_kernel = parse(key, v)?,
            "adapter.spatial_kernel" => self.adapter.spatial_kernel = parse(key, v)?,
            "placement.video_layers" => self.placement.video_layers = parse_with(key, v)?,
            "placement.ted_mode" => self.placement.ted_mode = parse_with(key, v)?,
            "placement.sequential_order" => self.placement.sequential_order = parse_with(key, v)?,
            "placement.text_layers" => self.placement.text_layers = parse_with(key, v)?,
            "decoder.temperature" => self.decoder.temperature = parse(key, v)?,
            "decoder.train_temperature" => self.decoder.train_temperature = parse(key, v)?,
            "decoder.min_temperature" => self.decoder.min_temperature = parse(key, v)?,
            "decoder.mask_ratio" => self.decoder.mask_ratio = parse(key, v)?,
            "heads.contrastive" => self.heads.contrastive = parse(key, v)?,
            "heads.cmc" => self.heads.cmc = parse(key, v)?,
            "heads.cmlm" => self.heads.cmlm = parse(key, v)?,
            "heads.vc" => self.heads.vc = parse(key, v)?,
            "weights.contrastive" => self.weights.contrastive = parse(key, v)?,
            "weights.cmc" => self.weights.cmc = parse(key, v)?,
            "weights.cmlm" => self.weights.cmlm = parse(key, v)?,
            "weights.vc" => self.weights.vc = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.optimizer" => self.train.optimizer = parse_with(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.max_steps" => self.train.max_steps = parse(key, v)?,
            _ => return Err(config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Textual value of a key, in the form [`Config::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "data.train_classes" => self.data.train_classes.to_string(),
            "data.holdout_classes" => self.data.holdout_classes.to_string(),
            "data.per_class_train" => self.data.per_class_train.to_string(),
            "data.per_class_val" => self.data.per_class_val.to_string(),
            "data.per_class_holdout" => self.data.per_class_holdout.to_string(),
            "data.frames" => self.data.frames.to_string(),
            "data.height" => self.data.height.to_string(),
            "data.width" => self.data.width.to_string(),
            "data.noise" => self.data.noise.to_string(),
            "model.video_layers" => self.model.video_layers.to_string(),
            "model.text_layers" => self.model.text_layers.to_string(),
            "model.video_width" => self.model.video_width.to_string(),
            "model.text_width" => self.model.text_width.to_string(),
            "model.joint_width" => self.model.joint_width.to_string(),
            "model.patch_size" => self.model.patch_size.to_string(),
            "model.video_heads" => self.model.video_heads.to_string(),
            "model.text_heads" => self.model.text_heads.to_string(),
            "model.max_text_len" => self.model.max_text_len.to_string(),
            "model.mlp_ratio" => self.model.mlp_ratio.to_string(),
            "model.init_std" => self.model.init_std.to_string(),
            "adapter.bottleneck_ratio" => self.adapter.bottleneck_ratio.to_string(),
            "adapter.text_bottleneck_ratio" => self.adapter.text_bottleneck_ratio.to_string(),
            "adapter.temporal_kernel" => self.adapter.temporal_kernel.to_string(),
            "adapter.spatial_kernel" => self.adapter.spatial_kernel.to_string(),
            "placement.video_layers" => self.placement.video_layers.to_string(),
            "placement.ted_mode" => self.placement.ted_mode.as_str().to_string(),
            "placement.sequential_order" => self.placement.sequential_order.as_str().to_string(),
            "placement.text_layers" => self.placement.text_layers.to_string(),
            "decoder.temperature" => self.decoder.temperature.to_string(),
            "decoder.train_temperature" => self.decoder.train_temperature.to_string(),
            "decoder.min_temperature" => self.decoder.min_temperature.to_string(),
            "decoder.mask_ratio" => self.decoder.mask_ratio.to_string(),
            "heads.contrastive" => self.heads.contrastive.to_string(),
            "heads.cmc" => self.heads.cmc.to_string(),
            "heads.cmlm" => self.heads.cmlm.to_string(),
            "heads.vc" => self.heads.vc.to_string(),
            "weights.contrastive" => self.weights.contrastive.to_string(),
            "weights.cmc" => self.weights.cmc.to_string(),
            "weights.cmlm" => self.weights.cmlm.to_string(),
            "weights.vc" => self.weights.vc.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.optimizer" => self.train.optimizer.as_str().to_string(),
            "train.beta1" => self.train.beta1.to_string(),
            "train.beta2" => self.train.beta2.to_string(),
            "train.eps" => self.train.eps.to_string(),
            "train.eval_every" => self.train.eval_every.to_string(),
            "train.max_steps" => self.train.max_steps.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Parses config text on top of the defaults. Returns the keys that
    /// were assigned more than once, for the caller to warn about.
    pub fn parse_str(text: &str) -> Result<(Self, Vec<String>)> {
        let mut cfg = Self::default();
        let dups = cfg.apply_str(text)?;
        Ok((cfg, dups))
    }

    /// Applies config text on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<Vec<String>> {
        let mut seen = std::collections::HashSet::new();
        let mut dups = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            self.set(k, v)
                .map_err(|e| config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
            if !seen.insert(k.to_string()) {
                dups.push(k.to_string());
            }
        }
        Ok(dups)
    }

    /// Every key in canonical order, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Checks ranges and cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let d = &self.data;
        let positive = [
            ("data.frames", d.frames),
            ("data.height", d.height),
            ("data.width", d.width),
            ("model.video_layers", m.video_layers),
            ("model.text_layers", m.text_layers),
            ("model.video_width", m.video_width),
            ("model.text_width", m.text_width),
            ("model.joint_width", m.joint_width),
            ("model.patch_size", m.patch_size),
            ("model.video_heads", m.video_heads),
            ("model.text_heads", m.text_heads),
            ("model.mlp_ratio", m.mlp_ratio),
            ("train.batch_size", self.train.batch_size),
            ("train.eval_every", self.train.eval_every),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(config(format!("{k} must be positive")));
            }
        }
        if d.per_class_train == 0 || d.per_class_val == 0 || d.per_class_holdout == 0 {
            return Err(config("per-class clip counts must be at least 1"));
        }
        if !d.height.is_multiple_of(m.patch_size) || !d.width.is_multiple_of(m.patch_size) {
            return Err(config(format!(
                "frame size {}x{} is not divisible by patch size {}",
                d.height, d.width, m.patch_size
            )));
        }
        if !m.video_width.is_multiple_of(m.video_heads) {
            return Err(config("model.video_width must be divisible by model.video_heads"));
        }
        if !m.text_width.is_multiple_of(m.text_heads) {
            return Err(config("model.text_width must be divisible by model.text_heads"));
        }
        if m.max_text_len < 2 {
            return Err(config("model.max_text_len must leave room for SOS and EOS"));
        }
        for (k, v) in [
            ("adapter.temporal_kernel", self.adapter.temporal_kernel),
            ("adapter.spatial_kernel", self.adapter.spatial_kernel),
        ] {
            if v % 2 == 0 {
                return Err(config(format!("{k} must be odd, got {v}")));
            }
        }
        for (k, v) in [
            ("adapter.bottleneck_ratio", self.adapter.bottleneck_ratio),
            ("adapter.text_bottleneck_ratio", self.adapter.text_bottleneck_ratio),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(config(format!("{k} must lie in (0, 1]")));
            }
        }
        if !(m.init_std > 0.0 && m.init_std.is_finite()) {
            return Err(config("model.init_std must be positive"));
        }
        if !(self.decoder.min_temperature > 0.0 && self.decoder.temperature >= self.decoder.min_temperature) {
            return Err(config("temperatures must satisfy 0 < min_temperature <= temperature"));
        }
        if !(0.0..=1.0).contains(&self.decoder.mask_ratio) {
            return Err(config("decoder.mask_ratio must lie in [0, 1]"));
        }
        let w = &self.weights;
        if [w.contrastive, w.cmc, w.cmlm, w.vc].iter().any(|&x| !(x >= 0.0)) {
            return Err(config("head weights must be non-negative"));
        }
        let h = &self.heads;
        if !(h.contrastive || h.cmc || h.cmlm || h.vc) {
            return Err(config("at least one head must be enabled"));
        }
        let t = &self.train;
        if !(t.learning_rate >= 0.0) || !(t.eps > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2)
        {
            return Err(config("optimizer hyperparameters out of range"));
        }
        if h.contrastive && t.batch_size < 2 {
            return Err(config("the contrastive head needs train.batch_size >= 2"));
        }
        if d.train_classes < 2 {
            return Err(config("data.train_classes must be at least 2"));
        }
        self.placement.video_layers.resolve(m.video_layers)?;
        self.placement.text_layers.resolve(m.text_layers)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = Config::default();
        cfg.set("placement.video_layers", "3,4").unwrap();
        cfg.set("decoder.temperature", "0.1").unwrap();
        cfg.set("train.optimizer", "sgd").unwrap();
        let (back, dups) = Config::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(dups.is_empty());
    }

    #[test]
    fn every_key_has_a_value() {
        let cfg = Config::default();
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            let mut c2 = Config::default();
            c2.set(k, &v).unwrap();
            assert_eq!(c2, cfg, "{k}");
        }
    }

    #[test]
    fn unknown_key_is_error() {
        let err = Config::parse_str("model.depth = 3").unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("model.depth"));
    }

    #[test]
    fn comments_and_duplicates() {
        let (cfg, dups) = Config::parse_str("# header\nseed = 3 # inline\n\nseed = 5\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(dups, ["seed"]);
    }

    #[test]
    fn layer_sets_resolve() {
        assert_eq!(LayerSet::Back.resolve(4).unwrap(), [3, 4]);
        assert_eq!(LayerSet::Front.resolve(4).unwrap(), [1, 2]);
        assert_eq!(LayerSet::Last(1).resolve(4).unwrap(), [4]);
        assert!(LayerSet::List(vec![5]).resolve(4).is_err());
        assert!(LayerSet::List(vec![0]).resolve(4).is_err());
        assert_eq!("2, 1".parse::<LayerSet>().unwrap().resolve(4).unwrap(), [1, 2]);
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut cfg = Config::default();
        cfg.adapter.temporal_kernel = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.data.height = 30;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.heads = Heads {
            contrastive: false,
            cmc: false,
            cmlm: false,
            vc: false,
        };
        assert!(cfg.validate().is_err());
        assert!(Config::default().validate().is_ok());
    }
}
