//! Run configuration: a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; missing keys keep their defaults. [`RunConfig::to_text`] writes
//! all keys in a fixed order and is the input of [`RunConfig::hash`].

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context::ContextConfig;
use crate::decoder::{KvSource, ModelConfig};
use crate::episode::{EpisodeConfig, Policy};
use crate::geometry::Intrinsics;
use crate::pruner::PruneParams;
use crate::tokenspace::{vocab, ActionScheme};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
}

/// Documented keys, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for worlds; u64"),
    ("world_size", "world side in cells; 12..=96"),
    ("episodes", "number of episodes; 1..=10000"),
    ("policy", "expert | decoder"),
    ("max_steps", "action budget per episode; 1..=10000"),
    ("bench_turns", "turns in the latency benchmark episode; 1..=1000"),
    ("window", "dialogue turns per session; 1..=64"),
    ("memory_frames", "frames sampled into each memory block; 1..=64"),
    ("action_scheme", "symbolic | word | phrase"),
    ("pruning", "true | false"),
    ("stride", "temporal stride K of the pruning periods; >= 1"),
    ("threshold", "frame-drop ratio theta; 0..=1"),
    ("voxel_size", "voxel edge in meters; > 0"),
    ("success_distance", "success radius d_th in meters; > 0"),
    ("latency_prefill", "modeled seconds per prefill token; > 0"),
    ("latency_decode", "modeled seconds per decode token; > 0"),
    ("model_seed", "decoder weight seed; u64"),
    ("model_layers", "decoder layers; 1..=16"),
    ("model_heads", "attention heads; 1..=16"),
    ("model_head_dim", "dimensions per head; 1..=64"),
    ("output_dir", "directory for all outputs"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub world_size: usize,
    pub episodes: usize,
    pub policy: Policy,
    pub max_steps: usize,
    pub bench_turns: usize,
    pub window: usize,
    pub memory_frames: usize,
    pub action_scheme: ActionScheme,
    pub pruning: bool,
    pub stride: usize,
    pub threshold: f64,
    pub voxel_size: f64,
    pub success_distance: f64,
    pub latency_prefill: f64,
    pub latency_decode: f64,
    pub model_seed: u64,
    pub model_layers: usize,
    pub model_heads: usize,
    pub model_head_dim: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world_size: 40,
            episodes: 20,
            policy: Policy::Expert,
            max_steps: 500,
            bench_turns: 24,
            window: 8,
            memory_frames: 8,
            action_scheme: ActionScheme::SymbolicSingle,
            pruning: true,
            stride: 8,
            threshold: 0.1,
            voxel_size: 0.5,
            success_distance: 3.0,
            latency_prefill: 1e-3,
            latency_decode: 5e-3,
            model_seed: 0,
            model_layers: 2,
            model_heads: 4,
            model_head_dim: 8,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| invalid(key, value, e.to_string()))
}

fn ranged(key: &str, value: &str, lo: usize, hi: usize) -> Result<usize, ConfigError> {
    let v: usize = parse(key, value)?;
    if !(lo..=hi).contains(&v) {
        return Err(invalid(key, value, format!("must be in {lo}..={hi}")));
    }
    Ok(v)
}

fn positive(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse(key, value)?;
    if !(v.is_finite() && v > 0.0) {
        return Err(invalid(key, value, "must be a positive number"));
    }
    Ok(v)
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "world_size" => self.world_size = ranged(key, value, 12, 96)?,
            "episodes" => self.episodes = ranged(key, value, 1, 10_000)?,
            "policy" => {
                self.policy = match value {
                    "expert" => Policy::Expert,
                    "decoder" => Policy::Decoder,
                    _ => return Err(invalid(key, value, "expected expert or decoder")),
                }
            }
            "max_steps" => self.max_steps = ranged(key, value, 1, 10_000)?,
            "bench_turns" => self.bench_turns = ranged(key, value, 1, 1000)?,
            "window" => self.window = ranged(key, value, 1, 64)?,
            "memory_frames" => self.memory_frames = ranged(key, value, 1, 64)?,
            "action_scheme" => self.action_scheme = parse(key, value)?,
            "pruning" => self.pruning = parse(key, value)?,
            "stride" => self.stride = ranged(key, value, 1, usize::MAX)?,
            "threshold" => {
                let v: f64 = parse(key, value)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(invalid(key, value, "must be in [0, 1]"));
                }
                self.threshold = v;
            }
            "voxel_size" => self.voxel_size = positive(key, value)?,
            "success_distance" => self.success_distance = positive(key, value)?,
            "latency_prefill" => self.latency_prefill = positive(key, value)?,
            "latency_decode" => self.latency_decode = positive(key, value)?,
            "model_seed" => self.model_seed = parse(key, value)?,
            "model_layers" => self.model_layers = ranged(key, value, 1, 16)?,
            "model_heads" => self.model_heads = ranged(key, value, 1, 16)?,
            "model_head_dim" => self.model_head_dim = ranged(key, value, 1, 64)?,
            "output_dir" => {
                if value.is_empty() {
                    return Err(invalid(key, value, "must not be empty"));
                }
                self.output_dir = PathBuf::from(value)
            }
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.into() })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "world_size" => self.world_size.to_string(),
            "episodes" => self.episodes.to_string(),
            "policy" => match self.policy {
                Policy::Expert => "expert".into(),
                Policy::Decoder => "decoder".into(),
            },
            "max_steps" => self.max_steps.to_string(),
            "bench_turns" => self.bench_turns.to_string(),
            "window" => self.window.to_string(),
            "memory_frames" => self.memory_frames.to_string(),
            "action_scheme" => self.action_scheme.to_string(),
            "pruning" => self.pruning.to_string(),
            "stride" => self.stride.to_string(),
            "threshold" => self.threshold.to_string(),
            "voxel_size" => self.voxel_size.to_string(),
            "success_distance" => self.success_distance.to_string(),
            "latency_prefill" => self.latency_prefill.to_string(),
            "latency_decode" => self.latency_decode.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "model_layers" => self.model_layers.to_string(),
            "model_heads" => self.model_heads.to_string(),
            "model_head_dim" => self.model_head_dim.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("documented key")).unwrap();
        }
        out
    }

    /// Hex sha256 of the canonical text form, excluding `output_dir` so the
    /// same experiment hashes identically wherever it is written.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { output_dir: PathBuf::new(), ..self.clone() }.to_text();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.model_layers,
            heads: self.model_heads,
            head_dim: self.model_head_dim,
            vocab_size: vocab().len(),
            kv_source: KvSource::Embedding,
            seed: self.model_seed,
            ..ModelConfig::toy(self.model_seed)
        }
    }

    pub fn context_config(&self) -> ContextConfig {
        ContextConfig {
            window: self.window,
            memory_frames: self.memory_frames,
            scheme: self.action_scheme,
            pruning: self.pruning.then(|| PruneParams::new(self.stride, self.threshold)),
            voxel_size: self.voxel_size,
            intrinsics: Intrinsics::default(),
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            context: self.context_config(),
            max_steps: self.max_steps,
            max_turns: None,
            allow_stop: true,
            success_distance: self.success_distance,
        }
    }

    /// World seed of episode `i`.
    pub fn episode_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }
}
