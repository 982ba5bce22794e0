//! Flat `key = value` run configuration.
//!
//! Resolution order: preset, then the config file, then `S2WAT_SEED`, then
//! `--key value` flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use s2wat::attention::{AttentionMode, Fusion};
use s2wat::loss::{LossWeights, StyleTaps};
use s2wat::model::ModelConfig;

use crate::failure::Failure;

pub const SEED_ENV: &str = "S2WAT_SEED";

#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    /// Fixed-seed random VGG-shaped network.
    Surrogate { seed: u64 },
    /// Converted VGG19 weights in the layout `[2, 2, 4, 4, 1]`.
    Weights(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lr: f64,
    pub warmup_steps: u64,
    pub iters: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub crop_size: usize,
    pub content_dir: Option<PathBuf>,
    pub style_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub extractor: Extractor,
    pub style_taps: StyleTaps,
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "preset",
    "embed_dim",
    "blocks_per_stage",
    "strip_widths",
    "heads_per_stage",
    "attention",
    "fusion",
    "global_last_block",
    "transfer_depth",
    "transfer_heads",
    "transfer_mlp_ratio",
    "decoder_extra_convs",
    "lambda_content",
    "lambda_style",
    "lambda_id1",
    "lambda_id2",
    "lr",
    "warmup_steps",
    "iters",
    "batch_size",
    "beta1",
    "beta2",
    "adam_eps",
    "crop_size",
    "content_dir",
    "style_dir",
    "out_dir",
    "checkpoint_every",
    "seed",
    "extractor",
    "style_taps",
];

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".into(),
            model: ModelConfig::desk(),
            weights: LossWeights::default(),
            lr: 1e-4,
            warmup_steps: 10,
            iters: 50,
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            crop_size: 32,
            content_dir: None,
            style_dir: None,
            out_dir: PathBuf::from("run"),
            checkpoint_every: 25,
            seed: 0,
            extractor: Extractor::Surrogate { seed: 0 },
            style_taps: StyleTaps::Training,
        }
    }

    /// Full-size architecture with the reference optimisation schedule.
    pub fn full() -> Self {
        RunConfig {
            preset: "default".into(),
            model: ModelConfig::default(),
            warmup_steps: 4000,
            iters: 40000,
            batch_size: 4,
            crop_size: 224,
            checkpoint_every: 5000,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self, Failure> {
        match name {
            "desk" => Ok(Self::desk()),
            "default" => Ok(Self::full()),
            _ => Err(Failure::usage(format!("unknown preset `{name}` (desk, default)"))),
        }
    }

    /// Parses config text on top of its `preset` (desk when absent).
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let pairs = parse_pairs(text)?;
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str())
            .unwrap_or("desk");
        let mut cfg = Self::preset(preset)?;
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::data(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|f| f.context(&path.display().to_string()))
    }

    /// Builds the configuration a command runs with.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[(String, String)]) -> Result<Self, Failure> {
        let preset = overrides.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str());
        let mut cfg = match (file, preset) {
            (Some(_), Some(_)) => {
                return Err(Failure::usage("`--preset` cannot be combined with a config file; set `preset` in the file"))
            }
            (Some(p), None) => Self::load(p)?,
            (None, Some(name)) => Self::preset(name)?,
            (None, None) => Self::desk(),
        };
        if let Some(s) = env_seed {
            cfg.set("seed", s).map_err(|f| f.context(SEED_ENV))?;
        }
        for (k, v) in overrides.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        let bad = |what: &str| Failure::usage(format!("`{key}`: {what}, got `{value}`"));
        let m = &mut self.model;
        match key {
            "preset" => self.preset = value.to_string(),
            "embed_dim" => m.encoder.embed_dim = num(value).ok_or_else(|| bad("expected a positive integer"))?,
            "blocks_per_stage" => m.encoder.blocks_per_stage = triple(value).ok_or_else(|| bad("expected three integers"))?,
            "strip_widths" => m.encoder.strip_widths = triple(value).ok_or_else(|| bad("expected three integers"))?,
            "heads_per_stage" => m.encoder.heads_per_stage = triple(value).ok_or_else(|| bad("expected three integers"))?,
            "attention" => m.encoder.mode = attention_mode(value).ok_or_else(|| {
                bad("expected strips_window, square, shifted_square, horizontal, vertical or global")
            })?,
            "fusion" => {
                m.encoder.fusion = fusion(value).ok_or_else(|| bad("expected attn_merge, attn_merge_softmax, sum or concat"))?
            }
            "global_last_block" => m.encoder.global_last_block = value.parse().map_err(|_| bad("expected true or false"))?,
            "transfer_depth" => m.transfer.depth = value.parse().map_err(|_| bad("expected an integer"))?,
            "transfer_heads" => m.transfer.heads = num(value).ok_or_else(|| bad("expected a positive integer"))?,
            "transfer_mlp_ratio" => m.transfer.mlp_ratio = num(value).ok_or_else(|| bad("expected a positive integer"))?,
            "decoder_extra_convs" => m.decoder_extra_convs = triple(value).ok_or_else(|| bad("expected three integers"))?,
            "lambda_content" => self.weights.content = float(value).ok_or_else(|| bad("expected a number"))?,
            "lambda_style" => self.weights.style = float(value).ok_or_else(|| bad("expected a number"))?,
            "lambda_id1" => self.weights.id1 = float(value).ok_or_else(|| bad("expected a number"))?,
            "lambda_id2" => self.weights.id2 = float(value).ok_or_else(|| bad("expected a number"))?,
            "lr" => self.lr = float(value).ok_or_else(|| bad("expected a number"))?,
            "warmup_steps" => self.warmup_steps = value.parse().map_err(|_| bad("expected an integer"))?,
            "iters" => self.iters = value.parse().map_err(|_| bad("expected an integer"))?,
            "batch_size" => self.batch_size = num(value).ok_or_else(|| bad("expected a positive integer"))?,
            "beta1" => self.beta1 = float(value).ok_or_else(|| bad("expected a number"))?,
            "beta2" => self.beta2 = float(value).ok_or_else(|| bad("expected a number"))?,
            "adam_eps" => self.adam_eps = float(value).ok_or_else(|| bad("expected a number"))?,
            "crop_size" => self.crop_size = num(value).ok_or_else(|| bad("expected a positive integer"))?,
            "content_dir" => self.content_dir = Some(PathBuf::from(value)),
            "style_dir" => self.style_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = value.parse().map_err(|_| bad("expected an integer"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("expected an unsigned integer"))?,
            "extractor" => {
                self.extractor = match value.strip_prefix("surrogate") {
                    Some("") => Extractor::Surrogate { seed: 0 },
                    Some(rest) => Extractor::Surrogate {
                        seed: rest
                            .strip_prefix(':')
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad("expected surrogate, surrogate:SEED or a weights path"))?,
                    },
                    None => Extractor::Weights(PathBuf::from(value)),
                }
            }
            "style_taps" => {
                self.style_taps = match value {
                    "training" => StyleTaps::Training,
                    "metric" => StyleTaps::Metric,
                    _ => return Err(bad("expected training or metric")),
                }
            }
            _ => return Err(Failure::usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.encoder.validate().map_err(Failure::from_core)?;
        self.weights.validate().map_err(Failure::from_core)?;
        if self.model.transfer.heads == 0 || self.model.encoder.out_dim() % self.model.transfer.heads != 0 {
            return Err(Failure::usage(format!(
                "transfer width {} is not divisible by {} heads",
                self.model.encoder.out_dim(),
                self.model.transfer.heads
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Failure::usage(format!("lr must be positive, got {}", self.lr)));
        }
        if self.crop_size < s2wat::loss::MIN_EXTRACT_SIDE {
            return Err(Failure::usage(format!(
                "crop_size {} is below the feature network's minimum {}",
                self.crop_size,
                s2wat::loss::MIN_EXTRACT_SIDE
            )));
        }
        Ok(())
    }

    /// Resolved configuration as parseable text.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let list = |v: &[usize; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values = [
            self.preset.clone(),
            m.encoder.embed_dim.to_string(),
            list(&m.encoder.blocks_per_stage),
            list(&m.encoder.strip_widths),
            list(&m.encoder.heads_per_stage),
            attention_name(m.encoder.mode).into(),
            fusion_name(m.encoder.fusion).into(),
            m.encoder.global_last_block.to_string(),
            m.transfer.depth.to_string(),
            m.transfer.heads.to_string(),
            m.transfer.mlp_ratio.to_string(),
            list(&m.decoder_extra_convs),
            self.weights.content.to_string(),
            self.weights.style.to_string(),
            self.weights.id1.to_string(),
            self.weights.id2.to_string(),
            self.lr.to_string(),
            self.warmup_steps.to_string(),
            self.iters.to_string(),
            self.batch_size.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.adam_eps.to_string(),
            self.crop_size.to_string(),
            path(&self.content_dir),
            path(&self.style_dir),
            self.out_dir.display().to_string(),
            self.checkpoint_every.to_string(),
            self.seed.to_string(),
            match &self.extractor {
                Extractor::Surrogate { seed } => format!("surrogate:{seed}"),
                Extractor::Weights(p) => p.display().to_string(),
            },
            match self.style_taps {
                StyleTaps::Training => "training".into(),
                StyleTaps::Metric => "metric".into(),
            },
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            if !v.is_empty() {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Failure::usage(format!("line {}: unknown config key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num(s: &str) -> Option<usize> {
    s.parse().ok().filter(|&n| n > 0)
}

fn float(s: &str) -> Option<f64> {
    s.parse().ok().filter(|v: &f64| v.is_finite())
}

fn triple(s: &str) -> Option<[usize; 3]> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

pub fn attention_mode(s: &str) -> Option<AttentionMode> {
    Some(match s {
        "strips_window" => AttentionMode::StripsWindow,
        "square" => AttentionMode::Square,
        "shifted_square" => AttentionMode::ShiftedSquare,
        "horizontal" => AttentionMode::Horizontal,
        "vertical" => AttentionMode::Vertical,
        "global" => AttentionMode::Global,
        _ => return None,
    })
}

fn attention_name(m: AttentionMode) -> &'static str {
    match m {
        AttentionMode::StripsWindow => "strips_window",
        AttentionMode::Square => "square",
        AttentionMode::ShiftedSquare => "shifted_square",
        AttentionMode::Horizontal => "horizontal",
        AttentionMode::Vertical => "vertical",
        AttentionMode::Global => "global",
    }
}

pub fn fusion(s: &str) -> Option<Fusion> {
    Some(match s {
        "attn_merge" => Fusion::AttnMerge,
        "attn_merge_softmax" => Fusion::AttnMergeSoftmax,
        "sum" => Fusion::Sum,
        "concat" => Fusion::Concat,
        _ => return None,
    })
}

fn fusion_name(f: Fusion) -> &'static str {
    match f {
        Fusion::AttnMerge => "attn_merge",
        Fusion::AttnMergeSoftmax => "attn_merge_softmax",
        Fusion::Sum => "sum",
        Fusion::Concat => "concat",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrips() {
        let mut cfg = RunConfig::desk();
        cfg.content_dir = Some("data/content".into());
        cfg.model.encoder.fusion = Fusion::Concat;
        cfg.extractor = Extractor::Surrogate { seed: 9 };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::full().to_text()).unwrap(), RunConfig::full());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::parse("lr = 1e-3\nlearning_rate = 2").unwrap_err();
        assert_eq!(e.code(), 1);
        assert!(e.to_string().contains("learning_rate"));
        assert!(RunConfig::parse("embed_dim 3").is_err());
        let mut cfg = RunConfig::desk();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("strip_widths", "1,2").is_err());
    }

    #[test]
    fn precedence_is_file_env_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nseed = 4\niters = 7 # trailing\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), None, &[]).unwrap();
        assert_eq!((cfg.seed, cfg.iters, cfg.preset.as_str()), (4, 7, "desk"));
        let cfg = RunConfig::resolve(Some(&path), Some("11"), &[]).unwrap();
        assert_eq!(cfg.seed, 11);
        let flags = [("seed".to_string(), "12".to_string())];
        assert_eq!(RunConfig::resolve(Some(&path), Some("11"), &flags).unwrap().seed, 12);
        let preset = [("preset".to_string(), "default".to_string())];
        assert_eq!(RunConfig::resolve(None, None, &preset).unwrap().model.encoder.embed_dim, 96);
        assert!(RunConfig::resolve(None, Some("x"), &[]).is_err());
    }

    #[test]
    fn validation_catches_inconsistent_heads() {
        let flags = [("transfer_heads".to_string(), "5".to_string())];
        assert_eq!(RunConfig::resolve(None, None, &flags).unwrap_err().code(), 1);
    }
}
