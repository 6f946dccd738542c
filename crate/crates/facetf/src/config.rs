//! Run configuration: a flat `key = value` text format plus named model
//! presets.
//!
//! Every key has a documented default, so a config file only states what
//! differs from the standard recipe. Unknown and duplicate keys are
//! errors; `#` starts a comment. Paths in values resolve against the
//! config file's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cosface::MarginConfig;
use crate::encoder::{ModelConfig, OutputMode};
use crate::error::{Error, Result};
use crate::tensor::Precision;
use crate::tokenizer::{default_padding, PatchConfig};
use crate::trainer::AdamWConfig;

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Procedural identities; fully determined by the run seed.
    Synthetic {
        identities: usize,
        samples_per_identity: usize,
        noise_sigma: f64,
        max_translation: usize,
    },
    /// CSV listing of labeled image files.
    Manifest(PathBuf),
}

/// Everything a training run needs, resolved and validated.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub patch: PatchConfig,
    pub model: ModelConfig,
    pub margin: MarginConfig,
    pub precision: Precision,
    pub data: DataSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub threads: usize,
    pub augment: bool,
    pub stop_at_train_acc: Option<f64>,
    /// Constant-rate alternative to cosine decay: `(epoch, dropped lr)`.
    pub lr_drop: Option<(usize, f64)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            patch: PatchConfig { image_side: 112, channels: 3, patch: 8, stride: 8, padding: 0 },
            model: ModelConfig::new(512, 8, 20, 2048).expect("standard geometry is valid"),
            margin: MarginConfig::default(),
            precision: Precision::F32,
            data: DataSource::Synthetic {
                identities: 8,
                samples_per_identity: 32,
                noise_sigma: 0.1,
                max_translation: 2,
            },
            epochs: 1,
            batch_size: 64,
            warmup_epochs: 1,
            base_lr: 3e-4,
            final_lr: 0.0,
            optimizer: AdamWConfig::default(),
            seed: 0,
            threads: 1,
            augment: true,
            stop_at_train_acc: None,
            lr_drop: None,
        }
    }
}

/// Named configurations of the published models: 20 layers, 8 heads,
/// width 512, MLP 2048 at image side 112, differing only in patch size.
pub fn preset(name: &str) -> Result<RunConfig> {
    let (patch, stride) = match name {
        "vit-p8s8" => (8, 8),
        "vit-p10s8" => (10, 8),
        "vit-p12s8" => (12, 8),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected vit-p8s8, vit-p10s8, or vit-p12s8)"
            )))
        }
    };
    let mut cfg = RunConfig::default();
    cfg.patch =
        PatchConfig::with_default_padding(cfg.patch.image_side, cfg.patch.channels, patch, stride)?;
    Ok(cfg)
}

// ── Parsing ──────────────────────────────────────────────────────────────

const KNOWN_KEYS: &[&str] = &[
    "image_side",
    "channels",
    "patch",
    "stride",
    "padding",
    "dim",
    "heads",
    "depth",
    "mlp_dim",
    "output_mode",
    "qkv_bias",
    "scale",
    "margin",
    "precision",
    "dataset",
    "identities",
    "samples_per_identity",
    "noise_sigma",
    "max_translation",
    "epochs",
    "batch_size",
    "warmup_epochs",
    "base_lr",
    "final_lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "seed",
    "threads",
    "augment",
    "stop_at_train_acc",
    "lr_drop_epoch",
    "lr_drop_lr",
];

struct Raw {
    entries: Vec<(String, String)>,
}

impl Raw {
    fn parse(text: &str) -> Result<Raw> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
            })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            if !seen.insert(key.clone()) {
                return Err(Error::Config(format!("config key `{key}` appears twice")));
            }
            entries.push((key, value));
        }
        Ok(Raw { entries })
    }

    fn take(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` must be a non-negative integer, got `{v}`"))),
        }
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}` must be a number, got `{v}`"))),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config(format!("`{key}` must be true or false, got `{v}`"))),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::parse(&text, &base)
    }

    /// Parses config text; `base_dir` anchors relative paths in values.
    pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig> {
        let raw = Raw::parse(text)?;
        let defaults = RunConfig::default();

        let image_side = raw.usize_or("image_side", defaults.patch.image_side)?;
        let channels = raw.usize_or("channels", defaults.patch.channels)?;
        let patch = raw.usize_or("patch", defaults.patch.patch)?;
        let stride = raw.usize_or("stride", defaults.patch.stride)?;
        let padding = match raw.take("padding") {
            Some(_) => raw.usize_or("padding", 0)?,
            None => default_padding(patch, stride),
        };
        let patch_cfg = PatchConfig::new(image_side, channels, patch, stride, padding)?;

        let model = ModelConfig::new(
            raw.usize_or("dim", defaults.model.dim)?,
            raw.usize_or("heads", defaults.model.heads)?,
            raw.usize_or("depth", defaults.model.depth)?,
            raw.usize_or("mlp_dim", defaults.model.mlp_dim)?,
        )?
        .with_output_mode(match raw.take("output_mode") {
            None => defaults.model.output_mode,
            Some(v) => OutputMode::parse(v)
                .ok_or_else(|| Error::Config(format!("`output_mode` must be class_token or mean_pool, got `{v}`")))?,
        })
        .with_qkv_bias(raw.bool_or("qkv_bias", defaults.model.qkv_bias)?);

        let margin = MarginConfig::new(
            raw.f64_or("scale", defaults.margin.scale)?,
            raw.f64_or("margin", defaults.margin.margin)?,
        )?;

        let precision = match raw.take("precision") {
            None => defaults.precision,
            Some(v) => Precision::parse(v)
                .ok_or_else(|| Error::Config(format!("`precision` must be f32 or f64, got `{v}`")))?,
        };

        let data = match raw.take("dataset") {
            None | Some("synthetic") => DataSource::Synthetic {
                identities: raw.usize_or("identities", 8)?,
                samples_per_identity: raw.usize_or("samples_per_identity", 32)?,
                noise_sigma: raw.f64_or("noise_sigma", 0.1)?,
                max_translation: raw.usize_or("max_translation", 2)?,
            },
            Some(path) => DataSource::Manifest(base_dir.join(path)),
        };

        let stop_at_train_acc = match raw.take("stop_at_train_acc") {
            None => None,
            Some(_) => {
                let v = raw.f64_or("stop_at_train_acc", 0.0)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "`stop_at_train_acc` must lie in [0, 1], got {v}"
                    )));
                }
                Some(v)
            }
        };

        let lr_drop = match (raw.take("lr_drop_epoch"), raw.take("lr_drop_lr")) {
            (None, None) => None,
            (Some(_), Some(_)) => {
                Some((raw.usize_or("lr_drop_epoch", 0)?, raw.f64_or("lr_drop_lr", 0.0)?))
            }
            _ => {
                return Err(Error::Config(
                    "`lr_drop_epoch` and `lr_drop_lr` must be set together".to_string(),
                ))
            }
        };

        Ok(RunConfig {
            patch: patch_cfg,
            model,
            margin,
            precision,
            data,
            epochs: raw.usize_or("epochs", defaults.epochs)?,
            batch_size: raw.usize_or("batch_size", defaults.batch_size)?,
            warmup_epochs: raw.usize_or("warmup_epochs", defaults.warmup_epochs)?,
            base_lr: raw.f64_or("base_lr", defaults.base_lr)?,
            final_lr: raw.f64_or("final_lr", defaults.final_lr)?,
            optimizer: AdamWConfig {
                beta1: raw.f64_or("beta1", defaults.optimizer.beta1)?,
                beta2: raw.f64_or("beta2", defaults.optimizer.beta2)?,
                eps: raw.f64_or("eps", defaults.optimizer.eps)?,
                weight_decay: raw.f64_or("weight_decay", defaults.optimizer.weight_decay)?,
            },
            seed: match raw.take("seed") {
                None => defaults.seed,
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("`seed` must be an integer, got `{v}`")))?,
            },
            threads: raw.usize_or("threads", defaults.threads)?,
            augment: raw.bool_or("augment", defaults.augment)?,
            stop_at_train_acc,
            lr_drop,
        })
    }
}
