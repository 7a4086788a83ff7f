//! Run configuration: a flat TOML table whose keys mirror [`TrainConfig`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::encoder::EncoderConfig;
use crate::error::{IqaError, Result};
use crate::model::ModelConfig;
use crate::optim::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Fr,
    Nr,
    Uni,
}

impl Mode {
    pub fn has_fr(self) -> bool {
        matches!(self, Mode::Fr | Mode::Uni)
    }

    pub fn has_nr(self) -> bool {
        matches!(self, Mode::Nr | Mode::Uni)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Fr => "fr",
            Mode::Nr => "nr",
            Mode::Uni => "uni",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = IqaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fr" => Ok(Mode::Fr),
            "nr" => Ok(Mode::Nr),
            "uni" => Ok(Mode::Uni),
            other => Err(IqaError::Config(format!(
                "unknown mode {other:?}, expected fr, nr or uni"
            ))),
        }
    }
}

/// Which backbone topology to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Tiny,
    Vgg16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    // encoder
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub max_tokens: usize,
    // quality head
    pub head_hidden: usize,
    pub head_dropout: f64,
    // optimization
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub fr_batch_size: usize,
    pub nr_batch_size: usize,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub seed: u64,
    // data
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub validation_fraction: f64,
    // backbone
    pub backbone: BackboneKind,
    pub backbone_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_weights: Option<PathBuf>,
    // output
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Accept values that differ from the mode's preset (logged as a warning).
    #[serde(default)]
    pub preset_override: bool,
}

/// Every key accepted in a config file.
pub const CONFIG_KEYS: &[&str] = &[
    "mode",
    "layers",
    "dim",
    "heads",
    "mlp_hidden",
    "dropout",
    "max_tokens",
    "head_hidden",
    "head_dropout",
    "optimizer",
    "learning_rate",
    "momentum",
    "fr_batch_size",
    "nr_batch_size",
    "epochs",
    "max_steps",
    "seed",
    "patch_size",
    "patches_per_image",
    "validation_fraction",
    "backbone",
    "backbone_seed",
    "backbone_weights",
    "checkpoint_dir",
    "preset_override",
];

impl TrainConfig {
    /// Preset for `mode`. FR uses the wide encoder with Adam; NR and UNI use
    /// the narrow encoder with SGD + momentum.
    pub fn for_mode(mode: Mode) -> Self {
        let (enc, head_hidden, optimizer, learning_rate) = match mode {
            Mode::Fr => (EncoderConfig::fr_preset(), 1024, OptimizerKind::Adam, 2e-4),
            Mode::Nr | Mode::Uni => (
                EncoderConfig::nr_preset(),
                64,
                OptimizerKind::SgdMomentum,
                0.5e-4,
            ),
        };
        Self {
            mode,
            layers: enc.layers,
            dim: enc.dim,
            heads: enc.heads,
            mlp_hidden: enc.mlp_hidden,
            dropout: enc.dropout,
            max_tokens: enc.max_tokens,
            head_hidden,
            head_dropout: 0.1,
            optimizer,
            learning_rate,
            momentum: 0.9,
            fr_batch_size: 16,
            nr_batch_size: 32,
            epochs: 10,
            max_steps: None,
            seed: 0,
            patch_size: 224,
            patches_per_image: 8,
            validation_fraction: 0.1,
            backbone: BackboneKind::Vgg16,
            backbone_seed: 0,
            backbone_weights: None,
            checkpoint_dir: None,
            preset_override: false,
        }
    }

    /// Parses a TOML file. Keys absent from the file take the preset of the
    /// file's `mode` (which is therefore required).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| IqaError::Config(format!("{e}")))?;
        if let Some(bad) = table.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(IqaError::Config(format!(
                "unknown config key {bad:?}; valid keys: {}",
                CONFIG_KEYS.join(", ")
            )));
        }
        let mode: Mode = table
            .get("mode")
            .and_then(|v| v.as_str())
            .ok_or_else(|| IqaError::Config("config needs a string `mode` key".into()))?
            .parse()?;
        let mut merged = toml::Table::try_from(Self::for_mode(mode))
            .map_err(|e| IqaError::Config(e.to_string()))?;
        merged.extend(table);
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| IqaError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| IqaError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            dropout: self.dropout,
            max_tokens: self.max_tokens,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder(),
            head_hidden: self.head_hidden,
            head_dropout: self.head_dropout,
        }
    }

    /// Checks ranges and that the mode's preset values were not altered.
    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        let preset = Self::for_mode(self.mode);
        let mut drift = Vec::new();
        if self.dim != preset.dim {
            drift.push(format!("dim = {} (expected {})", self.dim, preset.dim));
        }
        if self.heads != preset.heads {
            drift.push(format!(
                "heads = {} (expected {})",
                self.heads, preset.heads
            ));
        }
        if self.mlp_hidden != preset.mlp_hidden {
            drift.push(format!(
                "mlp_hidden = {} (expected {})",
                self.mlp_hidden, preset.mlp_hidden
            ));
        }
        if self.learning_rate != preset.learning_rate {
            drift.push(format!(
                "learning_rate = {} (expected {})",
                self.learning_rate, preset.learning_rate
            ));
        }
        if self.optimizer != preset.optimizer {
            drift.push(format!(
                "optimizer = {} (expected {})",
                self.optimizer, preset.optimizer
            ));
        }
        if self.mode != Mode::Fr {
            if self.momentum != preset.momentum {
                drift.push(format!(
                    "momentum = {} (expected {})",
                    self.momentum, preset.momentum
                ));
            }
            if self.dropout != preset.dropout {
                drift.push(format!(
                    "dropout = {} (expected {})",
                    self.dropout, preset.dropout
                ));
            }
        }
        if !drift.is_empty() {
            if !self.preset_override {
                return Err(IqaError::Config(format!(
                    "mode {} fixes its preset; conflicting values: {} (set preset_override = true to accept)",
                    self.mode,
                    drift.join(", ")
                )));
            }
            log::warn!("mode {} preset overridden: {}", self.mode, drift.join(", "));
        }
        if self.fr_batch_size == 0 || self.nr_batch_size == 0 {
            return Err(IqaError::Config("batch sizes must be positive".into()));
        }
        if self.epochs == 0 || self.max_steps == Some(0) {
            return Err(IqaError::Config(
                "epochs and max_steps must be positive".into(),
            ));
        }
        if self.patches_per_image == 0 || self.patch_size == 0 {
            return Err(IqaError::Config(
                "patch_size and patches_per_image must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(IqaError::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(IqaError::Config(format!(
                "head_dropout {} outside [0, 1)",
                self.head_dropout
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(IqaError::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        match self.backbone {
            BackboneKind::Tiny => BackboneSpec::tiny(),
            BackboneKind::Vgg16 => BackboneSpec::vgg16(),
        }
    }

    /// Loads `backbone_weights` when set, otherwise builds fixed random
    /// weights from `backbone_seed`.
    pub fn build_backbone(&self) -> Result<Backbone> {
        match &self.backbone_weights {
            Some(p) => Backbone::load(p, self.backbone_spec()),
            None => Ok(Backbone::random(self.backbone_spec(), self.backbone_seed)),
        }
    }
}
