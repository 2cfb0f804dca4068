//! Declarative run configuration (TOML). Unknown keys are rejected and every
//! key except `data.root` has a default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affordance::AffordanceConfig;
use crate::data::{Setting, SyntheticConfig};
use crate::encoders::{EncoderFamily, EncoderKind, Encoders, LinearPatchEncoder, TokenTextEncoder};
use crate::error::{Result, SeaError};
use crate::losses::LossConfig;
use crate::metrics::MetricConfig;
use crate::model::{CaptionConfig, ModelConfig};
use crate::trainer::TrainConfig;

pub const DATA_ROOT_ENV: &str = "SEA_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub setting: Setting,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualEncoderConfig {
    pub kind: EncoderKind,
    pub dim: usize,
    pub weights: Option<PathBuf>,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Toy,
            dim: 64,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub kind: EncoderKind,
    pub weights: Option<PathBuf>,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Toy,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch: usize,
    /// Canonical (height, width) every image is resized to.
    pub input_size: (usize, usize),
    pub seed: u64,
    pub pure: VisualEncoderConfig,
    pub multimodal: VisualEncoderConfig,
    pub text: TextEncoderConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            input_size: (224, 224),
            seed: 0,
            pure: VisualEncoderConfig::default(),
            multimodal: VisualEncoderConfig::default(),
            text: TextEncoderConfig::default(),
        }
    }
}

fn weights_path(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| SeaError::Config(format!("{key}.weights is required for pretrained encoders")))
}

impl EncoderConfig {
    pub fn build(&self) -> Result<Encoders> {
        if self.patch == 0 {
            return Err(SeaError::Config("encoder.patch must be positive".into()));
        }
        let (h, w) = self.input_size;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(SeaError::Config(format!(
                "encoder.input_size {h}x{w} is not divisible by encoder.patch {}",
                self.patch
            )));
        }
        let visual = |c: &VisualEncoderConfig, family: EncoderFamily, key: &str| -> Result<LinearPatchEncoder> {
            match c.kind {
                EncoderKind::Toy => LinearPatchEncoder::toy(family, c.dim, self.patch, self.input_size, self.seed),
                EncoderKind::Pretrained => LinearPatchEncoder::load(&weights_path(&c.weights, key)?, family),
            }
        };
        let text = match self.text.kind {
            EncoderKind::Toy => TokenTextEncoder::toy(self.multimodal.dim, self.seed)?,
            EncoderKind::Pretrained => TokenTextEncoder::load(&weights_path(&self.text.weights, "encoder.text")?)?,
        };
        let enc = Encoders {
            pure: Box::new(visual(&self.pure, EncoderFamily::PureVisual, "encoder.pure")?),
            multimodal: Box::new(visual(&self.multimodal, EncoderFamily::MultimodalVisual, "encoder.multimodal")?),
            text: Box::new(text),
        };
        enc.validate()?;
        Ok(enc)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub affordance: AffordanceConfig,
    pub train: TrainConfig,
    pub caption: CaptionConfig,
    pub metrics: MetricConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SeaError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SeaError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            SeaError::Config(m) => SeaError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SeaError::Config(e.to_string()))
    }

    /// Checks every section that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        self.affordance.validate()?;
        self.loss.validate()?;
        self.metrics.validate()?;
        self.train.validate()?;
        self.model.pff.validate()?;
        self.model.explain.validate(self.model.pff.model_dim)?;
        Ok(())
    }

    /// `data.root`, falling back to the environment variable.
    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(r) = &self.data.root {
            return Ok(r.clone());
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(SeaError::Config(format!(
                "data.root is not set and {DATA_ROOT_ENV} is empty"
            ))),
        }
    }

    /// First 16 hex digits of sha256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.affordance.beta, 0.5);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nbatch = 4\n"),
            Err(SeaError::Config(_))
        ));
        assert!(RunConfig::from_toml_str("colour = 1\n").is_err());
    }

    #[test]
    fn nested_keys_parse_and_round_trip() {
        let text = r#"
            [data]
            root = "/tmp/sea"
            setting = "unseen"
            [encoder]
            patch = 8
            input_size = [48, 48]
            [encoder.pure]
            dim = 32
            [model.pff]
            layers = 1
            [model.explain]
            variant = "concat_avgpool"
            [loss.weights]
            con = 0.5
            [affordance]
            prompt_style = "template"
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.data.setting, Setting::Unseen);
        assert_eq!(cfg.encoder.input_size, (48, 48));
        assert_eq!(cfg.model.pff.layers, 1);
        assert_eq!(cfg.loss.weights.con, 0.5);
        let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn indivisible_input_size_is_a_config_error() {
        let mut cfg = EncoderConfig::default();
        cfg.input_size = (50, 48);
        cfg.patch = 8;
        assert!(matches!(cfg.build(), Err(SeaError::Config(_))));
    }
}
