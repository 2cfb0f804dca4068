//! Vision-language localization: cosine between a text prompt and every
//! multimodal patch vector, upsampled to the image, min-max normalized and
//! thresholded.

use serde::{Deserialize, Serialize};

use crate::encoders::{Domain, FeatureMap, FeatureSource, TextEmbedding, TextEncoder};
use crate::error::{Result, SeaError};
use crate::explain::render_caption;
use crate::grid::Grid;
use crate::tensor::{dot, l2_norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Cosines in [-1, 1].
    Raw,
    /// Normalized to [0, 1] with sub-threshold cells zeroed.
    Final,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: Grid,
    pub stage: Stage,
    pub domain: Domain,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    #[default]
    Bilinear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    /// Bare "<action> <object>".
    #[default]
    Pair,
    /// The caption template.
    Template,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffordanceConfig {
    pub beta: f64,
    pub epsilon_norm: f64,
    pub upsample: Upsample,
    pub prompt_style: PromptStyle,
    /// Ground-truth labels build the training prompt instead of predictions.
    pub teacher_forcing: bool,
}

impl Default for AffordanceConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            epsilon_norm: 1e-12,
            upsample: Upsample::Bilinear,
            prompt_style: PromptStyle::Pair,
            teacher_forcing: true,
        }
    }
}

impl AffordanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(SeaError::Config(format!("affordance.beta {} outside [0,1)", self.beta)));
        }
        if !(self.epsilon_norm > 0.0) {
            return Err(SeaError::Config("affordance.epsilon_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn threshold(&self) -> ThresholdConfig {
        ThresholdConfig {
            beta: self.beta,
            upsample: self.upsample,
            epsilon_norm: self.epsilon_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdConfig {
    pub beta: f64,
    pub upsample: Upsample,
    pub epsilon_norm: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        AffordanceConfig::default().threshold()
    }
}

pub fn prompt(action: &str, object: &str, style: PromptStyle, template: &str) -> Result<String> {
    match style {
        PromptStyle::Pair => Ok(format!("{action} {object}")),
        PromptStyle::Template => render_caption(action, object, template),
    }
}

/// Cosine with the convention that a zero vector scores 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        (dot(a, b) / n).clamp(-1.0, 1.0)
    }
}

/// Cosine map at patch resolution.
pub fn similarity_grid(text: &TextEmbedding, feats: &FeatureMap) -> Result<Grid> {
    if feats.dim != text.vector.len() {
        return Err(SeaError::Shape(format!(
            "text dim {} does not match feature dim {}",
            text.vector.len(),
            feats.dim
        )));
    }
    let data = (0..feats.tokens())
        .map(|i| cosine(&text.vector, &feats.data[i * feats.dim..(i + 1) * feats.dim]))
        .collect();
    Grid::new(feats.height, feats.width, data)
}

/// Raw heatmap at `image_size` (height, width).
pub fn similarity_heatmap(
    text: &TextEmbedding,
    feats: &FeatureMap,
    image_size: (usize, usize),
) -> Result<Heatmap> {
    if feats.source != FeatureSource::Multimodal {
        return Err(SeaError::Input("similarity needs multimodal features".into()));
    }
    let grid = similarity_grid(text, feats)?.resize_bilinear(image_size.0, image_size.1);
    Ok(Heatmap {
        grid,
        stage: Stage::Raw,
        domain: feats.domain,
    })
}

/// Min-max normalization followed by zeroing cells below beta. A constant
/// map normalizes to all zeros.
pub fn normalize_and_filter(raw: &Heatmap, cfg: &ThresholdConfig) -> Result<Heatmap> {
    if raw.stage != Stage::Raw {
        return Err(SeaError::Input("heatmap is already final".into()));
    }
    let (lo, hi) = (raw.grid.min(), raw.grid.max());
    let scale = 1.0 / (hi - lo + cfg.epsilon_norm);
    let data = raw
        .grid
        .data()
        .iter()
        .map(|&v| {
            let n = ((v - lo) * scale).clamp(0.0, 1.0);
            if n < cfg.beta {
                0.0
            } else {
                n
            }
        })
        .collect();
    let (h, w) = raw.grid.shape();
    Ok(Heatmap {
        grid: Grid::new(h, w, data)?,
        stage: Stage::Final,
        domain: raw.domain,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub prompt: String,
    pub ego: Heatmap,
    pub exo: Option<Heatmap>,
}

pub fn localize(
    text_encoder: &dyn TextEncoder,
    prompt: &str,
    feats_ego: &FeatureMap,
    feats_exo: Option<&FeatureMap>,
    image_size: (usize, usize),
    cfg: &ThresholdConfig,
) -> Result<Localization> {
    let t = text_encoder.encode(prompt)?;
    let one = |f: &FeatureMap| -> Result<Heatmap> {
        normalize_and_filter(&similarity_heatmap(&t, f, image_size)?, cfg)
    };
    Ok(Localization {
        prompt: prompt.to_string(),
        ego: one(feats_ego)?,
        exo: feats_exo.map(one).transpose()?,
    })
}
