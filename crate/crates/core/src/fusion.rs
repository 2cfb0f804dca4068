//! Pixel-level fusion former: one transformer, shared by every feature
//! stream (pure and multimodal, exocentric and egocentric).

use std::ops::Range;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureMap, FeatureSource};
use crate::error::{Result, SeaError};
use crate::nn::{Dropout, Init, Linear, TransformerBlock};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// Learned input/output projections for sources whose dim differs from model_dim.
    Auto,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PffConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub projection: ProjectionMode,
    /// Attention radius in patches (Chebyshev distance). `None` is global
    /// attention within each stream.
    pub window: Option<usize>,
}

impl Default for PffConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            dropout: 0.0,
            projection: ProjectionMode::Auto,
            window: None,
        }
    }
}

impl PffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(SeaError::Config("model.pff sizes must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(SeaError::Config(format!(
                "model.pff.model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SeaError::Config("model.pff.dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PixelFusionFormer {
    pub config: PffConfig,
    pub pure_dim: usize,
    pub multimodal_dim: usize,
    pure_in: Option<Linear>,
    multimodal_in: Option<Linear>,
    multimodal_out: Option<Linear>,
    blocks: Vec<TransformerBlock>,
}

/// Identity-like init keeps the multimodal stream in the text space at step 0
/// whenever the projection is not a reduction.
fn projection_init(in_dim: usize, out_dim: usize) -> Init {
    if in_dim <= out_dim {
        Init::Identity
    } else {
        Init::Normal
    }
}

impl PixelFusionFormer {
    pub const PARAM_PREFIX: &'static str = "pff.";

    pub fn new(
        store: &mut ParamStore,
        config: PffConfig,
        pure_dim: usize,
        multimodal_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let m = config.model_dim;
        let projected = |d: usize| config.projection == ProjectionMode::Auto && d != m;
        let pure_in = projected(pure_dim)
            .then(|| Linear::new(store, "pff.pure_in", pure_dim, m, projection_init(pure_dim, m), rng));
        let multimodal_in = projected(multimodal_dim).then(|| {
            Linear::new(
                store,
                "pff.multimodal_in",
                multimodal_dim,
                m,
                projection_init(multimodal_dim, m),
                rng,
            )
        });
        let multimodal_out = projected(multimodal_dim).then(|| {
            let init = if multimodal_dim <= m { Init::Identity } else { Init::Normal };
            Linear::new(store, "pff.multimodal_out", m, multimodal_dim, init, rng)
        });
        let blocks = (0..config.layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("pff.block{i}"),
                    m,
                    config.heads,
                    config.ffn_dim,
                    true,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            config,
            pure_dim,
            multimodal_dim,
            pure_in,
            multimodal_in,
            multimodal_out,
            blocks,
        })
    }

    /// Output width for a source: model_dim for pure, the text dim for multimodal.
    pub fn output_dim(&self, source: FeatureSource) -> usize {
        match source {
            FeatureSource::Multimodal => self.multimodal_dim,
            FeatureSource::Pure => self.config.model_dim,
        }
    }

    /// Fuses stacked token rows of one source. `streams` lists the row range
    /// of each image, laid out row-major on a `grid` of patches; attention
    /// never crosses streams.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        source: FeatureSource,
        streams: &[Range<usize>],
        grid: (usize, usize),
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let (.., d) = g.shape(tokens);
        let (input, output, expected) = match source {
            FeatureSource::Pure => (&self.pure_in, &None, self.pure_dim),
            FeatureSource::Multimodal => (&self.multimodal_in, &self.multimodal_out, self.multimodal_dim),
        };
        if d != expected {
            return Err(SeaError::Shape(format!(
                "{source:?} stream has dim {d}, fusion former expects {expected}"
            )));
        }
        let mut x = match input {
            Some(p) => p.forward(g, store, tokens),
            None if d == self.config.model_dim => tokens,
            None => {
                return Err(SeaError::Shape(format!(
                    "{source:?} dim {d} differs from model_dim {} and projection is disabled",
                    self.config.model_dim
                )))
            }
        };
        let mask = match self.config.window {
            Some(r) => {
                if let Some(s) = streams.iter().find(|s| s.len() != grid.0 * grid.1) {
                    return Err(SeaError::Shape(format!(
                        "stream of {} tokens does not fill a {}x{} grid",
                        s.len(),
                        grid.0,
                        grid.1
                    )));
                }
                Some(Arc::new(window_mask(grid, r)))
            }
            None => None,
        };
        for block in &self.blocks {
            x = block.forward(g, store, x, streams, mask.as_ref(), dropout);
        }
        Ok(match output {
            Some(p) => p.forward(g, store, x),
            None => x,
        })
    }

    /// Eval-mode fusion of a single feature map.
    pub fn fuse(&self, store: &ParamStore, stream: &FeatureMap) -> Result<FeatureMap> {
        if stream.fused {
            return Err(SeaError::Input("stream is already fused".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(stream.to_tensor());
        let y = self.forward(
            &mut g,
            store,
            x,
            stream.source,
            &[0..stream.tokens()],
            (stream.height, stream.width),
            &mut Dropout::eval(),
        )?;
        let mut out =
            FeatureMap::from_tensor(g.value(y), stream.height, stream.width, stream.source, stream.domain)?;
        out.fused = true;
        Ok(out)
    }
}

/// Row-major tokens×tokens table: true where two patches of a `grid` lie
/// within `radius` of each other in both axes.
pub fn window_mask(grid: (usize, usize), radius: usize) -> Vec<bool> {
    let (h, w) = grid;
    let mut mask = Vec::with_capacity(h * w * h * w);
    for i in 0..h * w {
        let (yi, xi) = (i / w, i % w);
        for j in 0..h * w {
            let (yj, xj) = (j / w, j % w);
            mask.push(yi.abs_diff(yj) <= radius && xi.abs_diff(xj) <= radius);
        }
    }
    mask
}
