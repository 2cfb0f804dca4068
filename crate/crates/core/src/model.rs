//! The composed model: frozen encoders, shared fusion former, self-explain
//! former with classification heads, and vision-language localization.

use std::ops::Range;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affordance::{localize, prompt, AffordanceConfig};
use crate::data::{Sample, Vocabulary};
use crate::encoders::{Domain, Encoders, FeatureMap, FeatureSource};
use crate::error::{Result, SeaError};
use crate::explain::{render_caption, ExplainConfig, ExplainOutput, SelfExplainFormer, TokenLayout, DEFAULT_TEMPLATE};
use crate::fusion::{PffConfig, PixelFusionFormer};
use crate::grid::{area_matrix, bilinear_matrix, Grid};
use crate::losses::{
    graph_contrastive, graph_cosine_margin, graph_cross_entropy, graph_pooled_embedding, graph_total, match_matrix,
    LossComponents, LossConfig,
};
use crate::metrics::Predictor;
use crate::nn::Dropout;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub pff: PffConfig,
    pub explain: ExplainConfig,
    /// Seed for trainable parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            pff: PffConfig::default(),
            explain: ExplainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionConfig {
    pub template: String,
    /// Alternative phrasings used by the synthetic generator.
    pub templates: Vec<String>,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self {
            template: DEFAULT_TEMPLATE.to_string(),
            templates: vec![],
        }
    }
}

/// Both frozen encodings of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub pure: FeatureMap,
    pub multimodal: FeatureMap,
}

/// One training sample with features already extracted.
pub struct TrainItem<'a> {
    pub id: &'a str,
    pub exo: Vec<&'a ImageFeatures>,
    pub ego: &'a ImageFeatures,
    pub action_id: usize,
    pub object_id: usize,
}

/// Result of a batched forward pass on the tape.
pub struct BatchVars {
    pub total: Var,
    pub cos: Var,
    pub con: Var,
    pub ce_action: Var,
    pub ce_object: Var,
    pub action_logits: Var,
    pub object_logits: Var,
}

impl BatchVars {
    pub fn components(&self, g: &Graph) -> LossComponents {
        LossComponents {
            cos: g.value(self.cos).item(),
            con: g.value(self.con).item(),
            ce_action: g.value(self.ce_action).item(),
            ce_object: g.value(self.ce_object).item(),
        }
    }
}

/// Final heatmap, ranked label distributions and the rendered caption.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    /// Final-stage heatmap at the input image's resolution.
    pub heatmap: Grid,
    pub action_probs: Vec<f64>,
    pub object_probs: Vec<f64>,
    pub action_ranking: Vec<usize>,
    pub object_ranking: Vec<usize>,
    pub action: String,
    pub object: String,
    pub caption: String,
    pub prompt: String,
}

impl PredictionBundle {
    /// Top `k` (action, object, joint probability) pairs, assuming independent heads.
    pub fn top_pairs(&self, k: usize) -> Vec<(usize, usize, f64)> {
        let mut pairs: Vec<(usize, usize, f64)> = self
            .action_ranking
            .iter()
            .flat_map(|&a| {
                self.object_ranking
                    .iter()
                    .map(move |&o| (a, o, self.action_probs[a] * self.object_probs[o]))
            })
            .collect();
        pairs.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
        pairs.truncate(k);
        pairs
    }
}

struct Resamplers {
    /// HW × T bilinear upsampling from the patch grid to the canonical image.
    up: Tensor,
    /// T × HW block averaging back to the patch grid.
    down: Tensor,
}

pub struct SeaModel {
    pub encoders: Encoders,
    pub store: ParamStore,
    pub pff: PixelFusionFormer,
    pub explain: SelfExplainFormer,
    pub actions: Vocabulary,
    pub objects: Vocabulary,
    pub affordance: AffordanceConfig,
    pub loss: LossConfig,
    pub caption: CaptionConfig,
    resamplers: Resamplers,
}

impl SeaModel {
    pub fn new(
        encoders: Encoders,
        config: &ModelConfig,
        actions: Vocabulary,
        objects: Vocabulary,
        affordance: AffordanceConfig,
        loss: LossConfig,
        caption: CaptionConfig,
    ) -> Result<Self> {
        encoders.validate()?;
        affordance.validate()?;
        loss.validate()?;
        render_caption("a", "o", &caption.template)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pure_dim = encoders.pure.spec().embed_dim;
        let mm_dim = encoders.multimodal.spec().embed_dim;
        let pff = PixelFusionFormer::new(&mut store, config.pff.clone(), pure_dim, mm_dim, &mut rng)?;
        let explain = SelfExplainFormer::new(
            &mut store,
            config.explain.clone(),
            config.pff.model_dim,
            actions.len(),
            objects.len(),
            &mut rng,
        )?;
        let (gh, gw) = encoders.grid_size();
        let (h, w) = encoders.input_size();
        let resamplers = Resamplers {
            up: Tensor::new(h * w, gh * gw, bilinear_matrix(gh, gw, h, w)),
            down: Tensor::new(gh * gw, h * w, area_matrix(h, w, gh, gw)?),
        };
        Ok(Self {
            encoders,
            store,
            pff,
            explain,
            actions,
            objects,
            affordance,
            loss,
            caption,
            resamplers,
        })
    }

    pub fn encode_image(&self, image: &RgbImage, domain: Domain) -> Result<ImageFeatures> {
        Ok(ImageFeatures {
            pure: self.encoders.encode_visual_pure(image, domain)?,
            multimodal: self.encoders.encode_visual_multimodal(image, domain)?,
        })
    }

    pub fn prompt_for(&self, action_id: usize, object_id: usize) -> Result<String> {
        prompt(
            self.actions.label(action_id),
            self.objects.label(object_id),
            self.affordance.prompt_style,
            &self.caption.template,
        )
    }

    /// Whole training objective for a batch, recorded on `g`.
    pub fn batch_forward(
        &self,
        g: &mut Graph,
        batch: &[TrainItem<'_>],
        dropout: &mut Dropout<'_>,
    ) -> Result<BatchVars> {
        if batch.is_empty() {
            return Err(SeaError::Input("empty batch".into()));
        }
        let tokens = self.encoders.grid_size().0 * self.encoders.grid_size().1;
        let mut pure_rows = Vec::new();
        let mut mm_rows = Vec::new();
        let mut layout = Vec::with_capacity(batch.len());
        let mut images: Vec<Range<usize>> = Vec::new();
        let mut exo_groups = Vec::with_capacity(batch.len());
        let mut ego_groups = Vec::with_capacity(batch.len());
        let mut text_rows = Vec::new();
        let mut prompts = Vec::with_capacity(batch.len());
        let mut cursor = 0;
        for item in batch {
            if item.exo.is_empty() {
                return Err(SeaError::Input(format!("sample {} has no exocentric images", item.id)));
            }
            let p = self.prompt_for(item.action_id, item.object_id)?;
            let t = self.encoders.encode_text(&p)?;
            let tn = crate::tensor::l2_norm(&t.vector);
            let t_unit: Vec<f64> = t.vector.iter().map(|v| v / tn).collect();
            let start = cursor;
            for f in item.exo.iter().copied().chain(std::iter::once(item.ego)) {
                if f.pure.tokens() != tokens || f.multimodal.tokens() != tokens {
                    return Err(SeaError::Shape(format!("sample {} has a mis-sized feature map", item.id)));
                }
                pure_rows.extend_from_slice(&f.pure.data);
                mm_rows.extend_from_slice(&f.multimodal.data);
                images.push(cursor..cursor + tokens);
                for _ in 0..tokens {
                    text_rows.extend_from_slice(&t_unit);
                }
                cursor += tokens;
            }
            let exo = start..cursor - tokens;
            let ego = cursor - tokens..cursor;
            exo_groups.push(exo.clone());
            ego_groups.push(ego.clone());
            layout.push(TokenLayout { exo, ego });
            prompts.push((p, t.vector));
        }
        let n = cursor;
        let pure_dim = self.encoders.pure.spec().embed_dim;
        let mm_dim = self.encoders.multimodal.spec().embed_dim;
        let store = &self.store;

        let pure = g.constant(Tensor::new(n, pure_dim, pure_rows));
        let mm = g.constant(Tensor::new(n, mm_dim, mm_rows));
        let grid = self.encoders.grid_size();
        let fused_pure = self.pff.forward(g, store, pure, FeatureSource::Pure, &images, grid, dropout)?;
        let fused_mm = self.pff.forward(g, store, mm, FeatureSource::Multimodal, &images, grid, dropout)?;

        let ex = self.explain.forward(g, store, fused_pure, &layout, false, dropout)?;
        let action_labels: Vec<usize> = batch.iter().map(|b| b.action_id).collect();
        let object_labels: Vec<usize> = batch.iter().map(|b| b.object_id).collect();
        let ce_action = graph_cross_entropy(g, ex.action_logits, &action_labels)?;
        let ce_object = graph_cross_entropy(g, ex.object_logits, &object_labels)?;

        // Heatmap per image: patch cosine with the prompt, upsampled to the
        // canonical image, min-max normalized, thresholded, then block-averaged
        // back onto the patch grid as pooling weights.
        let text = g.constant(Tensor::new(n, mm_dim, text_rows));
        let unit = g.normalize_rows(fused_mm);
        let prod = g.mul(unit, text);
        let cos = g.sum_cols(prod);
        let cos = g.reshape(cos, images.len(), tokens);
        let up = g.constant(self.resamplers.up.clone());
        let full = g.matmul_t(cos, up);
        let norm = g.min_max_rows(full, self.affordance.epsilon_norm);
        let beta = self.affordance.beta;
        let mask = g.value(norm).map(|v| if v >= beta { 1.0 } else { 0.0 });
        let mask = g.constant(mask);
        let kept = g.mul(norm, mask);
        let down = g.constant(self.resamplers.down.clone());
        let weights = g.matmul_t(kept, down);
        let weights = g.reshape(weights, n, 1);

        let e_exo = graph_pooled_embedding(g, fused_mm, weights, &exo_groups);
        let e_ego = graph_pooled_embedding(g, fused_mm, weights, &ego_groups);
        let cos_loss = graph_cosine_margin(g, e_exo, e_ego, self.loss.alpha);

        let q = match_matrix(&prompts.iter().map(|(p, _)| p.as_str()).collect::<Vec<_>>());
        let t_batch = g.constant(Tensor::new(
            batch.len(),
            mm_dim,
            prompts.iter().flat_map(|(_, v)| v.iter().copied()).collect(),
        ));
        let (mut con, _) = graph_contrastive(g, e_ego, t_batch, &q, self.loss.tau, self.loss.eps);
        if self.loss.contrast_exo {
            let (c_exo, _) = graph_contrastive(g, e_exo, t_batch, &q, self.loss.tau, self.loss.eps);
            let sum = g.add(con, c_exo);
            con = g.scale(sum, 0.5);
        }

        let w = &self.loss.weights;
        let total = graph_total(
            g,
            &[(cos_loss, w.cos), (con, w.con), (ce_action, w.ce_action), (ce_object, w.ce_object)],
        );
        Ok(BatchVars {
            total,
            cos: cos_loss,
            con,
            ce_action,
            ce_object,
            action_logits: ex.action_logits,
            object_logits: ex.object_logits,
        })
    }

    /// Classification for one egocentric image, optionally with exocentric context.
    pub fn explain_image(&self, ego: &ImageFeatures, exo: &[ImageFeatures]) -> Result<(ExplainOutput, FeatureMap)> {
        let mut g = Graph::new();
        let tokens = ego.pure.tokens();
        let mut rows = Vec::with_capacity((exo.len() + 1) * tokens * ego.pure.dim);
        let mut streams = Vec::new();
        for (i, f) in exo.iter().chain(std::iter::once(ego)).enumerate() {
            rows.extend_from_slice(&f.pure.data);
            streams.push(i * tokens..(i + 1) * tokens);
        }
        let n = streams.len() * tokens;
        let x = g.constant(Tensor::new(n, ego.pure.dim, rows));
        let mut eval = Dropout::eval();
        let grid = (ego.pure.height, ego.pure.width);
        let fused = self.pff.forward(&mut g, &self.store, x, FeatureSource::Pure, &streams, grid, &mut eval)?;
        let layout = [TokenLayout {
            exo: 0..n - tokens,
            ego: n - tokens..n,
        }];
        let ex = self.explain.forward(&mut g, &self.store, fused, &layout, true, &mut eval)?;
        let out = ExplainOutput::from_logits(
            g.value(ex.f_cls).data().to_vec(),
            g.value(ex.action_logits).data().to_vec(),
            g.value(ex.object_logits).data().to_vec(),
        );
        let fused_mm = self.pff.fuse(&self.store, &ego.multimodal)?;
        Ok((out, fused_mm))
    }

    /// Top-1 labels drive the prompt; the heatmap is produced at `image_size`.
    pub fn predict_features(
        &self,
        ego: &ImageFeatures,
        exo: &[ImageFeatures],
        image_size: (usize, usize),
    ) -> Result<PredictionBundle> {
        let (out, fused_mm) = self.explain_image(ego, exo)?;
        let action_ranking = out.action_ranking();
        let object_ranking = out.object_ranking();
        let (a, o) = (action_ranking[0], object_ranking[0]);
        let p = self.prompt_for(a, o)?;
        let loc = localize(
            self.encoders.text.as_ref(),
            &p,
            &fused_mm,
            None,
            image_size,
            &self.affordance.threshold(),
        )?;
        let action = self.actions.label(a).to_string();
        let object = self.objects.label(o).to_string();
        Ok(PredictionBundle {
            heatmap: loc.ego.grid,
            caption: render_caption(&action, &object, &self.caption.template)?,
            action_probs: out.action_probs,
            object_probs: out.object_probs,
            action_ranking,
            object_ranking,
            action,
            object,
            prompt: p,
        })
    }

    pub fn predict(&self, ego: &RgbImage, exo: &[RgbImage]) -> Result<PredictionBundle> {
        let ego_f = self.encode_image(ego, Domain::Ego)?;
        let exo_f = exo
            .iter()
            .map(|img| self.encode_image(img, Domain::Exo))
            .collect::<Result<Vec<_>>>()?;
        self.predict_features(&ego_f, &exo_f, (ego.height() as usize, ego.width() as usize))
    }
}

impl Predictor for SeaModel {
    fn predict_sample(&self, sample: &Sample) -> Result<PredictionBundle> {
        self.predict(&sample.load_ego()?, &[])
    }
}
