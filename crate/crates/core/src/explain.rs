//! Self-explainable former: turns fused exocentric and egocentric token sets
//! into a single class token, then into action and object distributions that
//! are rendered as an embodied caption.
//!
//! Batched layout: every sample owns a contiguous run of token rows with its
//! exocentric tokens first and its egocentric tokens after. [`TokenLayout`]
//! records those two ranges per sample.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeaError};
use crate::nn::{averaging_matrix, Dropout, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
use crate::tensor::{softmax_in_place, AttnSegment, Graph, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_TEMPLATE: &str = "I will [action] [object]";
const ACTION_SLOT: &str = "[action]";
const OBJECT_SLOT: &str = "[object]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainVariant {
    /// Per-domain mean, concatenation, feed-forward.
    FfnSoftmax,
    /// Per-domain mean, concatenation, linear projection.
    ConcatAvgpool,
    /// Domain-masked self-attention then class-token cross-attention.
    Transformer,
}

impl std::str::FromStr for ExplainVariant {
    type Err = SeaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ffn_softmax" => Ok(Self::FfnSoftmax),
            "concat_avgpool" => Ok(Self::ConcatAvgpool),
            "transformer" => Ok(Self::Transformer),
            other => Err(SeaError::Config(format!("unknown model.explain.variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub variant: ExplainVariant,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            variant: ExplainVariant::Transformer,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || self.ffn_mult == 0 {
            return Err(SeaError::Config("model.explain sizes must be positive".into()));
        }
        if dim % self.heads != 0 {
            return Err(SeaError::Config(format!(
                "model dim {dim} not divisible by model.explain.heads {}",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Token rows owned by one sample. `exo` may be empty only at inference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub exo: Range<usize>,
    pub ego: Range<usize>,
}

impl TokenLayout {
    fn all(&self) -> Range<usize> {
        if self.exo.is_empty() {
            self.ego.clone()
        } else {
            self.exo.start..self.ego.end
        }
    }

    fn check(&self, rows: usize) -> Result<()> {
        let contiguous = self.exo.is_empty() || self.exo.end == self.ego.start;
        if self.ego.is_empty() || !contiguous || self.ego.end > rows {
            return Err(SeaError::Shape(format!(
                "token layout exo {:?} ego {:?} does not fit {rows} rows",
                self.exo, self.ego
            )));
        }
        Ok(())
    }
}

/// Learned class token, stored as a 1×dim parameter.
#[derive(Clone, Copy, Debug)]
pub struct ClsToken {
    pub id: ParamId,
}

impl ClsToken {
    pub fn vector<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.get(self.id).data()
    }
}

#[derive(Clone, Debug)]
enum Core {
    Transformer {
        block: TransformerBlock,
        cls: ClsToken,
        context_norm: LayerNorm,
        cross: MultiHeadAttention,
        ffn_norm: LayerNorm,
        ffn: FeedForward,
    },
    Ffn(FeedForward),
    Pool(Linear),
}

#[derive(Clone, Debug)]
pub struct SelfExplainFormer {
    pub config: ExplainConfig,
    pub dim: usize,
    core: Core,
    action_head: Linear,
    object_head: Linear,
}

/// Logit variables for a batch.
#[derive(Clone, Copy, Debug)]
pub struct ExplainVars {
    pub f_cls: Var,
    pub action_logits: Var,
    pub object_logits: Var,
}

impl SelfExplainFormer {
    pub const PARAM_PREFIX: &'static str = "explain.";

    pub fn new(
        store: &mut ParamStore,
        config: ExplainConfig,
        dim: usize,
        n_actions: usize,
        n_objects: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate(dim)?;
        let hidden = dim * config.ffn_mult;
        let core = match config.variant {
            ExplainVariant::Transformer => Core::Transformer {
                block: TransformerBlock::new(store, "explain.self", dim, config.heads, hidden, false, rng),
                cls: ClsToken {
                    id: store.add("explain.cls", crate::nn::normal_tensor(1, dim, 0.02, rng)),
                },
                context_norm: LayerNorm::new(store, "explain.cross.norm", dim),
                cross: MultiHeadAttention::new(store, "explain.cross.attn", dim, config.heads, rng),
                ffn_norm: LayerNorm::new(store, "explain.cross.ffn_norm", dim),
                ffn: FeedForward::new(store, "explain.cross.ffn", dim, hidden, dim, rng),
            },
            ExplainVariant::FfnSoftmax => {
                Core::Ffn(FeedForward::new(store, "explain.ffn", 2 * dim, hidden, dim, rng))
            }
            ExplainVariant::ConcatAvgpool => {
                Core::Pool(Linear::new(store, "explain.pool", 2 * dim, dim, Init::Normal, rng))
            }
        };
        let action_head = Linear::new(store, "explain.action_head", dim, n_actions, Init::Zeros, rng);
        let object_head = Linear::new(store, "explain.object_head", dim, n_objects, Init::Zeros, rng);
        Ok(Self {
            config,
            dim,
            core,
            action_head,
            object_head,
        })
    }

    pub fn variant(&self) -> ExplainVariant {
        self.config.variant
    }

    pub fn cls_token(&self) -> Option<ClsToken> {
        match &self.core {
            Core::Transformer { cls, .. } => Some(*cls),
            _ => None,
        }
    }

    fn check(&self, g: &Graph, x: Var, layout: &[TokenLayout], allow_empty_exo: bool) -> Result<()> {
        let (rows, cols) = g.shape(x);
        if cols != self.dim {
            return Err(SeaError::Shape(format!(
                "self-explain expects dim {}, got {cols}",
                self.dim
            )));
        }
        if layout.is_empty() {
            return Err(SeaError::Input("empty batch".into()));
        }
        for l in layout {
            l.check(rows)?;
            if l.exo.is_empty() && !allow_empty_exo {
                return Err(SeaError::Input("exocentric token set is empty".into()));
            }
        }
        Ok(())
    }

    /// Domain-masked self-attention: exocentric tokens see only the sample's
    /// exocentric tokens, egocentric only egocentric. Only the transformer
    /// variant has this stage.
    pub fn self_attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        layout: &[TokenLayout],
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        self.check(g, x, layout, false)?;
        self.self_attend_unchecked(g, store, x, layout, dropout)
    }

    fn self_attend_unchecked(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        layout: &[TokenLayout],
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let Core::Transformer { block, .. } = &self.core else {
            return Err(SeaError::Config(format!(
                "{:?} variant has no self-attention stage",
                self.config.variant
            )));
        };
        let segments: Vec<Range<usize>> = layout
            .iter()
            .flat_map(|l| [l.exo.clone(), l.ego.clone()])
            .filter(|r| !r.is_empty())
            .collect();
        Ok(block.forward(g, store, x, &segments, None, dropout))
    }

    /// One class-token query per sample over all of that sample's tokens.
    /// Returns S×dim.
    pub fn cross_domain_attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        refined: Var,
        layout: &[TokenLayout],
    ) -> Result<Var> {
        self.check(g, refined, layout, true)?;
        let Core::Transformer {
            cls,
            context_norm,
            cross,
            ffn_norm,
            ffn,
            ..
        } = &self.core
        else {
            return Err(SeaError::Config(format!(
                "{:?} variant has no cross-attention stage",
                self.config.variant
            )));
        };
        let s = layout.len();
        let ones = g.constant(Tensor::filled(s, 1, 1.0));
        let cls = g.param(store, cls.id);
        let queries = g.matmul(ones, cls);
        let context = context_norm.forward(g, store, refined);
        let segments = layout
            .iter()
            .enumerate()
            .map(|(i, l)| AttnSegment::new(i..i + 1, l.all()))
            .collect();
        let a = cross.forward(g, store, queries, context, segments);
        let a = g.add(queries, a);
        let h = ffn_norm.forward(g, store, a);
        let f = ffn.forward(g, store, h);
        Ok(g.add(a, f))
    }

    /// Class feature for each sample under the configured variant. With
    /// `allow_empty_exo`, samples without exocentric tokens fall back to their
    /// egocentric tokens (inference path).
    pub fn forward_cls(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        layout: &[TokenLayout],
        allow_empty_exo: bool,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        self.check(g, x, layout, allow_empty_exo)?;
        match &self.core {
            Core::Transformer { .. } => {
                let refined = self.self_attend_unchecked(g, store, x, layout, dropout)?;
                self.cross_domain_attend(g, store, refined, layout)
            }
            Core::Ffn(ffn) => {
                let pooled = domain_means(g, x, layout);
                Ok(ffn.forward(g, store, pooled))
            }
            Core::Pool(proj) => {
                let pooled = domain_means(g, x, layout);
                Ok(proj.forward(g, store, pooled))
            }
        }
    }

    /// Zero-initialized linear heads over f_cls.
    pub fn classify(&self, g: &mut Graph, store: &ParamStore, f_cls: Var) -> ExplainVars {
        ExplainVars {
            f_cls,
            action_logits: self.action_head.forward(g, store, f_cls),
            object_logits: self.object_head.forward(g, store, f_cls),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        layout: &[TokenLayout],
        allow_empty_exo: bool,
        dropout: &mut Dropout<'_>,
    ) -> Result<ExplainVars> {
        let f_cls = self.forward_cls(g, store, x, layout, allow_empty_exo, dropout)?;
        Ok(self.classify(g, store, f_cls))
    }

    /// Plain-tensor classification of a single f_cls vector.
    pub fn classify_vector(&self, store: &ParamStore, f_cls: &[f64]) -> Result<ExplainOutput> {
        if f_cls.len() != self.dim {
            return Err(SeaError::Shape(format!(
                "f_cls has {} values, expected {}",
                f_cls.len(),
                self.dim
            )));
        }
        if f_cls.iter().any(|v| !v.is_finite()) {
            return Err(SeaError::NonFinite {
                component: "f_cls".into(),
                batch_ids: vec![],
            });
        }
        let x = Tensor::row_vector(f_cls.to_vec());
        let a = self.action_head.apply(store, &x).into_data();
        let o = self.object_head.apply(store, &x).into_data();
        Ok(ExplainOutput::from_logits(f_cls.to_vec(), a, o))
    }
}

/// S×2·dim rows of [mean(exo) ‖ mean(ego)]; ego stands in for a missing exo set.
fn domain_means(g: &mut Graph, x: Var, layout: &[TokenLayout]) -> Var {
    let (n, _) = g.shape(x);
    let exo_groups: Vec<Vec<Range<usize>>> = layout
        .iter()
        .map(|l| vec![if l.exo.is_empty() { l.ego.clone() } else { l.exo.clone() }])
        .collect();
    let ego_groups: Vec<Vec<Range<usize>>> = layout.iter().map(|l| vec![l.ego.clone()]).collect();
    let a_exo = g.constant(averaging_matrix(&exo_groups, n));
    let a_ego = g.constant(averaging_matrix(&ego_groups, n));
    let exo = g.matmul(a_exo, x);
    let ego = g.matmul(a_ego, x);
    g.concat_cols(&[exo, ego])
}

/// Per-sample classification result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainOutput {
    pub f_cls: Vec<f64>,
    pub action_logits: Vec<f64>,
    pub object_logits: Vec<f64>,
    pub action_probs: Vec<f64>,
    pub object_probs: Vec<f64>,
}

impl ExplainOutput {
    pub fn from_logits(f_cls: Vec<f64>, action_logits: Vec<f64>, object_logits: Vec<f64>) -> Self {
        let mut action_probs = action_logits.clone();
        softmax_in_place(&mut action_probs);
        let mut object_probs = object_logits.clone();
        softmax_in_place(&mut object_probs);
        Self {
            f_cls,
            action_logits,
            object_logits,
            action_probs,
            object_probs,
        }
    }

    pub fn action_ranking(&self) -> Vec<usize> {
        ranking(&self.action_logits)
    }

    pub fn object_ranking(&self) -> Vec<usize> {
        ranking(&self.object_logits)
    }
}

/// Ids by descending score; ties keep the lower id first.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

fn check_template(template: &str) -> Result<()> {
    for slot in [ACTION_SLOT, OBJECT_SLOT] {
        let n = template.matches(slot).count();
        if n != 1 {
            return Err(SeaError::Template(format!(
                "template {template:?} must contain {slot} exactly once, found {n}"
            )));
        }
    }
    Ok(())
}

pub fn render_caption(action: &str, object: &str, template: &str) -> Result<String> {
    check_template(template)?;
    // Split first so a label that itself looks like a slot is never rewritten.
    let a = template.find(ACTION_SLOT).unwrap();
    let o = template.find(OBJECT_SLOT).unwrap();
    let (first, first_slot, second, second_slot) = if a < o {
        (action, ACTION_SLOT, object, OBJECT_SLOT)
    } else {
        (object, OBJECT_SLOT, action, ACTION_SLOT)
    };
    let (head, rest) = template.split_at(a.min(o));
    let rest = &rest[first_slot.len()..];
    let (mid, tail) = rest.split_at(rest.find(second_slot).unwrap());
    let tail = &tail[second_slot.len()..];
    Ok(format!("{head}{first}{mid}{second}{tail}"))
}

/// Inverse of [`render_caption`]. Labels must not contain the literal text
/// between the two slots.
pub fn parse_caption(caption: &str, template: &str) -> Result<(String, String)> {
    check_template(template)?;
    let a = template.find(ACTION_SLOT).unwrap();
    let o = template.find(OBJECT_SLOT).unwrap();
    let (lo, hi, lo_len, hi_len) = if a < o {
        (a, o, ACTION_SLOT.len(), OBJECT_SLOT.len())
    } else {
        (o, a, OBJECT_SLOT.len(), ACTION_SLOT.len())
    };
    let head = &template[..lo];
    let mid = &template[lo + lo_len..hi];
    let tail = &template[hi + hi_len..];
    let no_match = || SeaError::Template(format!("caption {caption:?} does not follow {template:?}"));
    let body = caption
        .strip_prefix(head)
        .and_then(|s| s.strip_suffix(tail))
        .ok_or_else(no_match)?;
    let cut = if mid.is_empty() { None } else { body.find(mid) };
    let (first, second) = match cut {
        Some(i) => (&body[..i], &body[i + mid.len()..]),
        None => return Err(no_match()),
    };
    if first.is_empty() || second.is_empty() {
        return Err(no_match());
    }
    let (action, object) = if a < o { (first, second) } else { (second, first) };
    Ok((action.to_string(), object.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn former(variant: ExplainVariant, dim: usize, heads: usize) -> (ParamStore, SelfExplainFormer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ExplainConfig {
            variant,
            heads,
            ..ExplainConfig::default()
        };
        let f = SelfExplainFormer::new(&mut store, cfg, dim, 36, 40, &mut rng).unwrap();
        (store, f)
    }

    fn tokens(n: usize, d: usize) -> Tensor {
        Tensor::new(n, d, (0..n * d).map(|i| (i as f64 * 0.37).sin()).collect())
    }

    #[test]
    fn captions_render_and_parse() {
        assert_eq!(render_caption("beat", "drum", DEFAULT_TEMPLATE).unwrap(), "I will beat drum");
        assert_eq!(render_caption("x", "y", "[object] [action]").unwrap(), "y x");
        assert!(matches!(
            render_caption("a", "b", "I will [object]"),
            Err(SeaError::Template(_))
        ));
        assert!(render_caption("a", "b", "[action] [action] [object]").is_err());
        let c = render_caption("[object]", "cup", DEFAULT_TEMPLATE).unwrap();
        assert_eq!(c, "I will [object] cup");
        let (a, o) = parse_caption("I will pour cup", DEFAULT_TEMPLATE).unwrap();
        assert_eq!((a.as_str(), o.as_str()), ("pour", "cup"));
        assert_eq!(parse_caption("y x", "[object] [action]").unwrap(), ("x".into(), "y".into()));
        assert!(parse_caption("You will pour cup", DEFAULT_TEMPLATE).is_err());
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!("transformer".parse::<ExplainVariant>().unwrap(), ExplainVariant::Transformer);
        assert!(matches!("mlp".parse::<ExplainVariant>(), Err(SeaError::Config(_))));
    }

    #[test]
    fn zero_heads_give_uniform_probabilities() {
        let (store, f) = former(ExplainVariant::Transformer, 8, 2);
        let out = f.classify_vector(&store, &[0.0; 8]).unwrap();
        assert_eq!((out.action_logits.len(), out.object_logits.len()), (36, 40));
        assert!(out.action_probs.iter().all(|p| (p - 1.0 / 36.0).abs() < 1e-12));
        assert!(out.object_probs.iter().all(|p| (p - 1.0 / 40.0).abs() < 1e-12));
    }

    #[test]
    fn ranking_matches_logit_order() {
        let out = ExplainOutput::from_logits(vec![], vec![0.1, 2.0, -1.0, 2.0], vec![3.0, 1.0]);
        assert_eq!(out.action_ranking(), vec![1, 3, 0, 2]);
        assert_eq!(out.object_ranking(), vec![0, 1]);
        assert!((out.action_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_attend_shapes_and_masking() {
        let (store, f) = former(ExplainVariant::Transformer, 8, 2);
        let mut g = Graph::new();
        let x = g.constant(tokens(12, 8));
        let layout = [TokenLayout { exo: 0..8, ego: 8..12 }];
        let y = f.self_attend(&mut g, &store, x, &layout, &mut Dropout::eval()).unwrap();
        assert_eq!(g.shape(y), (12, 8));
        let ego = g.slice_rows(y, 8..12);
        let loss = g.sum_all(ego);
        let grads = g.backward(loss);
        let dx = grads.get_or_zeros(&g, x);
        assert!(dx.data()[..64].iter().all(|&v| v == 0.0));
        assert!(dx.data()[64..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn empty_exo_is_rejected_for_training() {
        let (store, f) = former(ExplainVariant::Transformer, 8, 2);
        let mut g = Graph::new();
        let x = g.constant(tokens(4, 8));
        let layout = [TokenLayout { exo: 0..0, ego: 0..4 }];
        let err = f.self_attend(&mut g, &store, x, &layout, &mut Dropout::eval()).unwrap_err();
        assert!(matches!(err, SeaError::Input(_)));
        let out = f.forward_cls(&mut g, &store, x, &layout, true, &mut Dropout::eval()).unwrap();
        assert_eq!(g.shape(out), (1, 8));
    }

    #[test]
    fn cross_attend_returns_one_vector_per_sample() {
        let (store, f) = former(ExplainVariant::Transformer, 8, 4);
        let mut g = Graph::new();
        let x = g.constant(tokens(24, 8));
        let layout = [
            TokenLayout { exo: 0..8, ego: 8..12 },
            TokenLayout { exo: 12..20, ego: 20..24 },
        ];
        let y = f.cross_domain_attend(&mut g, &store, x, &layout).unwrap();
        assert_eq!(g.shape(y), (2, 8));
        let bad = g.constant(tokens(12, 6));
        assert!(matches!(
            f.cross_domain_attend(&mut g, &store, bad, &layout[..1]),
            Err(SeaError::Shape(_))
        ));
    }

    #[test]
    fn pooling_variant_on_constant_tokens_projects_the_concatenation() {
        let (store, f) = former(ExplainVariant::ConcatAvgpool, 4, 2);
        let v = [0.3, -0.2, 0.5, 1.0];
        let rows: Vec<Vec<f64>> = (0..6).map(|_| v.to_vec()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows));
        let layout = [TokenLayout { exo: 0..4, ego: 4..6 }];
        let y = f.forward_cls(&mut g, &store, x, &layout, false, &mut Dropout::eval()).unwrap();
        let Core::Pool(proj) = &f.core else { unreachable!() };
        let cat = Tensor::row_vector([v, v].concat());
        let expected = proj.apply(&store, &cat);
        for (a, b) in g.value(y).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn every_variant_emits_model_dim() {
        for variant in [
            ExplainVariant::FfnSoftmax,
            ExplainVariant::ConcatAvgpool,
            ExplainVariant::Transformer,
        ] {
            let (store, f) = former(variant, 8, 2);
            let mut g = Graph::new();
            let x = g.constant(tokens(10, 8));
            let layout = [TokenLayout { exo: 0..6, ego: 6..10 }];
            let out = f.forward(&mut g, &store, x, &layout, false, &mut Dropout::eval()).unwrap();
            assert_eq!(g.shape(out.f_cls), (1, 8));
            assert_eq!(g.shape(out.action_logits), (1, 36));
            assert_eq!(g.shape(out.object_logits), (1, 40));
        }
    }
}
