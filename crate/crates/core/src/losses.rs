//! Training objectives. Each loss has a plain version over slices (used by
//! tests and reporting) and a tape version used for backpropagation.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::affordance::{cosine, Heatmap};
use crate::encoders::{Domain, FeatureMap};
use crate::error::{Result, SeaError};
use crate::nn::averaging_matrix;
use crate::tensor::{log_sum_exp, softmax_in_place, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cos: f64,
    pub con: f64,
    pub ce_action: f64,
    pub ce_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cos: 1.0,
            con: 1.0,
            ce_action: 1.0,
            ce_object: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Margin on the exo/ego cosine.
    pub alpha: f64,
    pub eps: f64,
    /// Softmax temperature over batch cosines.
    pub tau: f64,
    pub weights: LossWeights,
    /// Also contrast exocentric embeddings against the text.
    pub contrast_exo: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            eps: 1e-8,
            tau: 0.07,
            weights: LossWeights::default(),
            contrast_exo: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let ws = [w.cos, w.con, w.ce_action, w.ce_object];
        if ws.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SeaError::Config("loss.weights must be finite and non-negative".into()));
        }
        if ws.iter().all(|v| *v == 0.0) {
            return Err(SeaError::Config("at least one loss weight must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SeaError::Config(format!("loss.alpha {} outside [0,1]", self.alpha)));
        }
        if !(self.eps > 0.0) || !(self.tau > 0.0) {
            return Err(SeaError::Config("loss.eps and loss.tau must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledEmbedding {
    pub vector: Vec<f64>,
    pub domain: Domain,
}

/// Heatmap-weighted mean of patch vectors. The heatmap is block-averaged
/// down to the feature grid first.
pub fn pooled_embedding(feats: &FeatureMap, heatmap: &Heatmap) -> Result<PooledEmbedding> {
    let weights = heatmap.grid.area_downsample(feats.height, feats.width)?;
    let n = feats.tokens();
    let mut e = vec![0.0; feats.dim];
    for (i, w) in weights.data().iter().enumerate() {
        for (acc, v) in e.iter_mut().zip(&feats.data[i * feats.dim..(i + 1) * feats.dim]) {
            *acc += w * v;
        }
    }
    e.iter_mut().for_each(|v| *v /= n as f64);
    Ok(PooledEmbedding {
        vector: e,
        domain: feats.domain,
    })
}

/// max(0, 1 − α − cos); a zero vector has cosine 0.
pub fn cosine_margin_loss(e_exo: &[f64], e_ego: &[f64], alpha: f64) -> f64 {
    (1.0 - alpha - cosine(e_exo, e_ego)).max(0.0)
}

/// Row-wise softmax of cosine / τ between visual and text rows.
pub fn batch_similarity(visual: &Tensor, text: &Tensor, tau: f64) -> Result<Tensor> {
    if visual.rows() == 0 || visual.rows() != text.rows() || visual.cols() != text.cols() {
        return Err(SeaError::Input(format!(
            "batch similarity needs equal non-empty batches, got {:?} and {:?}",
            visual.shape(),
            text.shape()
        )));
    }
    let n = visual.rows();
    let mut p = Tensor::zeros(n, n);
    for i in 0..n {
        let row = p.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = cosine(visual.row(i), text.row(j)) / tau;
        }
        softmax_in_place(row);
    }
    Ok(p)
}

/// Binary match matrix: entries whose keys are equal are matched.
pub fn match_matrix<K: PartialEq>(keys: &[K]) -> Tensor {
    let n = keys.len();
    let mut q = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if keys[i] == keys[j] {
                q.set(i, j, 1.0);
            }
        }
    }
    q
}

/// Mean over rows of Σ_j p log(p / (q + ε)). Zero-probability terms contribute 0.
pub fn contrastive_loss(p: &Tensor, q: &Tensor, eps: f64) -> Result<f64> {
    if p.shape() != q.shape() || p.rows() == 0 {
        return Err(SeaError::Shape(format!(
            "contrastive loss needs matching shapes, got {:?} and {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&p, &q)| if p > 0.0 { p * (p / (q + eps)).ln() } else { 0.0 })
        .sum();
    Ok(total / p.rows() as f64)
}

pub fn classification_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(SeaError::Input(format!(
            "label {label} outside {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cos: f64,
    pub con: f64,
    pub ce_action: f64,
    pub ce_object: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [self.cos, self.con, self.ce_action, self.ce_object].iter().all(|v| v.is_finite())
    }

    /// First non-finite component name, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("cos", self.cos),
            ("con", self.con),
            ("ce_action", self.ce_action),
            ("ce_object", self.ce_object),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    if [w.cos, w.con, w.ce_action, w.ce_object].iter().all(|v| *v == 0.0) {
        return Err(SeaError::Config("at least one loss weight must be positive".into()));
    }
    if let Some(name) = c.first_non_finite() {
        return Err(SeaError::NonFinite {
            component: name.into(),
            batch_ids: vec![],
        });
    }
    Ok(w.cos * c.cos + w.con * c.con + w.ce_action * c.ce_action + w.ce_object * c.ce_object)
}

// Tape versions. Batched inputs carry one sample per row; each returns a 1×1 mean.

/// S×d pooled embeddings: row s is the weighted mean over the token rows in
/// `images[s]`. `weights` is N×1.
pub fn graph_pooled_embedding(g: &mut Graph, feats: Var, weights: Var, images: &[Range<usize>]) -> Var {
    let (n, _) = g.shape(feats);
    let groups: Vec<Vec<Range<usize>>> = images.iter().map(|r| vec![r.clone()]).collect();
    let avg = g.constant(averaging_matrix(&groups, n));
    let weighted = g.mul(feats, weights);
    g.matmul(avg, weighted)
}

/// S×1 row cosines.
fn graph_row_cosine(g: &mut Graph, a: Var, b: Var) -> Var {
    let an = g.normalize_rows(a);
    let bn = g.normalize_rows(b);
    let m = g.mul(an, bn);
    g.sum_cols(m)
}

pub fn graph_cosine_margin(g: &mut Graph, e_exo: Var, e_ego: Var, alpha: f64) -> Var {
    let c = graph_row_cosine(g, e_exo, e_ego);
    let neg = g.scale(c, -1.0);
    let m = g.offset(neg, 1.0 - alpha);
    let r = g.relu(m);
    g.mean_all(r)
}

/// Returns (loss, P) where P is the S×S similarity distribution.
pub fn graph_contrastive(g: &mut Graph, visual: Var, text: Var, q: &Tensor, tau: f64, eps: f64) -> (Var, Var) {
    let vn = g.normalize_rows(visual);
    let tn = g.normalize_rows(text);
    let c = g.matmul_t(vn, tn);
    let logits = g.scale(c, 1.0 / tau);
    let logp = g.log_softmax_rows(logits);
    let p = g.exp(logp);
    let log_q = g.constant(q.map(|v| (v + eps).ln()));
    let ratio = g.sub(logp, log_q);
    let terms = g.mul(p, ratio);
    let total = g.sum_all(terms);
    let (n, _) = g.shape(p);
    (g.scale(total, 1.0 / n as f64), p)
}

pub fn graph_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (s, v) = g.shape(logits);
    if labels.len() != s {
        return Err(SeaError::Shape(format!("{} labels for {s} rows", labels.len())));
    }
    let mut onehot = Tensor::zeros(s, v);
    for (i, &l) in labels.iter().enumerate() {
        if l >= v {
            return Err(SeaError::Input(format!("label {l} outside {v} classes")));
        }
        onehot.set(i, l, 1.0);
    }
    let logp = g.log_softmax_rows(logits);
    let mask = g.constant(onehot);
    let picked = g.mul(logp, mask);
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / s as f64))
}

/// Weighted sum of scalar loss variables; zero-weight terms are left off the tape.
pub fn graph_total(g: &mut Graph, parts: &[(Var, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, w) in parts {
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, w);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affordance::Stage;
    use crate::encoders::FeatureSource;
    use crate::grid::Grid;

    fn heat(h: usize, w: usize, v: Vec<f64>) -> Heatmap {
        Heatmap {
            grid: Grid::new(h, w, v).unwrap(),
            stage: Stage::Final,
            domain: Domain::Ego,
        }
    }

    #[test]
    fn pooled_embedding_cases() {
        let f = FeatureMap::new(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0], FeatureSource::Multimodal, Domain::Exo).unwrap();
        let e = pooled_embedding(&f, &heat(2, 1, vec![1.0, 0.5])).unwrap();
        assert_eq!(e.vector, vec![0.5, 0.25]);
        assert_eq!(e.domain, Domain::Exo);
        let e = pooled_embedding(&f, &heat(4, 2, vec![1.0; 8])).unwrap();
        assert_eq!(e.vector, vec![0.5, 0.5]);
        let e = pooled_embedding(&f, &heat(2, 1, vec![0.0; 2])).unwrap();
        assert_eq!(e.vector, vec![0.0, 0.0]);
        assert!(pooled_embedding(&f, &heat(3, 1, vec![0.0; 3])).is_err());
    }

    #[test]
    fn cosine_margin_cases() {
        assert_eq!(cosine_margin_loss(&[1.0, 2.0], &[1.0, 2.0], 0.1), 0.0);
        assert!((cosine_margin_loss(&[1.0, 0.0], &[0.0, 1.0], 0.1) - 0.9).abs() < 1e-15);
        assert!((cosine_margin_loss(&[1.0, 0.0], &[-3.0, 0.0], 0.1) - 1.9).abs() < 1e-15);
        assert!((cosine_margin_loss(&[0.0, 0.0], &[1.0, 0.0], 0.1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn batch_similarity_cases() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = batch_similarity(&eye, &eye, 0.07).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64 / 0.07).exp());
        assert!((p.get(0, 0) - expected).abs() < 1e-12);
        let same = Tensor::from_rows(&vec![vec![1.0, 1.0]; 3]);
        let p = batch_similarity(&same, &same, 0.07).unwrap();
        assert!(p.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert!(batch_similarity(&Tensor::zeros(0, 2), &Tensor::zeros(0, 2), 0.07).is_err());
    }

    #[test]
    fn contrastive_cases() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = contrastive_loss(&eye, &eye, 1e-8).unwrap();
        assert!((l - (1.0f64 / (1.0 + 1e-8)).ln()).abs() < 1e-15);
        let p = Tensor::from_rows(&[vec![0.5, 0.5]]);
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let l = contrastive_loss(&p, &q, 1e-8).unwrap();
        let exact = 0.5 * (0.5f64 / (1.0 + 1e-8)).ln() + 0.5 * (0.5f64 / 1e-8).ln();
        assert!((l - exact).abs() < 1e-12);
        assert!((l - 8.5172).abs() < 1e-4);
        assert!(contrastive_loss(&p, &q, 2e-8).unwrap() < l);
        assert_eq!(match_matrix(&["a", "b", "a"]).data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((classification_loss(&[0.0; 36], 4).unwrap() - 36f64.ln()).abs() < 1e-9);
        let mut sharp = vec![0.0; 5];
        sharp[0] = 10.0;
        assert!(classification_loss(&sharp, 0).unwrap() < 1e-3);
        assert!((classification_loss(&[1.0, 2.0, 3.0], 2).unwrap() - 0.4076).abs() < 1e-4);
        assert!(classification_loss(&[1.0], 1).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let c = LossComponents {
            cos: 0.9,
            con: 8.5,
            ce_action: 3.6,
            ce_object: 3.7,
        };
        assert!((total_loss(&c, &LossWeights::default()).unwrap() - 16.7).abs() < 1e-12);
        let zero = LossWeights {
            cos: 0.0,
            con: 0.0,
            ce_action: 0.0,
            ce_object: 0.0,
        };
        assert!(matches!(total_loss(&c, &zero), Err(SeaError::Config(_))));
    }

    #[test]
    fn tape_losses_match_plain_versions() {
        let v = Tensor::from_rows(&[vec![0.3, -1.0, 0.2], vec![0.9, 0.1, -0.4], vec![0.5, 0.5, 0.5]]);
        let t = Tensor::from_rows(&[vec![0.1, -0.7, 0.0], vec![1.0, 0.2, 0.3], vec![-0.2, 0.4, 0.8]]);
        let q = match_matrix(&[0, 1, 0]);
        let mut g = Graph::new();
        let (vv, tv) = (g.constant(v.clone()), g.constant(t.clone()));
        let (l, _) = graph_contrastive(&mut g, vv, tv, &q, 0.07, 1e-8);
        let p = batch_similarity(&v, &t, 0.07).unwrap();
        assert!((g.value(l).item() - contrastive_loss(&p, &q, 1e-8).unwrap()).abs() < 1e-9);

        let m = graph_cosine_margin(&mut g, vv, tv, 0.1);
        let plain: f64 = (0..3).map(|i| cosine_margin_loss(v.row(i), t.row(i), 0.1)).sum::<f64>() / 3.0;
        assert!((g.value(m).item() - plain).abs() < 1e-12);

        let ce = graph_cross_entropy(&mut g, vv, &[1, 0, 2]).unwrap();
        let plain: f64 = [1, 0, 2]
            .iter()
            .enumerate()
            .map(|(i, &l)| classification_loss(v.row(i), l).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((g.value(ce).item() - plain).abs() < 1e-12);
    }
}
