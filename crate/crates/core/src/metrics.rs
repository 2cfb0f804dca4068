//! Heatmap metrics (KLD, SIM, NSS), top-k key-information accuracy and the
//! evaluation report.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, Vocabulary};
use crate::error::{Result, SeaError};
use crate::grid::Grid;
use crate::model::PredictionBundle;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NssRule {
    /// Fixations are the strictly positive ground-truth pixels.
    #[default]
    GtPositive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub epsilon: f64,
    pub nss_rule: NssRule,
    /// Predictions longer than this many labels are truncated in the predictions file.
    pub topk: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-12,
            nss_rule: NssRule::GtPositive,
            topk: 5,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(SeaError::Config("metrics.epsilon must be positive".into()));
        }
        if self.topk == 0 {
            return Err(SeaError::Config("metrics.topk must be positive".into()));
        }
        Ok(())
    }
}

fn aligned(pred: &Grid, gt: &Grid) -> Grid {
    let (h, w) = gt.shape();
    pred.resize_bilinear(h, w)
}

fn sum_normalized(g: &Grid, what: &str) -> Result<Option<Vec<f64>>> {
    if g.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SeaError::Metric(format!("{what} heatmap has negative or non-finite values")));
    }
    let s: f64 = g.data().iter().sum();
    Ok((s > 0.0).then(|| g.data().iter().map(|v| v / s).collect()))
}

fn gt_distribution(gt: &Grid) -> Result<Vec<f64>> {
    sum_normalized(gt, "ground-truth")?.ok_or_else(|| SeaError::Metric("ground-truth heatmap is all zero".into()))
}

/// KL(GT ‖ pred) after sum-normalizing both; `pred` is resized to the GT shape.
/// An all-zero prediction is scored as a zero distribution, giving a large
/// finite value.
pub fn kld(pred: &Grid, gt: &Grid, eps: f64) -> Result<f64> {
    let g = gt_distribution(gt)?;
    let p = sum_normalized(&aligned(pred, gt), "predicted")?.unwrap_or_else(|| vec![0.0; g.len()]);
    Ok(g.iter()
        .zip(&p)
        .map(|(&gi, &pi)| gi * (eps + gi / (pi + eps)).ln())
        .sum())
}

/// Histogram intersection of the sum-normalized maps.
pub fn sim(pred: &Grid, gt: &Grid) -> Result<f64> {
    let g = gt_distribution(gt)?;
    let Some(p) = sum_normalized(&aligned(pred, gt), "predicted")? else {
        return Ok(0.0);
    };
    Ok(g.iter().zip(&p).map(|(a, b)| a.min(*b)).sum())
}

/// Mean z-scored prediction over the positive ground-truth pixels. A
/// constant prediction scores 0.
pub fn nss(pred: &Grid, gt: &Grid) -> Result<f64> {
    let p = aligned(pred, gt);
    let n = p.data().len() as f64;
    let mean = p.data().iter().sum::<f64>() / n;
    let var = p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let fix: Vec<usize> = (0..gt.data().len()).filter(|&i| gt.data()[i] > 0.0).collect();
    if fix.is_empty() {
        return Err(SeaError::Metric("ground truth has no positive pixel".into()));
    }
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(0.0);
    }
    Ok(fix.iter().map(|&i| (p.data()[i] - mean) / std).sum::<f64>() / fix.len() as f64)
}

/// Percentage of samples whose label is among the first `k` ranked ids.
/// `k` larger than the vocabulary is clamped with a warning.
pub fn topk_accuracy(rankings: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    if rankings.len() != labels.len() {
        return Err(SeaError::Metric(format!(
            "{} rankings for {} labels",
            rankings.len(),
            labels.len()
        )));
    }
    if rankings.is_empty() {
        return Err(SeaError::Metric("no predictions to score".into()));
    }
    if k == 0 {
        return Err(SeaError::Metric("k must be at least 1".into()));
    }
    let vocab = rankings[0].len();
    let k = if k > vocab {
        log::warn!("top-{k} requested over {vocab} classes; using k={vocab}");
        vocab
    } else {
        k
    };
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, l)| r[..k].contains(l))
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(rename = "KLD_mean")]
    pub kld_mean: f64,
    #[serde(rename = "KLD_std")]
    pub kld_std: f64,
    #[serde(rename = "SIM_mean")]
    pub sim_mean: f64,
    #[serde(rename = "SIM_std")]
    pub sim_std: f64,
    #[serde(rename = "NSS_mean")]
    pub nss_mean: f64,
    #[serde(rename = "NSS_std")]
    pub nss_std: f64,
    #[serde(rename = "T_a@1")]
    pub ta1: f64,
    #[serde(rename = "T_a@5")]
    pub ta5: f64,
    #[serde(rename = "T_o@1")]
    pub to1: f64,
    #[serde(rename = "T_o@5")]
    pub to5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub action: String,
    pub object: String,
    pub pred_action: String,
    pub pred_object: String,
    pub caption: String,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub aggregates: Aggregates,
    pub samples: Vec<SampleMetrics>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| SeaError::Metric(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| SeaError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SeaError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SeaError::Metric(format!("{}: {e}", path.display())))
    }

    pub fn to_table(&self) -> String {
        let a = &self.aggregates;
        let mut s = String::new();
        let _ = writeln!(s, "samples  {}", self.n_samples);
        let _ = writeln!(s, "{:<6} {:>9} {:>9}", "metric", "mean", "std");
        for (name, m, d) in [
            ("KLD", a.kld_mean, a.kld_std),
            ("SIM", a.sim_mean, a.sim_std),
            ("NSS", a.nss_mean, a.nss_std),
        ] {
            let _ = writeln!(s, "{name:<6} {m:>9.4} {d:>9.4}");
        }
        let _ = writeln!(
            s,
            "T_a@1 {:.1}  T_a@5 {:.1}  T_o@1 {:.1}  T_o@5 {:.1}",
            a.ta1, a.ta5, a.to1, a.to5
        );
        s
    }
}

/// Anything that maps a sample to a prediction. Implemented by the model.
pub trait Predictor {
    fn predict_sample(&self, sample: &Sample) -> Result<PredictionBundle>;
}

pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<PredictionBundle>,
}

/// Scores ego-only predictions against ground truth in sample order.
pub fn evaluate_split(
    predictor: &dyn Predictor,
    samples: &[Sample],
    actions: &Vocabulary,
    objects: &Vocabulary,
    cfg: &MetricConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(SeaError::Metric("no samples to evaluate".into()));
    }
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| s.gt_path.as_ref().map_or(true, |p| !p.is_file()))
        .map(|s| s.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(SeaError::Metric(format!(
            "{} samples lack a ground-truth heatmap: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let gt = s.load_gt()?.expect("checked above");
        let p = predictor.predict_sample(s)?;
        rows.push(SampleMetrics {
            id: s.id.clone(),
            action: actions.label(s.action_id).to_string(),
            object: objects.label(s.object_id).to_string(),
            pred_action: p.action.clone(),
            pred_object: p.object.clone(),
            caption: p.caption.clone(),
            kld: kld(&p.heatmap, &gt, cfg.epsilon)?,
            sim: sim(&p.heatmap, &gt)?,
            nss: nss(&p.heatmap, &gt)?,
        });
        predictions.push(p);
    }
    let col = |f: fn(&SampleMetrics) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    let (kld_mean, kld_std) = mean_std(&col(|r| r.kld));
    let (sim_mean, sim_std) = mean_std(&col(|r| r.sim));
    let (nss_mean, nss_std) = mean_std(&col(|r| r.nss));
    let a_rank: Vec<Vec<usize>> = predictions.iter().map(|p| p.action_ranking.clone()).collect();
    let o_rank: Vec<Vec<usize>> = predictions.iter().map(|p| p.object_ranking.clone()).collect();
    let a_lab: Vec<usize> = samples.iter().map(|s| s.action_id).collect();
    let o_lab: Vec<usize> = samples.iter().map(|s| s.object_id).collect();
    let aggregates = Aggregates {
        kld_mean,
        kld_std,
        sim_mean,
        sim_std,
        nss_mean,
        nss_std,
        ta1: topk_accuracy(&a_rank, &a_lab, 1)?,
        ta5: topk_accuracy(&a_rank, &a_lab, 5)?,
        to1: topk_accuracy(&o_rank, &o_lab, 1)?,
        to5: topk_accuracy(&o_rank, &o_lab, 5)?,
    };
    Ok(Evaluation {
        report: MetricReport {
            n_samples: rows.len(),
            aggregates,
            samples: rows,
        },
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedLabel {
    pub label: String,
    pub prob: f64,
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub caption: String,
    pub action_topk: Vec<RankedLabel>,
    pub object_topk: Vec<RankedLabel>,
    pub heatmap_path: String,
}

impl PredictionRecord {
    pub fn new(
        id: &str,
        p: &PredictionBundle,
        actions: &Vocabulary,
        objects: &Vocabulary,
        k: usize,
        heatmap_path: &str,
    ) -> Self {
        let top = |rank: &[usize], probs: &[f64], v: &Vocabulary| -> Vec<RankedLabel> {
            rank.iter()
                .take(k)
                .map(|&i| RankedLabel {
                    label: v.label(i).to_string(),
                    prob: probs[i],
                })
                .collect()
        };
        Self {
            id: id.to_string(),
            caption: p.caption.clone(),
            action_topk: top(&p.action_ranking, &p.action_probs, actions),
            object_topk: top(&p.object_ranking, &p.object_probs, objects),
            heatmap_path: heatmap_path.to_string(),
        }
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| SeaError::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| SeaError::Metric(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| SeaError::io(path, e))?;
    }
    Ok(())
}
