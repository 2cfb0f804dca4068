//! Weakly-supervised training: SGD with momentum over the trainable
//! parameters, per-epoch reshuffling and exocentric redraws, periodic
//! evaluation, and checkpoints that restore bit-identically.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{sample_exocentric_paths, Dataset, Sample, VocabKind, Vocabulary};
use crate::encoders::Domain;
use crate::error::{Result, SeaError};
use crate::losses::LossComponents;
use crate::metrics::{evaluate_split, topk_accuracy, Aggregates, MetricReport};
use crate::model::{ImageFeatures, SeaModel, TrainItem};
use crate::nn::Dropout;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub k_exo: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 20,
            lr: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.9,
            schedule: LrSchedule::Constant,
            grad_clip: None,
            seed: 0,
            k_exo: 3,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SeaError::Config(format!("train.{m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.k_exo == 0 {
            return bad("k_exo must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0,1)");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one (epoch, stream) pair; streams separate shuffling, exocentric
/// draws and dropout.
pub fn derive_seed(seed: u64, epoch: usize, stream: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(epoch as u64)) ^ stream)
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const EXO_STREAM: u64 = 1 << 32;

pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }

    /// v ← μv + (g + λw); w ← w − lr·v
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, grads: &[(ParamId, Tensor)]) {
        for (id, g) in grads {
            let w = store.get_mut(*id);
            let v = &mut self.velocity[id.0];
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// Frozen-encoder outputs for every image a dataset touches.
#[derive(Default)]
pub struct FeatureCache {
    map: BTreeMap<PathBuf, ImageFeatures>,
}

impl FeatureCache {
    pub fn build(model: &SeaModel, ds: &Dataset) -> Result<Self> {
        let mut cache = Self::default();
        for s in &ds.samples {
            cache.insert(model, &s.ego_path, Domain::Ego)?;
        }
        for paths in ds.exo_pool.values() {
            for p in paths {
                cache.insert(model, p, Domain::Exo)?;
            }
        }
        Ok(cache)
    }

    fn insert(&mut self, model: &SeaModel, path: &Path, domain: Domain) -> Result<()> {
        if !self.map.contains_key(path) {
            let img = crate::data::load_rgb(path)?;
            self.map.insert(path.to_path_buf(), model.encode_image(&img, domain)?);
        }
        Ok(())
    }

    pub fn get(&self, path: &Path) -> Result<&ImageFeatures> {
        self.map
            .get(path)
            .ok_or_else(|| SeaError::Data(format!("{} was not encoded", path.display())))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub components: LossComponents,
    pub total: f64,
    pub grad_norm: f64,
}

/// One forward/backward/update on an assembled batch.
pub fn train_step(
    model: &mut SeaModel,
    opt: &mut Sgd,
    cfg: &TrainConfig,
    lr: f64,
    batch: &[TrainItem<'_>],
    dropout_seed: u64,
) -> Result<StepOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let p = model.pff.config.dropout;
    let mut dropout = if p > 0.0 { Dropout::train(p, &mut rng) } else { Dropout::eval() };
    let mut g = Graph::new();
    let vars = model.batch_forward(&mut g, batch, &mut dropout)?;
    let components = vars.components(&g);
    let total = g.value(vars.total).item();
    let ids = || batch.iter().map(|b| b.id.to_string()).collect::<Vec<_>>();
    if let Some(name) = components.first_non_finite().or((!total.is_finite()).then_some("total")) {
        return Err(SeaError::NonFinite {
            component: name.into(),
            batch_ids: ids(),
        });
    }
    let grads = g.backward(vars.total);
    let mut updates: Vec<(ParamId, Tensor)> = g
        .param_vars()
        .map(|(id, v)| (id, grads.get_or_zeros(&g, v)))
        .collect();
    updates.sort_by_key(|(id, _)| id.0);
    let norm = updates
        .iter()
        .flat_map(|(_, t)| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(SeaError::NonFinite {
            component: "gradient".into(),
            batch_ids: ids(),
        });
    }
    if let Some(clip) = cfg.grad_clip {
        if norm > clip {
            let s = clip / norm;
            for (_, t) in &mut updates {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    opt.step(&mut model.store, lr, &updates);
    Ok(StepOutcome {
        components,
        total,
        grad_norm: norm,
    })
}

/// Builds the training items for `indices` with exocentric draws for `epoch`.
pub fn assemble_batch<'a>(
    ds: &'a Dataset,
    cache: &'a FeatureCache,
    indices: &[usize],
    k_exo: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<TrainItem<'a>>> {
    indices
        .iter()
        .map(|&i| {
            let s: &Sample = &ds.samples[i];
            let exo_seed = derive_seed(seed, epoch, EXO_STREAM + i as u64);
            let exo = sample_exocentric_paths(ds, s, k_exo, exo_seed)?
                .iter()
                .map(|p| cache.get(p))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainItem {
                id: &s.id,
                exo,
                ego: cache.get(&s.ego_path)?,
                action_id: s.action_id,
                object_id: s.object_id,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossComponents,
    pub mean_total: f64,
}

pub struct Trainer {
    pub model: SeaModel,
    pub opt: Sgd,
    pub config: RunConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_kld: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct FitOutcome {
    pub history: Vec<EpochSummary>,
    pub evals: Vec<(usize, MetricReport)>,
    pub best_epoch: Option<usize>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Encoders, vocabularies and freshly initialized parameters for a config.
pub fn build_model(cfg: &RunConfig, actions: Vocabulary, objects: Vocabulary) -> Result<SeaModel> {
    cfg.validate()?;
    SeaModel::new(
        cfg.encoder.build()?,
        &cfg.model,
        actions,
        objects,
        cfg.affordance.clone(),
        cfg.loss.clone(),
        cfg.caption.clone(),
    )
}

impl Trainer {
    pub fn new(config: RunConfig, actions: Vocabulary, objects: Vocabulary) -> Result<Self> {
        let model = build_model(&config, actions, objects)?;
        let opt = Sgd::new(&model.store, config.train.momentum, config.train.weight_decay);
        Ok(Self {
            model,
            opt,
            config,
            epoch: 0,
            best_kld: None,
        })
    }

    /// Runs one epoch; returns the mean loss components.
    pub fn train_epoch(&mut self, ds: &Dataset, cache: &FeatureCache) -> Result<EpochSummary> {
        let cfg = self.config.train.clone();
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..ds.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, SHUFFLE_STREAM)));
        let lr = cfg.lr_at(epoch);
        let mut sum = LossComponents::default();
        let mut sum_total = 0.0;
        let mut steps = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = assemble_batch(ds, cache, chunk, cfg.k_exo, cfg.seed, epoch)?;
            let dseed = derive_seed(cfg.seed, epoch, DROPOUT_STREAM + ((b as u64) << 8));
            let out = train_step(&mut self.model, &mut self.opt, &cfg, lr, &batch, dseed)?;
            log::debug!(
                "epoch {epoch} step {b}: cos {:.4} con {:.4} ce_a {:.4} ce_o {:.4}",
                out.components.cos,
                out.components.con,
                out.components.ce_action,
                out.components.ce_object
            );
            sum.cos += out.components.cos;
            sum.con += out.components.con;
            sum.ce_action += out.components.ce_action;
            sum.ce_object += out.components.ce_object;
            sum_total += out.total;
            steps += 1;
        }
        self.epoch += 1;
        let n = steps.max(1) as f64;
        Ok(EpochSummary {
            epoch: self.epoch,
            steps,
            mean: LossComponents {
                cos: sum.cos / n,
                con: sum.con / n,
                ce_action: sum.ce_action / n,
                ce_object: sum.ce_object / n,
            },
            mean_total: sum_total / n,
        })
    }

    /// Trains until `config.train.epochs` epochs are complete. Checkpoints go
    /// to `run_dir` when given. On a non-finite loss the last checkpoint is
    /// kept and an `abort.json` diagnostic is written.
    pub fn fit(&mut self, train: &Dataset, eval: Option<&Dataset>, run_dir: Option<&Path>) -> Result<FitOutcome> {
        check_vocab(&self.model, train)?;
        if let Some(e) = eval {
            check_vocab(&self.model, e)?;
        }
        let cache = FeatureCache::build(&self.model, train)?;
        let mut outcome = FitOutcome::default();
        while self.epoch < self.config.train.epochs {
            let summary = match self.train_epoch(train, &cache) {
                Ok(s) => s,
                Err(e) => {
                    if let (Some(dir), SeaError::NonFinite { component, batch_ids }) = (run_dir, &e) {
                        let diag = serde_json::json!({
                            "epoch": self.epoch,
                            "component": component,
                            "batch_ids": batch_ids,
                        });
                        let path = dir.join("abort.json");
                        fs::write(&path, diag.to_string()).map_err(|err| SeaError::io(&path, err))?;
                    }
                    return Err(e);
                }
            };
            log::info!(
                "epoch {}/{}: total {:.4} (cos {:.4} con {:.4} ce_a {:.4} ce_o {:.4})",
                summary.epoch,
                self.config.train.epochs,
                summary.mean_total,
                summary.mean.cos,
                summary.mean.con,
                summary.mean.ce_action,
                summary.mean.ce_object
            );
            outcome.history.push(summary);
            let mut aggregates = None;
            if let Some(e) = eval {
                if self.epoch % self.config.train.eval_every == 0 || self.epoch == self.config.train.epochs {
                    let report = evaluate_split(&self.model, &e.samples, &e.actions, &e.objects, &self.config.metrics)?.report;
                    log::info!(
                        "eval epoch {}: KLD {:.4} SIM {:.4} NSS {:.4} T_a@1 {:.1} T_o@1 {:.1}",
                        self.epoch,
                        report.aggregates.kld_mean,
                        report.aggregates.sim_mean,
                        report.aggregates.nss_mean,
                        report.aggregates.ta1,
                        report.aggregates.to1
                    );
                    let kld = report.aggregates.kld_mean;
                    if self.best_kld.map_or(true, |b| kld < b) {
                        self.best_kld = Some(kld);
                        outcome.best_epoch = Some(self.epoch);
                        if let Some(dir) = run_dir {
                            save_checkpoint(&dir.join(BEST_CHECKPOINT), self, Some(&report.aggregates))?;
                        }
                    }
                    aggregates = Some(report.aggregates.clone());
                    outcome.evals.push((self.epoch, report));
                }
            }
            if let Some(dir) = run_dir {
                save_checkpoint(&dir.join(LAST_CHECKPOINT), self, aggregates.as_ref())?;
            }
        }
        if eval.is_none() {
            if let Some(dir) = run_dir {
                fs::copy(dir.join(LAST_CHECKPOINT), dir.join(BEST_CHECKPOINT))
                    .map_err(|e| SeaError::io(dir.join(BEST_CHECKPOINT), e))?;
                let (from, to) = (sidecar_path(&dir.join(LAST_CHECKPOINT)), sidecar_path(&dir.join(BEST_CHECKPOINT)));
                fs::copy(&from, &to).map_err(|e| SeaError::io(&to, e))?;
            }
        }
        Ok(outcome)
    }
}

pub fn check_vocab(model: &SeaModel, ds: &Dataset) -> Result<()> {
    if model.actions != ds.actions || model.objects != ds.objects {
        return Err(SeaError::Checkpoint(format!(
            "vocabulary mismatch: model has {} actions / {} objects, dataset {} / {}",
            model.actions.len(),
            model.objects.len(),
            ds.actions.len(),
            ds.objects.len()
        )));
    }
    Ok(())
}

/// Ego-only top-1 accuracy on a split that may lack ground truth (e.g. train).
pub fn classification_accuracy(model: &SeaModel, ds: &Dataset) -> Result<(f64, f64)> {
    let cache = FeatureCache::build(model, ds)?;
    let mut a_rank = Vec::with_capacity(ds.len());
    let mut o_rank = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let (out, _) = model.explain_image(cache.get(&s.ego_path)?, &[])?;
        a_rank.push(out.action_ranking());
        o_rank.push(out.object_ranking());
    }
    let a: Vec<usize> = ds.samples.iter().map(|s| s.action_id).collect();
    let o: Vec<usize> = ds.samples.iter().map(|s| s.object_id).collect();
    Ok((topk_accuracy(&a_rank, &a, 1)?, topk_accuracy(&o_rank, &o, 1)?))
}

// Checkpoint blob: magic, u32 tensor count, then per tensor a u32 name length,
// the UTF-8 name, u32 rows, u32 cols, rows·cols f64 weights and as many f64
// momentum values, all little-endian.
const CKPT_MAGIC: &[u8; 8] = b"SEACKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    /// Completed epochs.
    pub epoch: usize,
    /// Every random stream is derived from (seed, epoch).
    pub seed: u64,
    pub config: RunConfig,
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub param_checksum: String,
    pub encoder_checksum: String,
    pub best_kld: Option<f64>,
    pub metrics: Option<Aggregates>,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer, metrics: Option<&Aggregates>) -> Result<()> {
    let store = &trainer.model.store;
    let mut buf = Vec::with_capacity(store.num_scalars() * 16 + 64);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for ((_, name, t), v) in store.iter().zip(trainer.opt.velocity()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for x in t.data().iter().chain(v.data()) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        format: 1,
        epoch: trainer.epoch,
        seed: trainer.config.train.seed,
        config: trainer.config.clone(),
        actions: trainer.model.actions.labels().to_vec(),
        objects: trainer.model.objects.labels().to_vec(),
        param_checksum: store.checksum(),
        encoder_checksum: trainer.model.encoders.checksum(),
        best_kld: trainer.best_kld,
        metrics: metrics.cloned(),
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| SeaError::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| SeaError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| SeaError::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| SeaError::Checkpoint(e.to_string()))?;
    fs::write(&side, json + "\n").map_err(|e| SeaError::io(&side, e))
}

struct Blob {
    tensors: Vec<(String, Tensor, Tensor)>,
}

fn read_blob(path: &Path) -> Result<Blob> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| SeaError::io(path, e))?;
    let bad = || SeaError::Checkpoint(format!("{} is truncated or corrupt", path.display()));
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(bad)?;
        at += n;
        Ok(s)
    };
    if take(8)? != CKPT_MAGIC {
        return Err(SeaError::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let count = u32_at(take(4)?);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad())?;
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let mut read = |n: usize| -> Result<Vec<f64>> {
            Ok(take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let w = read(rows * cols)?;
        let v = read(rows * cols)?;
        tensors.push((name, Tensor::new(rows, cols, w), Tensor::new(rows, cols, v)));
    }
    if at != bytes.len() {
        return Err(bad());
    }
    Ok(Blob { tensors })
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| SeaError::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| SeaError::Checkpoint(format!("{}: {e}", side.display())))
}

/// Rebuilds a trainer (model, optimizer state, epoch) from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let meta = read_checkpoint_meta(path)?;
    let actions = Vocabulary::new(VocabKind::Action, meta.actions.clone())?;
    let objects = Vocabulary::new(VocabKind::Object, meta.objects.clone())?;
    let mut trainer = Trainer::new(meta.config.clone(), actions, objects)?;
    if trainer.model.encoders.checksum() != meta.encoder_checksum {
        return Err(SeaError::Checkpoint("encoder weights differ from the ones used in training".into()));
    }
    let blob = read_blob(path)?;
    if blob.tensors.len() != trainer.model.store.len() {
        return Err(SeaError::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            blob.tensors.len(),
            trainer.model.store.len()
        )));
    }
    let mut velocity = Vec::with_capacity(blob.tensors.len());
    for (name, w, v) in blob.tensors {
        let id = trainer
            .model
            .store
            .id_of(&name)
            .ok_or_else(|| SeaError::Checkpoint(format!("unknown parameter {name}")))?;
        let slot = trainer.model.store.get_mut(id);
        if slot.shape() != w.shape() {
            return Err(SeaError::Checkpoint(format!(
                "parameter {name} has shape {:?}, model expects {:?}",
                w.shape(),
                slot.shape()
            )));
        }
        *slot = w;
        velocity.push((id, v));
    }
    velocity.sort_by_key(|(id, _)| id.0);
    trainer.opt.velocity = velocity.into_iter().map(|(_, v)| v).collect();
    if trainer.model.store.checksum() != meta.param_checksum {
        return Err(SeaError::Checkpoint("parameter checksum mismatch".into()));
    }
    trainer.epoch = meta.epoch;
    trainer.best_kld = meta.best_kld;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guards_reject_bad_settings() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { eval_every: 0, ..ok.clone() },
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(SeaError::Config(_))));
        }
    }

    #[test]
    fn derived_seeds_differ_by_epoch_and_stream() {
        let a = derive_seed(7, 0, SHUFFLE_STREAM);
        assert_eq!(a, derive_seed(7, 0, SHUFFLE_STREAM));
        assert_ne!(a, derive_seed(7, 1, SHUFFLE_STREAM));
        assert_ne!(a, derive_seed(7, 0, DROPOUT_STREAM));
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row_vector(vec![1.0, -2.0]));
        let mut opt = Sgd::new(&store, 0.9, 0.1);
        let g = Tensor::row_vector(vec![0.5, 0.5]);
        opt.step(&mut store, 0.1, &[(id, g.clone())]);
        // v = g + 0.1w = (0.6, 0.3); w -= 0.1v
        assert!((store.get(id).data()[0] - 0.94).abs() < 1e-12);
        assert!((store.get(id).data()[1] + 2.03).abs() < 1e-12);
        opt.step(&mut store, 0.1, &[(id, g)]);
        let v0 = 0.9 * 0.6 + 0.5 + 0.1 * 0.94;
        assert!((store.get(id).data()[0] - (0.94 - 0.1 * v0)).abs() < 1e-12);
    }
}
