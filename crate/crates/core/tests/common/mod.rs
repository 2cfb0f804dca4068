//! Helpers shared by the integration tests.

#![allow(dead_code)]

pub mod grad;
pub mod invariants;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sea_core::config::RunConfig;
use sea_core::data::{VocabKind, Vocabulary};
use sea_core::model::SeaModel;
use sea_core::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use sea_core::trainer::build_model;

/// Relative tolerance of the finite-difference suite.
pub const FD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

/// Returns an error line for each entry where analytic and numeric
/// derivatives disagree beyond `FD_TOL`.
fn compare(name: &str, i: usize, analytic: f64, numeric: f64, out: &mut Vec<String>) {
    let scale = analytic.abs().max(numeric.abs());
    if (analytic - numeric).abs() > FD_TOL * scale + 1e-7 {
        out.push(format!("{name}[{i}]: analytic {analytic:.8e} numeric {numeric:.8e}"));
    }
}

/// Spread of indices to probe in a tensor of `n` values.
fn probe_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|k| k * (n - 1) / (max - 1)).collect()
}

/// Central differences of a scalar graph with respect to every parameter it
/// touches. At most `max_per_param` entries of each tensor are probed.
pub fn check_params(
    store: &ParamStore,
    max_per_param: usize,
    build: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> (usize, Vec<String>) {
    let mut owned = store.clone();
    check_params_in(&mut owned, |s| s, max_per_param, |g, s| build(g, s))
}

/// Like [`check_params`] for a value that owns its parameter store.
pub fn check_params_in<T>(
    owner: &mut T,
    store: impl Fn(&mut T) -> &mut ParamStore,
    max_per_param: usize,
    build: impl Fn(&mut Graph, &T) -> Var,
) -> (usize, Vec<String>) {
    let mut g = Graph::new();
    let root = build(&mut g, owner);
    let grads = g.backward(root);
    let mut touched: Vec<(ParamId, Tensor)> =
        g.param_vars().map(|(id, v)| (id, grads.get_or_zeros(&g, v))).collect();
    touched.sort_by_key(|(id, _)| id.0);
    let eval = |o: &T| {
        let mut g = Graph::new();
        let r = build(&mut g, o);
        g.value(r).item()
    };
    let mut errors = Vec::new();
    let mut probed = 0;
    for (id, analytic) in &touched {
        let name = store(owner).name(*id).to_string();
        for i in probe_indices(analytic.len(), max_per_param) {
            let x = store(owner).get(*id).data()[i];
            store(owner).get_mut(*id).data_mut()[i] = x + FD_STEP;
            let up = eval(owner);
            store(owner).get_mut(*id).data_mut()[i] = x - FD_STEP;
            let down = eval(owner);
            store(owner).get_mut(*id).data_mut()[i] = x;
            compare(&name, i, analytic.data()[i], (up - down) / (2.0 * FD_STEP), &mut errors);
            probed += 1;
        }
    }
    (probed, errors)
}

/// Central differences of a scalar graph with respect to constant inputs.
pub fn check_inputs(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> (usize, Vec<String>) {
    let run = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let r = build(&mut g, &vars);
        (g, vars, r)
    };
    let (g, vars, root) = run(inputs);
    let grads = g.backward(root);
    let mut errors = Vec::new();
    let mut probed = 0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, vars[k]);
        for i in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += FD_STEP;
            let (gu, _, ru) = run(&xs);
            xs[k].data_mut()[i] -= 2.0 * FD_STEP;
            let (gd, _, rd) = run(&xs);
            let num = (gu.value(ru).item() - gd.value(rd).item()) / (2.0 * FD_STEP);
            compare(&format!("input{k}"), i, analytic.data()[i], num, &mut errors);
            probed += 1;
        }
    }
    (probed, errors)
}

/// Fixed weights so the scalar `sum(w * y)` exercises every output entry.
pub fn weighted_sum(g: &mut Graph, y: Var) -> Var {
    let (r, c) = g.shape(y);
    let w = Tensor::new(r, c, (0..r * c).map(|i| 0.5 + ((i * 7) % 11) as f64 / 10.0).collect());
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum_all(p)
}

/// Moves every parameter off its initialization, so zero-initialized gates
/// and heads carry gradient to the rest of the network.
pub fn perturb(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += std * (rng.gen::<f64>() * 2.0 - 1.0);
        }
    }
}

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
}

pub fn random_image(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

pub fn vocabularies(actions: &[&str], objects: &[&str]) -> (Vocabulary, Vocabulary) {
    let v = |k, l: &[&str]| Vocabulary::new(k, l.iter().map(|s| s.to_string()).collect()).unwrap();
    (v(VocabKind::Action, actions), v(VocabKind::Object, objects))
}

/// A very small configuration: 16×16 inputs, 8-pixel patches, dim 8.
pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml_str(
        r#"
        [encoder]
        patch = 8
        input_size = [16, 16]
        [encoder.pure]
        dim = 8
        [encoder.multimodal]
        dim = 8
        [model.pff]
        layers = 1
        heads = 2
        model_dim = 8
        ffn_dim = 16
        [model.explain]
        heads = 2
        ffn_mult = 2
        "#,
    )
    .unwrap()
}

pub fn tiny_model(cfg: &RunConfig) -> SeaModel {
    let (a, o) = vocabularies(&["hold", "push"], &["circle", "square", "star"]);
    build_model(cfg, a, o).unwrap()
}

/// The configuration the end-to-end criterion is measured with.
pub fn acceptance_config(data_root: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml_str(ACCEPTANCE_TOML).unwrap();
    cfg.data.root = Some(data_root.to_path_buf());
    cfg
}

pub const ACCEPTANCE_TOML: &str = include_str!("../../configs/synthetic.toml");
