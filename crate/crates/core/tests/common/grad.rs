//! Finite-difference checks of the tape against every trainable piece.

use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sea_core::encoders::{Domain, FeatureSource};
use sea_core::explain::{ExplainConfig, ExplainVariant, SelfExplainFormer, TokenLayout};
use sea_core::fusion::{PffConfig, PixelFusionFormer};
use sea_core::losses::{
    graph_contrastive, graph_cosine_margin, graph_cross_entropy, graph_pooled_embedding, match_matrix,
};
use sea_core::model::TrainItem;
use sea_core::nn::Dropout;
use sea_core::tensor::{Graph, ParamStore, Var};

fn assert_clean((probed, errors): (usize, Vec<String>)) {
    assert!(probed > 0, "nothing was probed");
    assert!(errors.is_empty(), "{} of {probed} entries disagree:\n{}", errors.len(), errors.join("\n"));
}

fn pff(window: Option<usize>) -> (ParamStore, PixelFusionFormer) {
    let mut store = ParamStore::new();
    let cfg = PffConfig {
        layers: 2,
        heads: 2,
        model_dim: 8,
        ffn_dim: 12,
        window,
        ..PffConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = PixelFusionFormer::new(&mut store, cfg, 6, 10, &mut rng).unwrap();
    perturb(&mut store, 11, 0.2);
    (store, f)
}

pub fn pff_params_pure_stream() {
    let (store, f) = pff(None);
    let x = random_tensor(12, 6, 5);
    assert_clean(check_params(&store, 6, |g, s| {
        let xv = g.constant(x.clone());
        let y = f
            .forward(g, s, xv, FeatureSource::Pure, &[0..6, 6..12], (2, 3), &mut Dropout::eval())
            .unwrap();
        weighted_sum(g, y)
    }));
}

pub fn pff_params_multimodal_windowed() {
    let (store, f) = pff(Some(1));
    let x = random_tensor(12, 10, 6);
    assert_clean(check_params(&store, 6, |g, s| {
        let xv = g.constant(x.clone());
        let y = f
            .forward(g, s, xv, FeatureSource::Multimodal, &[0..6, 6..12], (2, 3), &mut Dropout::eval())
            .unwrap();
        weighted_sum(g, y)
    }));
}

pub fn pff_inputs() {
    let (store, f) = pff(Some(1));
    let x = random_tensor(12, 6, 7);
    assert_clean(check_inputs(&[x], |g, v| {
        let y = f
            .forward(g, &store, v[0], FeatureSource::Pure, &[0..6, 6..12], (2, 3), &mut Dropout::eval())
            .unwrap();
        weighted_sum(g, y)
    }));
}

fn explain(variant: ExplainVariant) -> (ParamStore, SelfExplainFormer) {
    let mut store = ParamStore::new();
    let cfg = ExplainConfig {
        variant,
        heads: 2,
        ffn_mult: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = SelfExplainFormer::new(&mut store, cfg, 8, 3, 4, &mut rng).unwrap();
    perturb(&mut store, 12, 0.2);
    (store, f)
}

fn layout() -> Vec<TokenLayout> {
    vec![
        TokenLayout { exo: 0..4, ego: 4..7 },
        TokenLayout { exo: 7..9, ego: 9..14 },
    ]
}

fn explain_scalar(f: &SelfExplainFormer, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
    let v = f.forward(g, s, x, &layout(), false, &mut Dropout::eval()).unwrap();
    let a = weighted_sum(g, v.action_logits);
    let o = weighted_sum(g, v.object_logits);
    let c = weighted_sum(g, v.f_cls);
    let ao = g.add(a, o);
    g.add(ao, c)
}

pub fn explain_transformer_params() {
    let (store, f) = explain(ExplainVariant::Transformer);
    let x = random_tensor(14, 8, 8);
    assert_clean(check_params(&store, 6, |g, s| {
        let xv = g.constant(x.clone());
        explain_scalar(&f, g, s, xv)
    }));
}

pub fn explain_transformer_inputs() {
    let (store, f) = explain(ExplainVariant::Transformer);
    let x = random_tensor(14, 8, 9);
    assert_clean(check_inputs(&[x], |g, v| explain_scalar(&f, g, &store, v[0])));
}

pub fn explain_pooling_variants() {
    for variant in [ExplainVariant::FfnSoftmax, ExplainVariant::ConcatAvgpool] {
        let (store, f) = explain(variant);
        let x = random_tensor(14, 8, 10);
        assert_clean(check_params(&store, 6, |g, s| {
            let xv = g.constant(x.clone());
            explain_scalar(&f, g, s, xv)
        }));
    }
}

pub fn pooled_embedding() {
    let feats = random_tensor(7, 5, 13);
    let weights = random_tensor(7, 1, 14).map(|v| v.abs());
    assert_clean(check_inputs(&[feats, weights], |g, v| {
        let e = graph_pooled_embedding(g, v[0], v[1], &[0..3, 3..7]);
        weighted_sum(g, e)
    }));
}

pub fn cosine_margin() {
    let a = random_tensor(3, 5, 15);
    let b = random_tensor(3, 5, 16);
    assert_clean(check_inputs(&[a, b], |g, v| graph_cosine_margin(g, v[0], v[1], 0.7)));
}

pub fn contrastive() {
    let visual = random_tensor(4, 6, 17);
    let text = random_tensor(4, 6, 18);
    let q = match_matrix(&[(0, 1), (1, 1), (0, 1), (2, 0)]);
    assert_clean(check_inputs(&[visual, text], |g, v| graph_contrastive(g, v[0], v[1], &q, 0.5, 1e-8).0));
}

pub fn cross_entropy() {
    let logits = random_tensor(3, 4, 19);
    assert_clean(check_inputs(&[logits], |g, v| graph_cross_entropy(g, v[0], &[2, 0, 3]).unwrap()));
}

pub fn whole_objective() {
    let cfg = tiny_config();
    let mut model = tiny_model(&cfg);
    perturb(&mut model.store, 21, 0.1);
    let feats: Vec<_> = (0..5)
        .map(|i| {
            let d = if i < 3 { Domain::Exo } else { Domain::Ego };
            model.encode_image(&random_image(16, 16, 30 + i), d).unwrap()
        })
        .collect();
    let batch = vec![
        TrainItem {
            id: "a",
            exo: vec![&feats[0], &feats[1]],
            ego: &feats[3],
            action_id: 0,
            object_id: 1,
        },
        TrainItem {
            id: "b",
            exo: vec![&feats[2]],
            ego: &feats[4],
            action_id: 1,
            object_id: 2,
        },
    ];
    assert_clean(check_params_in(&mut model, |m| &mut m.store, 3, |g, m| {
        m.batch_forward(g, &batch, &mut Dropout::eval()).unwrap().total
    }));
}

/// Every check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("pff_params_pure_stream", pff_params_pure_stream),
    ("pff_params_multimodal_windowed", pff_params_multimodal_windowed),
    ("pff_inputs", pff_inputs),
    ("explain_transformer_params", explain_transformer_params),
    ("explain_transformer_inputs", explain_transformer_inputs),
    ("explain_pooling_variants", explain_pooling_variants),
    ("pooled_embedding", pooled_embedding),
    ("cosine_margin", cosine_margin),
    ("contrastive", contrastive),
    ("cross_entropy", cross_entropy),
    ("whole_objective", whole_objective),
];
