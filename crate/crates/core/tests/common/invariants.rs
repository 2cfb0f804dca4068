//! Structural properties of the model that hold regardless of training.

use super::*;
use sea_core::affordance::{normalize_and_filter, Heatmap, Stage, ThresholdConfig};
use sea_core::encoders::Domain;
use sea_core::explain::TokenLayout;
use sea_core::grid::Grid;
use sea_core::model::{ImageFeatures, TrainItem};
use sea_core::nn::Dropout;
use sea_core::tensor::Graph;
use sea_core::trainer::{train_step, Sgd, TrainConfig};

fn features(model: &sea_core::model::SeaModel, n: usize, domain: Domain, seed: u64) -> Vec<ImageFeatures> {
    (0..n)
        .map(|i| model.encode_image(&random_image(16, 16, seed + i as u64), domain).unwrap())
        .collect()
}

pub fn frozen_backbones_survive_a_hundred_steps() {
    let cfg = tiny_config();
    let mut model = tiny_model(&cfg);
    let exo = features(&model, 4, Domain::Exo, 100);
    let ego = features(&model, 4, Domain::Ego, 200);
    let backbone = model.encoders.checksum();
    let trainable = model.store.checksum();
    let probe = random_image(16, 16, 300);
    let before = model.encode_image(&probe, Domain::Ego).unwrap();

    let train = TrainConfig {
        lr: 0.05,
        grad_clip: Some(1.0),
        ..TrainConfig::default()
    };
    let mut opt = Sgd::new(&model.store, train.momentum, train.weight_decay);
    for step in 0..100 {
        let batch: Vec<TrainItem> = (0..4)
            .map(|i| TrainItem {
                id: "s",
                exo: vec![&exo[(i + step) % 4]],
                ego: &ego[i],
                action_id: i % 2,
                object_id: i % 3,
            })
            .collect();
        train_step(&mut model, &mut opt, &train, train.lr, &batch, step as u64).unwrap();
    }

    assert_eq!(model.encoders.checksum(), backbone);
    assert_eq!(model.encode_image(&probe, Domain::Ego).unwrap(), before);
    assert_ne!(model.store.checksum(), trainable, "trainable parameters never moved");
}

pub fn domain_masked_attention_has_no_cross_gradients() {
    let cfg = tiny_config();
    let model = tiny_model(&cfg);
    let layout = vec![
        TokenLayout { exo: 0..3, ego: 3..5 },
        TokenLayout { exo: 5..9, ego: 9..12 },
    ];
    let x0 = random_tensor(12, 8, 42);
    // Output rows of one segment must depend on that segment's inputs only.
    let segments = [0..3, 3..5, 5..9, 9..12];
    for (k, seg) in segments.iter().enumerate() {
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = model
            .explain
            .self_attend(&mut g, &model.store, x, &layout, &mut Dropout::eval())
            .unwrap();
        let rows = g.slice_rows(y, seg.clone());
        let s = weighted_sum(&mut g, rows);
        let dx = g.backward(s).get_or_zeros(&g, x);
        for r in 0..12 {
            let norm: f64 = dx.row(r).iter().map(|v| v.abs()).sum();
            if seg.contains(&r) {
                assert!(norm > 0.0, "segment {k} row {r} has no gradient");
            } else {
                assert_eq!(norm, 0.0, "segment {k} leaks gradient into row {r}");
            }
        }
    }
}

pub fn one_fusion_former_serves_all_four_streams() {
    let cfg = tiny_config();
    let model = tiny_model(&cfg);
    let names: Vec<&str> = model
        .store
        .iter()
        .map(|(_, n, _)| n)
        .filter(|n| n.starts_with("pff."))
        .collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| !n.contains("exo") && !n.contains("ego")), "{names:?}");

    // The same map fuses identically whatever domain it is labelled with.
    let f = &features(&model, 1, Domain::Exo, 7)[0];
    let mut as_ego = f.clone();
    as_ego.pure.domain = Domain::Ego;
    as_ego.multimodal.domain = Domain::Ego;
    for (a, b) in [(&f.pure, &as_ego.pure), (&f.multimodal, &as_ego.multimodal)] {
        let fa = model.pff.fuse(&model.store, a).unwrap();
        let fb = model.pff.fuse(&model.store, b).unwrap();
        assert_eq!(fa.data, fb.data);
    }

    // Every stream of a batch sends gradient into the same block weights.
    let mut model = model;
    perturb(&mut model.store, 3, 0.1);
    let exo = features(&model, 2, Domain::Exo, 10);
    let ego = features(&model, 2, Domain::Ego, 20);
    let batch: Vec<TrainItem> = (0..2)
        .map(|i| TrainItem {
            id: "s",
            exo: vec![&exo[i]],
            ego: &ego[i],
            action_id: i,
            object_id: i,
        })
        .collect();
    let mut g = Graph::new();
    let v = model.batch_forward(&mut g, &batch, &mut Dropout::eval()).unwrap();
    let grads = g.backward(v.total);
    let touched: Vec<String> = g
        .param_vars()
        .filter(|(_, var)| grads.get(*var).is_some_and(|t| t.data().iter().any(|x| *x != 0.0)))
        .map(|(id, _)| model.store.name(id).to_string())
        .collect();
    assert!(touched.iter().any(|n| n.starts_with("pff.block0.")), "{touched:?}");
}

pub fn final_heatmaps_are_unit_range_and_shrink_with_beta() {
    let cfg = tiny_config();
    let model = tiny_model(&cfg);
    for seed in 0..5 {
        let img = random_image(40, 24, seed);
        let p = model.predict(&img, &[]).unwrap();
        assert_eq!(p.heatmap.shape(), (24, 40));
        assert!(p.heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    let raw = Heatmap {
        grid: Grid::new(4, 5, random_tensor(4, 5, 77).into_data()).unwrap(),
        stage: Stage::Raw,
        domain: Domain::Ego,
    };
    let mut last = usize::MAX;
    for beta in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
        let cfg = ThresholdConfig {
            beta,
            ..ThresholdConfig::default()
        };
        let h = normalize_and_filter(&raw, &cfg).unwrap();
        assert!(h.grid.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let support = h.grid.data().iter().filter(|v| **v > 0.0).count();
        assert!(support <= last, "support grew at beta {beta}");
        last = support;
    }
}

/// Every check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("frozen_backbones_survive_a_hundred_steps", frozen_backbones_survive_a_hundred_steps),
    ("domain_masked_attention_has_no_cross_gradients", domain_masked_attention_has_no_cross_gradients),
    ("one_fusion_former_serves_all_four_streams", one_fusion_former_serves_all_four_streams),
    ("final_heatmaps_are_unit_range_and_shrink_with_beta", final_heatmaps_are_unit_range_and_shrink_with_beta),
];
