//! Randomized invariants of the metrics, thresholding and caption helpers.

use proptest::prelude::*;
use sea_core::affordance::{normalize_and_filter, Heatmap, Stage, ThresholdConfig};
use sea_core::encoders::Domain;
use sea_core::explain::{parse_caption, ranking, render_caption, DEFAULT_TEMPLATE};
use sea_core::grid::Grid;
use sea_core::losses::{classification_loss, contrastive_loss, cosine_margin_loss, match_matrix};
use sea_core::metrics::{kld, nss, sim, topk_accuracy};
use sea_core::tensor::{softmax_in_place, Tensor};

fn grid(max: usize) -> impl Strategy<Value = Grid> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        prop::collection::vec(0.0f64..1.0, h * w).prop_map(move |d| Grid::new(h, w, d).unwrap())
    })
}

/// Two maps of one shape with at least one positive ground-truth cell.
fn pair(max: usize) -> impl Strategy<Value = (Grid, Grid)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0f64..1.0, h * w),
            prop::collection::vec(0.0f64..1.0, h * w),
            0..h * w,
        )
            .prop_map(move |(p, mut g, hot)| {
                g[hot] += 0.5;
                (Grid::new(h, w, p).unwrap(), Grid::new(h, w, g).unwrap())
            })
    })
}

fn label() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

proptest! {
    #[test]
    fn sim_is_a_bounded_overlap((p, g) in pair(6)) {
        let s = sim(&p, &g).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&s));
        prop_assert!((sim(&g, &g).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kld_is_nonnegative_and_zero_on_itself((p, g) in pair(6)) {
        prop_assert!(kld(&p, &g, 1e-12).unwrap() > -1e-9);
        prop_assert!(kld(&g, &g, 1e-12).unwrap().abs() < 1e-6);
    }

    #[test]
    fn nss_ignores_positive_affine_changes((p, g) in pair(6), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let q = Grid::new(p.height(), p.width(), p.data().iter().map(|v| a * v + b).collect()).unwrap();
        prop_assert!((nss(&p, &g).unwrap() - nss(&q, &g).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn sum_normalized_metrics_ignore_prediction_scale((p, g) in pair(6), a in 0.1f64..10.0) {
        let q = Grid::new(p.height(), p.width(), p.data().iter().map(|v| a * v).collect()).unwrap();
        prop_assert!((sim(&p, &g).unwrap() - sim(&q, &g).unwrap()).abs() < 1e-9);
        prop_assert!((kld(&p, &g, 1e-12).unwrap() - kld(&q, &g, 1e-12).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn topk_grows_with_k(scores in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 1..20), seed in 0usize..5) {
        let rankings: Vec<Vec<usize>> = scores.iter().map(|s| ranking(s)).collect();
        let labels: Vec<usize> = (0..rankings.len()).map(|i| (i + seed) % 5).collect();
        let mut last = 0.0;
        for k in 1..=5 {
            let acc = topk_accuracy(&rankings, &labels, k).unwrap();
            prop_assert!(acc >= last);
            last = acc;
        }
        prop_assert_eq!(last, 100.0);
    }

    #[test]
    fn ranking_orders_scores(scores in prop::collection::vec(-3.0f64..3.0, 1..10)) {
        let r = ranking(&scores);
        let mut sorted = r.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..scores.len()).collect::<Vec<_>>());
        prop_assert!(r.windows(2).all(|w| scores[w[0]] >= scores[w[1]]));
    }

    #[test]
    fn final_heatmap_range_and_beta_support(g in grid(8), b1 in 0.0f64..1.0, b2 in 0.0f64..1.0) {
        let raw = Heatmap { grid: g, stage: Stage::Raw, domain: Domain::Ego };
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let at = |beta| normalize_and_filter(&raw, &ThresholdConfig { beta, ..ThresholdConfig::default() }).unwrap();
        let (a, b) = (at(lo), at(hi));
        prop_assert!(a.grid.data().iter().chain(b.grid.data()).all(|v| (0.0..=1.0).contains(v)));
        for (x, y) in a.grid.data().iter().zip(b.grid.data()) {
            prop_assert!(*y == 0.0 || *x == *y, "support grew");
        }
    }

    #[test]
    fn captions_round_trip(a in label(), o in label()) {
        let c = render_caption(&a, &o, DEFAULT_TEMPLATE).unwrap();
        prop_assert_eq!(parse_caption(&c, DEFAULT_TEMPLATE).unwrap(), (a, o));
    }

    #[test]
    fn cosine_margin_stays_in_range(a in prop::collection::vec(-1.0f64..1.0, 4), b in prop::collection::vec(-1.0f64..1.0, 4), alpha in 0.0f64..1.0) {
        let l = cosine_margin_loss(&a, &b, alpha);
        prop_assert!((0.0..=2.0 - alpha + 1e-12).contains(&l));
    }

    #[test]
    fn classification_loss_is_positive_and_shift_invariant(logits in prop::collection::vec(-5.0f64..5.0, 2..8), shift in -10.0f64..10.0) {
        let l = classification_loss(&logits, 0).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        prop_assert!(l > 0.0);
        prop_assert!((l - classification_loss(&shifted, 0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn contrastive_loss_is_finite(logits in (2usize..6).prop_flat_map(|n| prop::collection::vec(-4.0f64..4.0, n * n))) {
        let n = (logits.len() as f64).sqrt() as usize;
        let mut p = logits;
        p.chunks_mut(n).for_each(softmax_in_place);
        let keys: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let l = contrastive_loss(&Tensor::new(n, n, p), &match_matrix(&keys), 1e-8).unwrap();
        prop_assert!(l.is_finite());
    }

    #[test]
    fn bilinear_resize_keeps_constants(h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12, c in -2.0f64..2.0) {
        let g = Grid::filled(h, w, c).resize_bilinear(oh, ow);
        prop_assert_eq!(g.shape(), (oh, ow));
        prop_assert!(g.data().iter().all(|v| (v - c).abs() < 1e-12));
    }
}
