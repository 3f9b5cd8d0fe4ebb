mod common;

use dpm_core::eval::{last_touch_histogram, roc_curve, score_customer};
use dpm_core::rng::indexed_stream;
use dpm_core::{CustomerHistory, Dataset, FilterConfig, ModelParams};
use proptest::prelude::*;
use rand::Rng;

fn one_channel(id: &str, r: &[u32], m: &[u32], y: &[u8]) -> CustomerHistory {
    CustomerHistory::new(
        id,
        r.iter().map(|&v| vec![v]).collect(),
        m.iter().map(|&v| vec![v]).collect(),
        y.to_vec(),
    )
    .unwrap()
}

fn config(p: usize, seed: u64) -> FilterConfig {
    FilterConfig {
        particle_count: p,
        seed,
        ..FilterConfig::default()
    }
}

#[test]
fn dominant_negative_offset_gives_tiny_scores() {
    let params = ModelParams::new(-12.0, 0.5, vec![0.0], vec![0.0]).unwrap();
    let h = one_channel("a", &[1, 2, 0, 1], &[0, 1, 1, 0], &[0, 0, 0, 0]);
    let scores = score_customer(&params, &h, &config(1000, 0)).unwrap();
    assert!(scores.iter().all(|&s| s > 0.0 && s < 1e-4), "{scores:?}");
}

#[test]
fn scores_ignore_later_labels() {
    let params = ModelParams::new(-2.0, 0.6, vec![0.7], vec![0.4]).unwrap();
    let r = [1, 0, 0, 2, 0, 1];
    let m = [0, 1, 0, 0, 1, 0];
    let quiet = one_channel("same", &r, &m, &[0; 6]);
    let bought = one_channel("same", &r, &m, &[0, 0, 0, 0, 0, 1]);
    let prefix = one_channel("same", &r[..3], &m[..3], &[0; 3]);
    let cfg = config(500, 4);
    let a = score_customer(&params, &quiet, &cfg).unwrap();
    let b = score_customer(&params, &bought, &cfg).unwrap();
    let c = score_customer(&params, &prefix, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[..3], c[..]);
}

#[test]
fn three_day_scores_match_quadrature() {
    let params = ModelParams::new(-1.5, 0.7, vec![1.0], vec![0.6]).unwrap();
    let h = one_channel("q", &[2, 0, 1], &[0, 1, 0], &[0, 0, 1]);
    let oracle = common::grid_filter(&params, &h, -15.0, 15.0, 4001);
    let runs: Vec<Vec<f64>> = (0..20).map(|s| score_customer(&params, &h, &config(10_000, s)).unwrap()).collect();
    for t in 0..3 {
        let at_t: Vec<f64> = runs.iter().map(|r| r[t]).collect();
        let mean = at_t.iter().sum::<f64>() / 20.0;
        let sd = (at_t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
        // Day 0 only averages the prior, so its spread can be tiny.
        let tol = (3.0 * sd).max(1e-12);
        assert!((runs[0][t] - oracle.predictive[t]).abs() < tol, "day {t}: {} vs {}", runs[0][t], oracle.predictive[t]);
    }
}

#[test]
fn unrelated_scores_have_auc_near_one_half() {
    let mut rng = indexed_stream(21, "null-auc", 0);
    let scores: Vec<f64> = (0..100_000).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..100_000).map(|_| u8::from(rng.random_bool(0.3))).collect();
    let auc = roc_curve(&scores, &labels).unwrap().auc;
    assert!((auc - 0.5).abs() < 0.01, "{auc}");
}

#[test]
fn last_touch_edge_cases() {
    let data = Dataset::new(vec![
        one_channel("touched-on-the-day", &[0, 0, 1], &[0, 0, 0], &[0, 0, 1]),
        one_channel("never", &[0, 0], &[0, 0], &[0, 1]),
    ])
    .unwrap();
    let hist = last_touch_histogram(&data, 4);
    assert_eq!(hist.r[0], [1, 0, 0, 0, 0]);
    assert_eq!(hist.m[0], [0; 5]);
}

fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    prop::collection::vec((0u8..20, any::<bool>()), 2..60)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
        .prop_map(|v| {
            let scores = v.iter().map(|x| f64::from(x.0) / 20.0).collect();
            let labels = v.iter().map(|x| u8::from(x.1)).collect();
            (scores, labels)
        })
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_transforms((scores, labels) in labelled()) {
        let base = roc_curve(&scores, &labels).unwrap().auc;
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s - 1.0).exp()).collect();
        prop_assert_eq!(roc_curve(&squashed, &labels).unwrap().auc, base);
    }

    #[test]
    fn roc_points_climb_from_origin_to_corner((scores, labels) in labelled()) {
        let roc = roc_curve(&scores, &labels).unwrap();
        let first = &roc.points[0];
        let last = roc.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in roc.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }
}
