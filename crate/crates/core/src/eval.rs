//! Scoring, ROC analysis and the last-touch diagnostic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_lagged_design, predict_design, GlmFit};
use crate::error::{check_dim, DpmError, Result};
use crate::filter::{run_filter, FilterConfig};
use crate::model::{CustomerHistory, Dataset, ModelParams};
use crate::rng::customer_stream;

/// One-step-ahead purchase probabilities: entry `t` is
/// `P(y[t] = 1 | y[..t], touches before day t)`, the particle average of
/// `sigmoid(s[t])` before `y[t]` is seen.
pub fn score_customer(
    params: &ModelParams,
    history: &CustomerHistory,
    config: &FilterConfig,
) -> Result<Vec<f64>> {
    let mut rng = customer_stream(config.seed, "score", history.id());
    run_filter(params, history, config, &mut rng).map(|run| run.predictive)
}

/// [`score_customer`] for every customer, in dataset order.
pub fn score_dataset(
    params: &ModelParams,
    dataset: &Dataset,
    config: &FilterConfig,
) -> Result<Vec<Vec<f64>>> {
    dataset
        .customers()
        .par_iter()
        .map(|h| score_customer(params, h, config))
        .collect()
}

/// Scores and labels pooled over customer-days.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Pooled {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Pools per-day scores over label days `>= min_label_day` (0-based).
pub fn pool_scores(dataset: &Dataset, per_day: &[Vec<f64>], min_label_day: usize) -> Result<Pooled> {
    check_dim("scored customers", dataset.len(), per_day.len())?;
    let mut pooled = Pooled::default();
    for (h, scores) in dataset.customers().iter().zip(per_day) {
        check_dim("scored days", h.horizon(), scores.len())?;
        let start = min_label_day.min(scores.len());
        pooled.scores.extend_from_slice(&scores[start..]);
        pooled.labels.extend_from_slice(&h.y()[start..]);
    }
    Ok(pooled)
}

/// Model scores on the label days shared by every lagged design up to
/// `max_lag`: 0-based days `max_lag + 1 ..= T - 1`.
pub fn pooled_dpm(
    params: &ModelParams,
    dataset: &Dataset,
    config: &FilterConfig,
    max_lag: usize,
) -> Result<Pooled> {
    let per_day = score_dataset(params, dataset, config)?;
    pool_scores(dataset, &per_day, max_lag + 1)
}

/// Baseline predictions on the same label days as [`pooled_dpm`].
pub fn pooled_glm(fit: &GlmFit, lag: usize, dataset: &Dataset, max_lag: usize) -> Result<Pooled> {
    if lag > max_lag {
        return Err(DpmError::InvalidConfig(format!("lag {lag} exceeds max_lag {max_lag}")));
    }
    let design = build_lagged_design(dataset, lag)?.from_label_day(max_lag + 1);
    Ok(Pooled {
        scores: predict_design(fit, &design)?,
        labels: design.labels().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Starts at `(0, 0)` with an infinite threshold and ends at `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve over the distinct score values, with tied scores moved across
/// the threshold together. The area is the trapezoid sum, which equals the
/// Mann-Whitney statistic with ties counted one half.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    check_dim("labels", scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DpmError::NonFinite("scores"));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if labels.iter().any(|&y| y > 1) {
        return Err(DpmError::InvalidConfig("labels must be 0 or 1".into()));
    }
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(DpmError::SingleClass(format!(
            "{positives} positives and {negatives} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.par_sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let (np, nn) = (positives as f64, negatives as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    // Twice the area, in units of (1 / np) * (1 / nn), kept in integers.
    let mut area2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) as u128) * ((tp + tp0) as u128);
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }
    let auc = area2 as f64 / (2.0 * np * nn);
    Ok(RocCurve { points, auc })
}

/// Per-channel counts of days between a purchase and the latest touch on or
/// before it; bin 0 is the purchase day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastTouchHistogram {
    pub max_days: usize,
    /// `r[j][d]`: purchasers whose last `r_j` touch was `d` days before.
    pub r: Vec<Vec<u64>>,
    pub m: Vec<Vec<u64>>,
}

pub fn last_touch_histogram(dataset: &Dataset, max_days: usize) -> LastTouchHistogram {
    let (k, l) = (dataset.k(), dataset.l());
    let mut hist = LastTouchHistogram {
        max_days,
        r: vec![vec![0; max_days + 1]; k],
        m: vec![vec![0; max_days + 1]; l],
    };
    for h in dataset.customers().iter().filter(|h| h.is_purchaser()) {
        let last = h.horizon() - 1;
        for j in 0..k {
            if let Some(t) = (0..=last).rev().find(|&t| h.r(t)[j] > 0) {
                if last - t <= max_days {
                    hist.r[j][last - t] += 1;
                }
            }
        }
        for j in 0..l {
            if let Some(t) = (0..=last).rev().find(|&t| h.m(t)[j] > 0) {
                if last - t <= max_days {
                    hist.m[j][last - t] += 1;
                }
            }
        }
    }
    hist
}
