//! Reference computations shared by the integration tests. Nothing here
//! calls into the library's numerical code.

#![allow(dead_code)]

use dpm_core::{CustomerHistory, ModelParams};

pub fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn drive(params: &ModelParams, history: &CustomerHistory, t: usize) -> f64 {
    if t == 0 {
        return params.c;
    }
    let r = history.r(t - 1);
    let m = history.m(t - 1);
    params.c
        + params.alpha.iter().zip(r).map(|(a, &v)| a * v as f64).sum::<f64>()
        + params.beta.iter().zip(m).map(|(b, &v)| b * v as f64).sum::<f64>()
}

/// Exact filtering by quadrature on a uniform grid.
pub struct GridFilter {
    /// `E[x[t] | y[..=t]]`
    pub mean: Vec<f64>,
    /// `P(y[t] = 1 | y[..t])`
    pub predictive: Vec<f64>,
}

pub fn grid_filter(params: &ModelParams, history: &CustomerHistory, lo: f64, hi: f64, points: usize) -> GridFilter {
    let h = (hi - lo) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|i| lo + h * i as f64).collect();
    let (mean0, var0) = if params.phi.abs() < 1.0 {
        (params.c / (1.0 - params.phi), 1.0 / (1.0 - params.phi * params.phi))
    } else {
        (0.0, 1.0)
    };
    let mut density: Vec<f64> = grid.iter().map(|&g| normal_pdf(g, mean0, var0)).collect();
    let mut out = GridFilter {
        mean: Vec::new(),
        predictive: Vec::new(),
    };
    for (t, &y) in history.y().iter().enumerate() {
        let d = drive(params, history, t);
        let s: Vec<f64> = grid.iter().map(|&g| params.phi * g + d).collect();
        let mass: f64 = density.iter().sum();
        let pred: f64 = density.iter().zip(&s).map(|(w, &si)| w * logistic(si)).sum::<f64>() / mass;
        out.predictive.push(pred);
        let post: Vec<f64> = density
            .iter()
            .zip(&s)
            .map(|(w, &si)| {
                let q = logistic(si);
                w * if y == 1 { q } else { 1.0 - q }
            })
            .collect();
        let post_mass: f64 = post.iter().sum();
        out.mean.push(post.iter().zip(&s).map(|(w, si)| w * si).sum::<f64>() / post_mass);
        density = grid
            .iter()
            .map(|&g| post.iter().zip(&s).map(|(w, &si)| w * normal_pdf(g, si, 1.0)).sum())
            .collect();
    }
    out
}

/// Mann-Whitney statistic with ties counted one half, divided by the
/// number of positive-negative pairs.
pub fn mann_whitney_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice_u: u64 = 0;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        if yi == 1 {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj == 0 {
                if scores[i] > scores[j] {
                    twice_u += 2;
                } else if scores[i] == scores[j] {
                    twice_u += 1;
                }
            }
        }
    }
    twice_u as f64 / (2.0 * pos as f64 * neg as f64)
}

/// Logistic regression by plain full-batch gradient ascent on the summed
/// log-likelihood.
pub fn slow_logistic(rows: &[(Vec<f64>, u8)], step: f64, iterations: usize) -> Vec<f64> {
    let d = rows[0].0.len();
    let mut beta = vec![0.0; d];
    let mut grad = vec![0.0; d];
    for _ in 0..iterations {
        grad.fill(0.0);
        for (x, y) in rows {
            let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let resid = f64::from(*y) - logistic(eta);
            for (g, a) in grad.iter_mut().zip(x) {
                *g += resid * a;
            }
        }
        for (b, g) in beta.iter_mut().zip(&grad) {
            *b += step * g;
        }
    }
    beta
}

/// Log-likelihood recomputed from the density formulas.
pub fn reference_log_joint(params: &ModelParams, history: &CustomerHistory, x0: f64, x: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut prev = x0;
    for (t, &y) in history.y().iter().enumerate() {
        let s = params.phi * prev + drive(params, history, t);
        let q = logistic(s);
        total += if y == 1 { q.ln() } else { (1.0 - q).ln() };
        total += normal_pdf(x[t], s, 1.0).ln();
        prev = x[t];
    }
    total
}

/// Central differences of [`reference_log_joint`] over `(c, phi, alpha, beta)`.
pub fn numeric_gradient(params: &ModelParams, history: &CustomerHistory, x0: f64, x: &[f64], h: f64) -> Vec<f64> {
    let theta = params.to_vec();
    (0..theta.len())
        .map(|i| {
            let eval = |delta: f64| {
                let mut v = theta.clone();
                v[i] += delta;
                let p = ModelParams::from_slice(params.k(), params.l(), &v).unwrap();
                reference_log_joint(&p, history, x0, x)
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect()
}
