//! Lagged logistic regression baselines.
//!
//! A design with lag `l` regresses the next-day label on today's touches
//! and those of the `l` previous days. Rows are built only where the label
//! is observed, so for 1-based day `t` the row needs `t > l` and `t < T`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{check_dim, DpmError, Result};
use crate::model::{log_sigmoid, sigmoid, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct LaggedDesign {
    pub lag: usize,
    pub feature_names: Vec<String>,
    /// Row-major `rows x dim`.
    features: Vec<f64>,
    labels: Vec<u8>,
    /// `(customer index, 0-based day of the label)` per row.
    origins: Vec<(usize, usize)>,
}

impl LaggedDesign {
    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> (&[f64], u8) {
        let d = self.dim();
        (&self.features[i * d..(i + 1) * d], self.labels[i])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    /// Builds a design from explicit rows. Every row must have the same
    /// length as `feature_names`.
    pub fn from_rows(feature_names: Vec<String>, rows: &[(Vec<f64>, u8)]) -> Result<Self> {
        let d = feature_names.len();
        let mut features = Vec::with_capacity(rows.len() * d);
        for (x, y) in rows {
            check_dim("design row", d, x.len())?;
            if *y > 1 {
                return Err(DpmError::InvalidConfig(format!("label {y} is not binary")));
            }
            features.extend_from_slice(x);
        }
        Ok(LaggedDesign {
            lag: 0,
            feature_names,
            features,
            labels: rows.iter().map(|r| r.1).collect(),
            origins: (0..rows.len()).map(|i| (i, 0)).collect(),
        })
    }

    /// Keeps the rows whose label day is at least `min_day` (0-based).
    pub fn from_label_day(&self, min_day: usize) -> LaggedDesign {
        let d = self.dim();
        let mut out = LaggedDesign {
            lag: self.lag,
            feature_names: self.feature_names.clone(),
            features: Vec::new(),
            labels: Vec::new(),
            origins: Vec::new(),
        };
        for (i, &(c, day)) in self.origins.iter().enumerate() {
            if day >= min_day {
                out.features.extend_from_slice(&self.features[i * d..(i + 1) * d]);
                out.labels.push(self.labels[i]);
                out.origins.push((c, day));
            }
        }
        out
    }
}

/// Names in design order: `c`, then per lag `alpha_{lag}_{j}` and
/// `beta_{lag}_{j}` with 1-based channel `j`.
pub fn feature_names(k: usize, l: usize, lag: usize) -> Vec<String> {
    let mut names = vec!["c".to_string()];
    for d in 0..=lag {
        names.extend((1..=k).map(|j| format!("alpha_{d}_{j}")));
        names.extend((1..=l).map(|j| format!("beta_{d}_{j}")));
    }
    names
}

/// One row per customer and 0-based touch day `t` with `lag <= t < T - 1`;
/// the label is `y[t + 1]`. Rows are ordered by customer, then day.
pub fn build_lagged_design(dataset: &Dataset, lag: usize) -> Result<LaggedDesign> {
    let (k, l) = (dataset.k(), dataset.l());
    let names = feature_names(k, l, lag);
    let d = names.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut origins = Vec::new();
    for (ci, h) in dataset.customers().iter().enumerate() {
        for t in lag..h.horizon().saturating_sub(1) {
            features.push(1.0);
            for back in 0..=lag {
                features.extend(h.r(t - back).iter().map(|&v| v as f64));
                features.extend(h.m(t - back).iter().map(|&v| v as f64));
            }
            labels.push(h.y()[t + 1]);
            origins.push((ci, t + 1));
        }
    }
    debug_assert_eq!(features.len(), labels.len() * d);
    if labels.is_empty() {
        return Err(DpmError::EmptyDesign(format!(
            "no customer has more than {} days of history",
            lag + 1
        )));
    }
    Ok(LaggedDesign {
        lag,
        feature_names: names,
        features,
        labels,
        origins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub feature_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Two-sided Wald p-values.
    pub p_values: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub separation_detected: bool,
}

/// One line of the coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub p_value: f64,
}

impl GlmFit {
    pub fn table(&self) -> Vec<Coefficient> {
        (0..self.coefficients.len())
            .map(|i| Coefficient {
                name: self.feature_names[i].clone(),
                estimate: self.coefficients[i],
                std_error: self.std_errors[i],
                p_value: self.p_values[i],
            })
            .collect()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.feature_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }
}

const SEPARATION_COEFFICIENT: f64 = 15.0;
const SEPARATION_CONDITION: f64 = 1e10;
const MAX_HALVINGS: usize = 40;

struct Evaluation {
    log_likelihood: f64,
    score: DVector<f64>,
    information: DMatrix<f64>,
}

fn evaluate(design: &LaggedDesign, beta: &DVector<f64>) -> Evaluation {
    let d = design.dim();
    let mut score = DVector::zeros(d);
    let mut info = DMatrix::zeros(d, d);
    let mut ll = 0.0;
    for i in 0..design.rows() {
        let (x, y) = design.row(i);
        let eta: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        let p = sigmoid(eta);
        ll += if y == 1 { log_sigmoid(eta) } else { log_sigmoid(-eta) };
        let resid = f64::from(y) - p;
        let w = p * (1.0 - p);
        for a in 0..d {
            if x[a] == 0.0 {
                continue;
            }
            score[a] += resid * x[a];
            let wa = w * x[a];
            for b in a..d {
                info[(a, b)] += wa * x[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    Evaluation {
        log_likelihood: ll,
        score,
        information: info,
    }
}

fn log_likelihood(design: &LaggedDesign, beta: &DVector<f64>) -> f64 {
    (0..design.rows())
        .map(|i| {
            let (x, y) = design.row(i);
            let eta: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            if y == 1 {
                log_sigmoid(eta)
            } else {
                log_sigmoid(-eta)
            }
        })
        .sum()
}

/// Newton step `H^-1 g`, falling back to a pseudo-inverse when the
/// information is not positive definite.
fn newton_direction(info: &DMatrix<f64>, score: &DVector<f64>) -> DVector<f64> {
    match info.clone().cholesky() {
        Some(chol) => chol.solve(score),
        None => info
            .clone()
            .pseudo_inverse(1e-12)
            .map(|inv| inv * score)
            .unwrap_or_else(|_| DVector::zeros(score.len())),
    }
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares with step halving.
pub fn fit_glm(design: &LaggedDesign, max_iters: usize, tol: f64) -> Result<GlmFit> {
    let n = design.rows();
    if n == 0 {
        return Err(DpmError::EmptyDesign("design has no rows".into()));
    }
    let positives = design.labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == n {
        return Err(DpmError::SingleClass(format!(
            "{positives} positive labels in {n} rows"
        )));
    }
    let d = design.dim();
    let mut beta = DVector::zeros(d);
    if design.feature_names.first().map(String::as_str) == Some("c") {
        let rate = positives as f64 / n as f64;
        beta[0] = (rate / (1.0 - rate)).ln();
    }

    let mut eval = evaluate(design, &beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        if eval.score.amax() < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let direction = newton_direction(&eval.information, &eval.score);
        let mut scale = 1.0;
        let mut accepted = None;
        // Near the optimum the gain falls below the rounding error of the
        // summed log-likelihood; such steps are judged by the score instead.
        let noise = 1e-12 * (1.0 + eval.log_likelihood.abs());
        for _ in 0..MAX_HALVINGS {
            let candidate = &beta + &direction * scale;
            let ll = log_likelihood(design, &candidate);
            if ll.is_finite() && ll >= eval.log_likelihood {
                accepted = Some(evaluate(design, &candidate));
                break;
            }
            if ll.is_finite() && ll >= eval.log_likelihood - noise {
                let next = evaluate(design, &candidate);
                if next.score.amax() < eval.score.amax() {
                    accepted = Some(next);
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some(next) = accepted else {
            // No ascent along the Newton direction: the optimum is reached to
            // machine precision.
            converged = true;
            break;
        };
        let step_norm = (&direction * scale).norm();
        beta = &beta + &direction * scale;
        eval = next;
        if step_norm < tol {
            converged = true;
            break;
        }
    }
    if !converged && eval.score.amax() < tol {
        converged = true;
    }

    let info = &eval.information;
    let eigen = SymmetricEigen::new(info.clone());
    let max_eig = eigen.eigenvalues.max();
    let min_eig = eigen.eigenvalues.min();
    let condition = if min_eig > 0.0 { max_eig / min_eig } else { f64::INFINITY };
    let covariance = match info.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => info
            .clone()
            .pseudo_inverse(1e-12)
            .unwrap_or_else(|_| DMatrix::from_element(d, d, f64::NAN)),
    };
    let std_errors: Vec<f64> = (0..d).map(|i| covariance[(i, i)].max(0.0).sqrt()).collect();
    let p_values = beta
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| wald_p_value(*b, *se))
        .collect();
    let separation_detected = condition > SEPARATION_CONDITION
        || beta.iter().any(|b| b.abs() > SEPARATION_COEFFICIENT);
    Ok(GlmFit {
        feature_names: design.feature_names.clone(),
        coefficients: beta.iter().copied().collect(),
        std_errors,
        p_values,
        log_likelihood: eval.log_likelihood,
        converged,
        iterations,
        separation_detected,
    })
}

/// Two-sided p-value of `estimate / std_error` under a standard normal.
pub fn wald_p_value(estimate: f64, std_error: f64) -> f64 {
    if !(std_error > 0.0) || !std_error.is_finite() {
        return 1.0;
    }
    let z = (estimate / std_error).abs();
    erfc(z / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn predict_glm(fit: &GlmFit, row: &[f64]) -> Result<f64> {
    check_dim("design row", fit.coefficients.len(), row.len())?;
    let eta: f64 = row.iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum();
    if !eta.is_finite() {
        return Err(DpmError::NonFinite("linear predictor"));
    }
    Ok(sigmoid(eta))
}

/// Predictions for every row of `design`.
pub fn predict_design(fit: &GlmFit, design: &LaggedDesign) -> Result<Vec<f64>> {
    (0..design.rows())
        .map(|i| predict_glm(fit, design.row(i).0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CustomerHistory;

    fn customer(id: &str, t: usize, buys: bool) -> CustomerHistory {
        let mut y = vec![0; t];
        if buys {
            y[t - 1] = 1;
        }
        let r = (0..t).map(|i| vec![i as u32]).collect();
        let m = (0..t).map(|i| vec![(i % 2) as u32]).collect();
        CustomerHistory::new(id, r, m, y).unwrap()
    }

    #[test]
    fn names_follow_lag_blocks() {
        assert_eq!(
            feature_names(2, 1, 1),
            ["c", "alpha_0_1", "alpha_0_2", "beta_0_1", "alpha_1_1", "alpha_1_2", "beta_1_1"]
        );
    }

    #[test]
    fn row_counts_and_contents() {
        let data = Dataset::new(vec![customer("a", 3, false), customer("b", 4, true)]).unwrap();
        let d0 = build_lagged_design(&data, 0).unwrap();
        assert_eq!(d0.rows(), 2 + 3);
        assert_eq!(d0.dim(), 3);
        // Last row of b: touches of day 2 predict the purchase on day 3.
        let (x, y) = d0.row(4);
        assert_eq!(x, [1.0, 2.0, 0.0]);
        assert_eq!(y, 1);
        let d2 = build_lagged_design(&data, 2).unwrap();
        assert_eq!(d2.rows(), 1);
        assert_eq!(d2.row(0).0, [1.0, 2.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(d2.origins(), [(1, 3)]);
    }

    #[test]
    fn too_long_lag_is_an_empty_design() {
        let data = Dataset::new(vec![customer("a", 3, false)]).unwrap();
        assert!(matches!(build_lagged_design(&data, 2), Err(DpmError::EmptyDesign(_))));
    }

    #[test]
    fn single_class_is_rejected() {
        let data = Dataset::new(vec![customer("a", 5, false)]).unwrap();
        let design = build_lagged_design(&data, 0).unwrap();
        assert!(matches!(fit_glm(&design, 25, 1e-8), Err(DpmError::SingleClass(_))));
    }

    #[test]
    fn table_coefficients_give_closed_form_prediction() {
        let fit = GlmFit {
            feature_names: feature_names(3, 3, 0),
            coefficients: vec![0.0, 2.02031, 2.74625, 3.16096, -0.59591, -0.32632, 1.30361],
            std_errors: vec![0.0; 7],
            p_values: vec![1.0; 7],
            log_likelihood: 0.0,
            converged: true,
            iterations: 0,
            separation_detected: false,
        };
        let p = predict_glm(&fit, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((p - 0.8829).abs() < 1e-4, "{p}");
        let zero = GlmFit {
            coefficients: vec![0.0; 7],
            ..fit.clone()
        };
        assert_eq!(predict_glm(&zero, &[1.0, 3.0, 0.0, 1.0, 0.0, 2.0, 0.0]).unwrap(), 0.5);
        let row = [1.0, 0.3, -1.0, 0.0, 2.0, 0.0, 1.0];
        let neg: Vec<f64> = row.iter().map(|v| -v).collect();
        let a = predict_glm(&fit, &row).unwrap();
        let b = predict_glm(&fit, &neg).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
        assert!(predict_glm(&fit, &row[..3]).is_err());
    }

    #[test]
    fn wald_p_values() {
        let p = wald_p_value(1.959963984540054, 1.0);
        assert!((p - 0.05).abs() < 1e-12, "{p:e}");
        assert_eq!(wald_p_value(0.0, 1.0), 1.0);
        assert_eq!(wald_p_value(1.0, 0.0), 1.0);
    }
}
