//! Stochastic-gradient fitting of the model parameters.
//!
//! Each iteration samples one customer, filters their latent path under the
//! current parameters, and takes a Robbins-Monro step along the gradient of
//! that customer's conditional log-likelihood.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DpmError, Result};
use crate::filter::{run_filter, FilterConfig};
use crate::model::{predictive_states, sigmoid, CustomerHistory, Dataset, ModelParams, PropensityPath};
use crate::rng::{indexed_stream, DpmRng};

/// Which parts of the conditional log-likelihood to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientTerms {
    #[default]
    Both,
    EmissionOnly,
    TransitionOnly,
}

/// `d s[t] / d theta` in the `[c, phi, alpha, beta]` layout.
fn state_jacobian(history: &CustomerHistory, x0: f64, x: &[f64], t: usize, out: &mut [f64]) {
    let k = history.k();
    out.fill(0.0);
    out[0] = 1.0;
    if t == 0 {
        out[1] = x0;
        return;
    }
    out[1] = x[t - 1];
    for (o, &v) in out[2..2 + k].iter_mut().zip(history.r(t - 1)) {
        *o = v as f64;
    }
    for (o, &v) in out[2 + k..].iter_mut().zip(history.m(t - 1)) {
        *o = v as f64;
    }
}

/// Gradient of [`crate::model::log_joint`] with respect to
/// `[c, phi, alpha, beta]`, holding the latent path fixed.
pub fn grad_log_joint(
    params: &ModelParams,
    history: &CustomerHistory,
    path: &PropensityPath,
) -> Result<Vec<f64>> {
    grad_log_joint_terms(params, history, path, GradientTerms::Both)
}

pub fn grad_log_joint_terms(
    params: &ModelParams,
    history: &CustomerHistory,
    path: &PropensityPath,
    terms: GradientTerms,
) -> Result<Vec<f64>> {
    params.check_channels(history.k(), history.l())?;
    check_dim("filtered path", history.horizon(), path.x.len())?;
    let s = predictive_states(params, history, path.x0, &path.x);
    let mut grad = vec![0.0; params.dim()];
    let mut ds = vec![0.0; params.dim()];
    for (t, &y) in history.y().iter().enumerate() {
        let emission = f64::from(y) - sigmoid(s[t]);
        let transition = path.x[t] - s[t];
        let factor = match terms {
            GradientTerms::Both => emission + transition,
            GradientTerms::EmissionOnly => emission,
            GradientTerms::TransitionOnly => transition,
        };
        state_jacobian(history, path.x0, &path.x, t, &mut ds);
        for (g, d) in grad.iter_mut().zip(&ds) {
            *g += factor * d;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(DpmError::NonFinite("gradient"));
    }
    Ok(grad)
}

/// Expected negative Hessian of the emission term for a fixed path,
/// `sum_t sigmoid(s)(1 - sigmoid(s)) ds ds^T`, row-major.
pub fn emission_information(
    params: &ModelParams,
    history: &CustomerHistory,
    path: &PropensityPath,
) -> Result<Vec<f64>> {
    params.check_channels(history.k(), history.l())?;
    check_dim("filtered path", history.horizon(), path.x.len())?;
    let s = predictive_states(params, history, path.x0, &path.x);
    let d = params.dim();
    let mut info = vec![0.0; d * d];
    let mut ds = vec![0.0; d];
    for (t, &st) in s.iter().take(history.horizon()).enumerate() {
        let q = sigmoid(st);
        let w = q * (1.0 - q);
        state_jacobian(history, path.x0, &path.x, t, &mut ds);
        for i in 0..d {
            if ds[i] == 0.0 {
                continue;
            }
            let wi = w * ds[i];
            for j in 0..d {
                info[i * d + j] += wi * ds[j];
            }
        }
    }
    Ok(info)
}

/// Purchaser / non-purchaser index lists for stratified draws.
#[derive(Debug, Clone)]
pub struct CustomerSampler {
    purchasers: Vec<usize>,
    others: Vec<usize>,
    pos_sample_prob: f64,
}

/// Stratum a draw came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stratum {
    Purchaser,
    NonPurchaser,
}

impl CustomerSampler {
    pub fn new(dataset: &Dataset, pos_sample_prob: f64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(DpmError::EmptyDataset);
        }
        if !(0.0..=1.0).contains(&pos_sample_prob) {
            return Err(DpmError::InvalidConfig(format!(
                "pos_sample_prob must lie in [0, 1], got {pos_sample_prob}"
            )));
        }
        let (purchasers, others): (Vec<usize>, Vec<usize>) =
            (0..dataset.len()).partition(|&i| dataset.customers()[i].is_purchaser());
        Ok(CustomerSampler {
            purchasers,
            others,
            pos_sample_prob,
        })
    }

    /// A stratum is empty, so draws come only from the other one.
    pub fn is_degenerate(&self) -> bool {
        self.purchasers.is_empty() || self.others.is_empty()
    }

    pub fn purchasers(&self) -> usize {
        self.purchasers.len()
    }

    pub fn non_purchasers(&self) -> usize {
        self.others.len()
    }

    /// Ratio of a stratum's sampling probability to its population share.
    pub fn inflation(&self, stratum: Stratum) -> f64 {
        let n = (self.purchasers.len() + self.others.len()) as f64;
        let (p, size) = match stratum {
            Stratum::Purchaser => (self.effective_prob(), self.purchasers.len()),
            Stratum::NonPurchaser => (1.0 - self.effective_prob(), self.others.len()),
        };
        if size == 0 {
            1.0
        } else {
            p / (size as f64 / n)
        }
    }

    fn effective_prob(&self) -> f64 {
        if self.purchasers.is_empty() {
            0.0
        } else if self.others.is_empty() {
            1.0
        } else {
            self.pos_sample_prob
        }
    }

    /// Index of the drawn customer and its stratum.
    pub fn sample(&self, rng: &mut DpmRng) -> (usize, Stratum) {
        let u: f64 = rng.random();
        if u < self.effective_prob() {
            let i = rng.random_range(0..self.purchasers.len());
            (self.purchasers[i], Stratum::Purchaser)
        } else {
            let i = rng.random_range(0..self.others.len());
            (self.others[i], Stratum::NonPurchaser)
        }
    }
}

/// One stratified draw. Prefer [`CustomerSampler`] for repeated draws.
pub fn sample_customer<'a>(
    dataset: &'a Dataset,
    pos_sample_prob: f64,
    rng: &mut DpmRng,
) -> Result<&'a CustomerHistory> {
    let sampler = CustomerSampler::new(dataset, pos_sample_prob)?;
    let (i, _) = sampler.sample(rng);
    Ok(&dataset.customers()[i])
}

/// How the raw gradient is scaled before the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preconditioner {
    /// Plain gradient ascent.
    Identity,
    /// Multiply by the inverse running mean of the per-customer emission
    /// information.
    #[default]
    Fisher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub gamma0: f64,
    /// `gamma_v = gamma0 / (1 + v)^schedule_exponent`.
    pub schedule_exponent: f64,
    pub max_iters: usize,
    /// Probability that a draw comes from the purchaser stratum.
    pub pos_sample_prob: f64,
    pub convergence_window: usize,
    /// Relative change between consecutive window means that counts as
    /// converged.
    pub convergence_tol: f64,
    /// Divide each stratum's gradient by its sampling inflation.
    pub reweight: bool,
    pub preconditioner: Preconditioner,
    /// Multiple of the identity added to the accumulated information.
    pub fisher_ridge: f64,
    /// Largest allowed change of any coordinate in one step.
    pub max_step: f64,
    /// Starting damping factor; the offset is chosen so that the stationary
    /// level matches the empirical purchase rate.
    pub init_phi: f64,
    /// Filter used for each per-customer path. Fewer particles than for
    /// scoring: the step noise dominates the path noise.
    pub filter: FilterConfig,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            gamma0: 1.0,
            schedule_exponent: 1.0,
            max_iters: 20_000,
            pos_sample_prob: 0.5,
            convergence_window: 500,
            convergence_tol: 1e-3,
            reweight: false,
            preconditioner: Preconditioner::Fisher,
            fisher_ridge: 1.0,
            max_step: 1.0,
            init_phi: 0.5,
            filter: FilterConfig {
                particle_count: 200,
                ..FilterConfig::default()
            },
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DpmError::InvalidConfig(msg));
        if !(self.gamma0 >= 0.0 && self.gamma0.is_finite()) {
            return bad(format!("gamma0 must be finite and non-negative, got {}", self.gamma0));
        }
        if !(self.schedule_exponent > 0.5 && self.schedule_exponent <= 1.0) {
            return bad(format!(
                "schedule_exponent must lie in (0.5, 1], got {}",
                self.schedule_exponent
            ));
        }
        if !(0.0..=1.0).contains(&self.pos_sample_prob) {
            return bad(format!("pos_sample_prob must lie in [0, 1], got {}", self.pos_sample_prob));
        }
        if self.max_iters == 0 || self.convergence_window == 0 {
            return bad("max_iters and convergence_window must be positive".into());
        }
        if !(self.convergence_tol > 0.0) {
            return bad(format!("convergence_tol must be positive, got {}", self.convergence_tol));
        }
        if !(self.fisher_ridge > 0.0 && self.fisher_ridge.is_finite()) {
            return bad(format!("fisher_ridge must be positive, got {}", self.fisher_ridge));
        }
        if !(self.max_step > 0.0) {
            return bad(format!("max_step must be positive, got {}", self.max_step));
        }
        if !(self.init_phi.abs() < 1.0) {
            return bad(format!("init_phi must satisfy |phi| < 1, got {}", self.init_phi));
        }
        self.filter.validate()
    }

    /// Step size at iteration `v` (1-based).
    pub fn step_size(&self, v: usize) -> f64 {
        self.gamma0 / (1.0 + v as f64).powf(self.schedule_exponent)
    }
}

/// Parameters after iteration `iteration` (0 is the initialization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_params: ModelParams,
    pub initial_params: ModelParams,
    /// Raw iterates, one per iteration including skipped ones.
    pub trajectory: Vec<Snapshot>,
    pub iterations_run: usize,
    pub converged: bool,
    pub skipped: usize,
    /// Purchasers were oversampled without reweighting, so `c` is biased
    /// upward relative to the population rate.
    pub offset_sampling_biased: bool,
    pub warnings: Vec<String>,
}

impl FitReport {
    /// Mean of the last `window` iterates, or of all of them if fewer.
    pub fn windowed_mean(trajectory: &[Snapshot], window: usize) -> Option<ModelParams> {
        let first = trajectory.first()?;
        let start = trajectory.len().saturating_sub(window.max(1));
        let tail = &trajectory[start..];
        // Offsets from the first entry keep a constant tail exact.
        let base = tail[0].params.to_vec();
        let mut acc = vec![0.0; base.len()];
        for snap in tail {
            for ((a, v), b) in acc.iter_mut().zip(snap.params.to_vec()).zip(&base) {
                *a += v - b;
            }
        }
        let n = tail.len() as f64;
        let mean: Vec<f64> = base.iter().zip(&acc).map(|(b, a)| b + a / n).collect();
        ModelParams::from_slice(first.params.k(), first.params.l(), &mean).ok()
    }
}

/// Starting point: `phi = init_phi`, `alpha = beta = 0`, and `c` chosen so
/// that the stationary level `c / (1 - phi)` is the logit of the empirical
/// daily purchase rate.
pub fn initial_params(dataset: &Dataset, init_phi: f64) -> Result<ModelParams> {
    if dataset.is_empty() {
        return Err(DpmError::EmptyDataset);
    }
    let days = dataset.customer_days() as f64;
    // Half a purchase of smoothing keeps the logit finite on all-zero data.
    let rate = ((dataset.purchasers() as f64 + 0.5) / (days + 1.0)).clamp(1e-12, 0.5);
    let logit = (rate / (1.0 - rate)).ln();
    let mut params = ModelParams::zeros(dataset.k(), dataset.l());
    params.phi = init_phi;
    params.c = (1.0 - init_phi) * logit;
    Ok(params)
}

const MAX_CONSECUTIVE_SKIPS: usize = 100;

fn relative_change(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Runs the single-loop stochastic gradient ascent from `init`.
pub fn fit_from(dataset: &Dataset, config: &SgdConfig, init: ModelParams) -> Result<FitReport> {
    config.validate()?;
    init.check_finite()?;
    init.check_channels(dataset.k(), dataset.l())?;
    let sampler = CustomerSampler::new(dataset, config.pos_sample_prob)?;
    let mut warnings = Vec::new();
    if sampler.purchasers() == 0 {
        warnings.push("no purchasers in the dataset; sampling non-purchasers only".to_string());
    } else if sampler.non_purchasers() == 0 {
        warnings.push("no non-purchasers in the dataset; sampling purchasers only".to_string());
    }

    let d = init.dim();
    let (k, l) = (init.k(), init.l());
    let mut theta = init.to_vec();
    let mut info_sum = DMatrix::<f64>::identity(d, d) * config.fisher_ridge;
    let mut draw_rng = indexed_stream(config.seed, "sgd-sample", 0);
    let mut trajectory = Vec::with_capacity(config.max_iters + 1);
    trajectory.push(Snapshot {
        iteration: 0,
        params: init.clone(),
    });

    let window = config.convergence_window;
    let mut window_sum = vec![0.0; d];
    let mut previous_window: Option<Vec<f64>> = None;
    let mut converged = false;
    let mut consecutive_skips = 0;
    let mut skipped = 0;
    let mut explosive_since: Option<usize> = None;
    let mut v = 0;

    while v < config.max_iters {
        v += 1;
        let params = ModelParams::from_slice(k, l, &theta)?;
        let (index, stratum) = sampler.sample(&mut draw_rng);
        let history = &dataset.customers()[index];
        let mut filter_rng = indexed_stream(config.seed, "sgd-filter", v as u64);
        match run_filter(&params, history, &config.filter, &mut filter_rng) {
            Ok(run) => {
                consecutive_skips = 0;
                let mut grad = grad_log_joint(&params, history, &run.path)?;
                if config.reweight {
                    let w = sampler.inflation(stratum);
                    grad.iter_mut().for_each(|g| *g /= w);
                }
                let gamma = config.step_size(v);
                let mut step = match config.preconditioner {
                    Preconditioner::Identity => grad,
                    Preconditioner::Fisher => {
                        let info = emission_information(&params, history, &run.path)?;
                        info_sum += DMatrix::from_row_slice(d, d, &info);
                        // Running mean information is info_sum / v.
                        let scaled = &info_sum / v as f64;
                        let g = DVector::from_vec(grad);
                        match scaled.cholesky() {
                            Some(chol) => chol.solve(&g).as_slice().to_vec(),
                            None => return Err(DpmError::NonFinite("information matrix")),
                        }
                    }
                };
                step.iter_mut().for_each(|s| *s *= gamma);
                let largest = step.iter().fold(0.0f64, |a, s| a.max(s.abs()));
                if largest > config.max_step {
                    let shrink = config.max_step / largest;
                    step.iter_mut().for_each(|s| *s *= shrink);
                }
                for (t, s) in theta.iter_mut().zip(&step) {
                    *t += s;
                }
                if theta.iter().any(|t| !t.is_finite()) {
                    return Err(DpmError::NonFinite("parameters"));
                }
            }
            Err(DpmError::DegenerateLikelihood { .. }) => {
                skipped += 1;
                consecutive_skips += 1;
                if consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(DpmError::TooManySkips(consecutive_skips));
                }
            }
            Err(e) => return Err(e),
        }

        if theta[1].abs() >= 1.0 && explosive_since.is_none() {
            explosive_since = Some(v);
            warnings.push(format!("|phi| reached {:.4} at iteration {v}", theta[1].abs()));
        } else if theta[1].abs() < 1.0 {
            explosive_since = None;
        }

        trajectory.push(Snapshot {
            iteration: v,
            params: ModelParams::from_slice(k, l, &theta)?,
        });
        for (acc, t) in window_sum.iter_mut().zip(&theta) {
            *acc += t;
        }
        if v % window == 0 {
            let mean: Vec<f64> = window_sum.iter().map(|s| s / window as f64).collect();
            window_sum.fill(0.0);
            if let Some(prev) = &previous_window {
                if relative_change(&mean, prev) < config.convergence_tol {
                    converged = true;
                    break;
                }
            }
            previous_window = Some(mean);
        }
    }

    if !converged {
        warnings.push(format!("no convergence within {} iterations", config.max_iters));
    }
    if theta[1].abs() >= 1.0 {
        warnings.push(format!("final iterate has |phi| = {:.4} >= 1", theta[1].abs()));
    }
    let final_params = FitReport::windowed_mean(&trajectory[1..], window)
        .expect("trajectory is non-empty");
    let offset_sampling_biased = !config.reweight
        && !sampler.is_degenerate()
        && (sampler.inflation(Stratum::Purchaser) - 1.0).abs() > 1e-12;
    Ok(FitReport {
        final_params,
        initial_params: init,
        trajectory,
        iterations_run: v,
        converged,
        skipped,
        offset_sampling_biased,
        warnings,
    })
}

/// Fits from the default initialization.
pub fn fit(dataset: &Dataset, config: &SgdConfig) -> Result<FitReport> {
    config.validate()?;
    let init = initial_params(dataset, config.init_phi)?;
    fit_from(dataset, config, init)
}

/// Log-likelihood of every purchase flag under its one-step filter
/// prediction, summed over customers. Customer streams are keyed by id, so
/// the sum does not depend on the thread count.
pub fn predictive_log_likelihood(params: &ModelParams, dataset: &Dataset, config: &FilterConfig) -> Result<f64> {
    let per_day = crate::eval::score_dataset(params, dataset, config)?;
    let mut total = 0.0;
    for (h, p) in dataset.customers().iter().zip(&per_day) {
        for (&y, &q) in h.y().iter().zip(p) {
            let q = q.clamp(1e-300, 1.0 - 1e-16);
            total += if y == 1 { q.ln() } else { (1.0 - q).ln() };
        }
    }
    Ok(total)
}

/// One attempt from [`fit_restarts`].
#[derive(Debug, Clone, PartialEq)]
pub struct RestartOutcome {
    pub seed: u64,
    pub init_phi: f64,
    pub report: FitReport,
    pub log_likelihood: f64,
}

/// Runs `restarts` fits and orders them best first by
/// [`predictive_log_likelihood`]. The first attempt uses the configured seed
/// and `init_phi`; later ones draw a seed and a starting `phi` in
/// `[0.1, 0.9]` from the configured seed.
pub fn fit_restarts(dataset: &Dataset, config: &SgdConfig, restarts: usize) -> Result<Vec<RestartOutcome>> {
    if restarts == 0 {
        return Err(DpmError::InvalidConfig("restarts must be at least 1".into()));
    }
    let mut outcomes = Vec::with_capacity(restarts);
    for attempt in 0..restarts {
        let mut cfg = config.clone();
        if attempt > 0 {
            let mut rng = indexed_stream(config.seed, "restart", attempt as u64);
            cfg.seed = rng.random();
            cfg.init_phi = rng.random_range(0.1..0.9);
        }
        let report = fit(dataset, &cfg)?;
        let score_cfg = FilterConfig {
            seed: config.seed,
            ..cfg.filter.clone()
        };
        let log_likelihood = if restarts == 1 {
            f64::NAN
        } else {
            predictive_log_likelihood(&report.final_params, dataset, &score_cfg)?
        };
        outcomes.push(RestartOutcome {
            seed: cfg.seed,
            init_phi: cfg.init_phi,
            report,
            log_likelihood,
        });
    }
    outcomes.sort_by(|a, b| b.log_likelihood.total_cmp(&a.log_likelihood));
    Ok(outcomes)
}
