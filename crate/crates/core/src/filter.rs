//! Bootstrap particle filter for the latent propensity.
//!
//! Because `y[t]` depends only on `s[t]`, which is a deterministic function
//! of the parent state `x[t-1]`, each step weights the parents by the
//! emission likelihood, resamples if the effective sample size drops, and
//! only then injects the transition noise. Noise is drawn in antithetic
//! pairs, so with an even particle count the noise has exactly zero mean.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DpmError, Result};
use crate::model::{
    log_bernoulli_logit, CustomerHistory, ModelParams, PropensityPath,
};
use crate::rng::{customer_stream, DpmRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathMode {
    /// Weighted particle mean at each day.
    #[default]
    PosteriorMean,
    /// Ancestral line of the final highest-weight particle.
    MapAncestral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub particle_count: usize,
    /// Resample when `ESS < resample_threshold * particle_count`.
    pub resample_threshold: f64,
    pub path_mode: PathMode,
    pub seed: u64,
    /// Skip the emission reweighting entirely. Test hook for the
    /// zero-information limit.
    #[serde(skip)]
    pub ignore_likelihood: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            particle_count: 1000,
            resample_threshold: 0.5,
            path_mode: PathMode::PosteriorMean,
            seed: 0,
            ignore_likelihood: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particle_count < 2 {
            return Err(DpmError::InvalidConfig(format!(
                "particle_count must be at least 2, got {}",
                self.particle_count
            )));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(DpmError::InvalidConfig(format!(
                "resample_threshold must lie in (0, 1], got {}",
                self.resample_threshold
            )));
        }
        Ok(())
    }
}

/// Weighted ensemble over the current latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub values: Vec<f64>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    /// Parent index of each particle in the previous generation, when the
    /// last step resampled.
    pub ancestors: Option<Vec<usize>>,
    /// The prior fell back to `N(0, 1)` because `|phi| >= 1`.
    pub fallback_prior: bool,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `1 / sum(w^2)`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn mean(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * (x - mu) * (x - mu))
            .sum()
    }

    /// One filtering step, in place. Returns the one-step-ahead purchase
    /// probability `sum_i w_i sigmoid(s_i)` computed before the update, and
    /// the effective sample size before resampling.
    fn advance(
        &mut self,
        params: &ModelParams,
        config: &FilterConfig,
        obs: &DayObservation<'_>,
        rng: &mut DpmRng,
        parent_weights: Option<&mut Vec<f64>>,
    ) -> Result<(f64, f64)> {
        let n = self.values.len();
        let drive = params.drive(obs.r, obs.m);
        let mut predictive = 0.0;
        let mut total = 0.0;
        let observe = !config.ignore_likelihood;
        let before = if observe { self.weights.clone() } else { Vec::new() };
        for (x, w) in self.values.iter_mut().zip(self.weights.iter_mut()) {
            let s = params.phi * *x + drive;
            *x = s;
            // One exponential serves both tails of the logistic.
            let e = (-s.abs()).exp();
            let (hi, lo) = (1.0 / (1.0 + e), e / (1.0 + e));
            let (p1, p0) = if s >= 0.0 { (hi, lo) } else { (lo, hi) };
            predictive += *w * p1;
            if observe {
                *w *= if obs.y == 1 { p1 } else { p0 };
                total += *w;
            }
        }

        if observe {
            if total.is_finite() && total >= 1e-250 {
                for w in self.weights.iter_mut() {
                    *w /= total;
                }
            } else {
                self.reweight_in_log_space(&before, obs)?;
            }
        }

        if let Some(out) = parent_weights {
            out.clear();
            out.extend_from_slice(&self.weights);
        }

        self.ancestors = None;
        let ess = self.ess();
        if ess < config.resample_threshold * n as f64 {
            let idx = systematic_resample(&self.weights, rng);
            self.values = idx.iter().map(|&i| self.values[i]).collect();
            self.weights.fill(1.0 / n as f64);
            self.ancestors = Some(idx);
        }

        let mut pairs = self.values.chunks_exact_mut(2);
        for pair in &mut pairs {
            let z: f64 = rng.sample(StandardNormal);
            pair[0] += z;
            pair[1] -= z;
        }
        for x in pairs.into_remainder() {
            let z: f64 = rng.sample(StandardNormal);
            *x += z;
        }
        Ok((predictive, ess))
    }

    /// Redoes the update in log space when the linear-space product lost
    /// its scale. `before` holds the weights prior to the update.
    fn reweight_in_log_space(&mut self, before: &[f64], obs: &DayObservation<'_>) -> Result<()> {
        let degenerate = || DpmError::DegenerateLikelihood { t: obs.day + 1 };
        if self.values.iter().any(|s| s.is_nan()) {
            return Err(degenerate());
        }
        let mut max_lw = f64::NEG_INFINITY;
        for ((w, &s), &prior) in self.weights.iter_mut().zip(&self.values).zip(before) {
            let lw = prior.ln() + log_bernoulli_logit(obs.y, s);
            *w = lw;
            max_lw = max_lw.max(lw);
        }
        if !max_lw.is_finite() {
            return Err(degenerate());
        }
        let mut total = 0.0;
        for w in self.weights.iter_mut() {
            *w = (*w - max_lw).exp();
            total += *w;
        }
        if !(total.is_finite() && total > 0.0) {
            return Err(degenerate());
        }
        for w in self.weights.iter_mut() {
            *w /= total;
        }
        Ok(())
    }
}

/// Inputs for one filtering step: the touches of day `day - 1` (zeros for
/// the first day) and the label `y[day]` they feed into.
#[derive(Debug, Clone, Copy)]
pub struct DayObservation<'a> {
    /// 0-based index of the emitted label.
    pub day: usize,
    pub r: &'a [u32],
    pub m: &'a [u32],
    pub y: u8,
}

/// Low-variance resampling: one uniform offset, `n` evenly spaced pointers.
pub fn systematic_resample(weights: &[f64], rng: &mut DpmRng) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let u0: f64 = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut j = 0;
    for i in 0..n {
        let u = u0 + i as f64 * step;
        while cumulative < u && j + 1 < n {
            j += 1;
            cumulative += weights[j];
        }
        out.push(j);
    }
    out
}

/// Draws `P` particles from the stationary distribution of the touch-free
/// recursion, `N(c / (1 - phi), 1 / (1 - phi^2))`, or from `N(0, 1)` when
/// `|phi| >= 1`.
pub fn init_particles(
    params: &ModelParams,
    config: &FilterConfig,
    rng: &mut DpmRng,
) -> Result<ParticleSet> {
    config.validate()?;
    params.check_finite()?;
    let n = config.particle_count;
    let (mean, sd, fallback) = prior_moments(params);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let z: f64 = rng.sample(StandardNormal);
        values.push(mean + sd * z);
        values.push(mean - sd * z);
    }
    if n % 2 == 1 {
        let z: f64 = rng.sample(StandardNormal);
        values.push(mean + sd * z);
    }
    Ok(ParticleSet {
        values,
        weights: vec![1.0 / n as f64; n],
        ancestors: None,
        fallback_prior: fallback,
    })
}

/// `(mean, sd, fallback)` of the initial-state prior.
pub(crate) fn prior_moments(params: &ModelParams) -> (f64, f64, bool) {
    match (params.stationary_mean(), params.stationary_variance()) {
        (Some(mean), Some(var)) => (mean, var.sqrt(), false),
        _ => (0.0, 1.0, true),
    }
}

/// Prior mean state anchoring `s[0]`.
pub fn prior_anchor(params: &ModelParams) -> f64 {
    prior_moments(params).0
}

/// Advances `particles` by one day.
pub fn filter_step(
    params: &ModelParams,
    config: &FilterConfig,
    particles: &ParticleSet,
    obs: DayObservation<'_>,
    rng: &mut DpmRng,
) -> Result<ParticleSet> {
    config.validate()?;
    check_dim("r_t", params.k(), obs.r.len())?;
    check_dim("m_t", params.l(), obs.m.len())?;
    if obs.y > 1 {
        return Err(DpmError::InvalidConfig(format!("label {} is not binary", obs.y)));
    }
    let mut next = particles.clone();
    next.advance(params, config, &obs, rng, None)?;
    Ok(next)
}

/// Everything a forward pass produces.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub path: PropensityPath,
    /// `predictive[t] = P(y[t] = 1 | y[..t], touches before day t)`.
    pub predictive: Vec<f64>,
    /// Posterior variance of `x[t]`.
    pub variance: Vec<f64>,
    /// Effective sample size after each update, before resampling.
    pub min_ess: f64,
    pub resamples: usize,
    pub fallback_prior: bool,
}

/// Runs the filter over the whole history with the caller's stream.
pub fn run_filter(
    params: &ModelParams,
    history: &CustomerHistory,
    config: &FilterConfig,
    rng: &mut DpmRng,
) -> Result<FilterRun> {
    params.check_channels(history.k(), history.l())?;
    let mut particles = init_particles(params, config, rng)?;
    let horizon = history.horizon();
    let zeros_r = vec![0u32; history.k()];
    let zeros_m = vec![0u32; history.l()];
    let track = config.path_mode == PathMode::MapAncestral;

    let mut x = Vec::with_capacity(horizon);
    let mut variance = Vec::with_capacity(horizon);
    let mut predictive = Vec::with_capacity(horizon);
    let mut generations: Vec<(Vec<f64>, Option<Vec<usize>>)> = Vec::new();
    let mut parent_weights = Vec::new();
    let mut min_ess = f64::INFINITY;
    let mut resamples = 0;

    for (t, &y) in history.y().iter().enumerate() {
        let (r, m) = if t == 0 {
            (zeros_r.as_slice(), zeros_m.as_slice())
        } else {
            (history.r(t - 1), history.m(t - 1))
        };
        let obs = DayObservation { day: t, r, m, y };
        let parents = if track { Some(&mut parent_weights) } else { None };
        let (p, ess) = particles.advance(params, config, &obs, rng, parents)?;
        predictive.push(p);
        min_ess = min_ess.min(ess);
        if particles.ancestors.is_some() {
            resamples += 1;
        }
        x.push(particles.mean());
        variance.push(particles.variance());
        if track {
            generations.push((particles.values.clone(), particles.ancestors.clone()));
        }
    }

    if track {
        // Final particle whose parent carried the most weight; ties go to the
        // lowest index.
        let last = generations.last().expect("horizon is at least one day");
        let parent_of = |i: usize| last.1.as_ref().map_or(i, |a| a[i]);
        let mut best = 0;
        for i in 1..last.0.len() {
            if parent_weights[parent_of(i)] > parent_weights[parent_of(best)] {
                best = i;
            }
        }
        let mut i = best;
        for (t, (values, ancestors)) in generations.iter().enumerate().rev() {
            x[t] = values[i];
            if let Some(a) = ancestors {
                i = a[i];
            }
        }
    }

    let x0 = prior_anchor(params);
    let path = PropensityPath::from_states(params, history, x0, x)?;
    Ok(FilterRun {
        path,
        predictive,
        variance,
        min_ess,
        resamples,
        fallback_prior: particles.fallback_prior,
    })
}

/// Latent path for one customer, with a stream derived from
/// `(config.seed, customer id)`.
pub fn estimate_path(
    params: &ModelParams,
    history: &CustomerHistory,
    config: &FilterConfig,
) -> Result<PropensityPath> {
    let mut rng = customer_stream(config.seed, "filter", history.id());
    run_filter(params, history, config, &mut rng).map(|run| run.path)
}
