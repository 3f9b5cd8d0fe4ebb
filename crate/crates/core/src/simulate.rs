//! Synthetic data drawn from the model itself.
//!
//! Touch counts are capped Poisson draws, independent across channels and
//! days unless a [`Targeting`] rule tilts the daily rates toward customers
//! with high or low propensity.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DpmError, Result};
use crate::model::{sigmoid, CustomerHistory, Dataset, ModelParams};
use crate::rng::{indexed_stream, DpmRng};

/// Daily purchase rate of Product A.
pub const PRODUCT_A_DAILY_RATE: f64 = 1e-4;
/// Daily purchase rate of Product B.
pub const PRODUCT_B_DAILY_RATE: f64 = 4e-4;

/// One touch channel: `min(Poisson(mean), cap)` per day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channel {
    pub mean: f64,
    pub cap: u32,
}

impl Channel {
    pub fn new(mean: f64, cap: u32) -> Self {
        Channel { mean, cap }
    }

    /// Expected daily count after capping, `E[min(N, cap)]`.
    pub fn expected_count(&self) -> f64 {
        capped_poisson_mean(self.mean, self.cap)
    }
}

/// `E[min(N, cap)]` for `N ~ Poisson(lambda)`.
pub fn capped_poisson_mean(lambda: f64, cap: u32) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    // E[min(N, cap)] = sum_{k=0}^{cap-1} P(N > k)
    let mut pk = (-lambda).exp();
    let mut cdf = pk;
    let mut total = 0.0;
    for k in 0..cap {
        total += 1.0 - cdf;
        pk *= lambda / (k + 1) as f64;
        cdf += pk;
    }
    total
}

/// What a targeting rule looks at when choosing whom to touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetingBasis {
    /// The noise-free propensity implied by the touches received so far,
    /// `h[t] = c + phi * h[t-1] + alpha . r[t-1] + beta . m[t-1]`. Visible
    /// to a marketer with the customer's contact history.
    #[default]
    History,
    /// The true latent state `x[t]`.
    Latent,
}

/// Tilts channel `j`'s daily rate by `exp(strength[j] * (b - b0))`, where
/// `b` is the basis value and `b0` the stationary level of the propensity
/// under the untargeted rates, `(c + alpha . E[r] + beta . E[m]) / (1 - phi)`.
/// Positive strength favors high propensity, negative strength low
/// propensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Targeting {
    #[serde(default)]
    pub basis: TargetingBasis,
    pub r_strength: Vec<f64>,
    pub m_strength: Vec<f64>,
    /// Upper bound on the rate multiplier.
    #[serde(default = "default_max_boost")]
    pub max_boost: f64,
}

fn default_max_boost() -> f64 {
    20.0
}

/// Touch process for all channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TouchProfile {
    pub r: Vec<Channel>,
    pub m: Vec<Channel>,
    #[serde(default)]
    pub targeting: Option<Targeting>,
}

impl TouchProfile {
    /// Product A means and maxima from the dataset overview.
    pub fn product_a() -> Self {
        TouchProfile {
            r: vec![Channel::new(0.0010, 2), Channel::new(0.0044, 3), Channel::new(0.0004, 1)],
            m: vec![Channel::new(0.0165, 1), Channel::new(0.0354, 1), Channel::new(0.0003, 1)],
            targeting: None,
        }
    }

    /// Product B means and maxima from the dataset overview.
    pub fn product_b() -> Self {
        TouchProfile {
            r: vec![Channel::new(0.0115, 3), Channel::new(0.0057, 2), Channel::new(0.0027, 2)],
            m: vec![Channel::new(0.0168, 1), Channel::new(0.0229, 1), Channel::new(0.0032, 1)],
            targeting: None,
        }
    }

    /// Every channel's mean multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |c: &Channel| Channel::new(c.mean * factor, c.cap);
        TouchProfile {
            r: self.r.iter().map(scale).collect(),
            m: self.m.iter().map(scale).collect(),
            targeting: self.targeting.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.r.len()
    }

    pub fn l(&self) -> usize {
        self.m.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, ch) in self.r.iter().map(|c| ("r", c)).chain(self.m.iter().map(|c| ("m", c))) {
            if !(ch.mean.is_finite() && ch.mean >= 0.0) {
                return Err(DpmError::InvalidConfig(format!(
                    "{name} channel mean must be finite and non-negative, got {}",
                    ch.mean
                )));
            }
            if ch.cap < 1 {
                return Err(DpmError::InvalidConfig(format!("{name} channel cap must be at least 1")));
            }
        }
        if let Some(t) = &self.targeting {
            if t.r_strength.len() != self.k() || t.m_strength.len() != self.l() {
                return Err(DpmError::InvalidConfig(format!(
                    "targeting strengths have {}+{} entries for {}+{} channels",
                    t.r_strength.len(),
                    t.m_strength.len(),
                    self.k(),
                    self.l()
                )));
            }
            if t.r_strength.iter().chain(&t.m_strength).any(|v| !v.is_finite()) {
                return Err(DpmError::InvalidConfig("targeting strengths must be finite".into()));
            }
            if !(t.max_boost >= 1.0 && t.max_boost.is_finite()) {
                return Err(DpmError::InvalidConfig(format!(
                    "max_boost must be finite and at least 1, got {}",
                    t.max_boost
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub true_params: ModelParams,
    pub n_customers: usize,
    pub horizon: usize,
    pub touch: TouchProfile,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    /// Product B touch rates with moderate effects, one thousand customers
    /// over half a year.
    fn default() -> Self {
        SimConfig {
            true_params: ModelParams {
                c: -4.0,
                phi: 0.5,
                alpha: vec![0.5; 3],
                beta: vec![0.5; 3],
            },
            n_customers: 1000,
            horizon: 180,
            touch: TouchProfile::product_b(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.true_params.check_finite()?;
        self.true_params.check_channels(self.touch.k(), self.touch.l())?;
        if !self.true_params.is_stationary() {
            return Err(DpmError::InvalidConfig(format!(
                "simulation requires |phi| < 1, got {}",
                self.true_params.phi
            )));
        }
        if self.horizon < 1 {
            return Err(DpmError::InvalidConfig("horizon must be at least 1".into()));
        }
        self.touch.validate()
    }
}

/// Per-customer simulation output.
struct Simulated {
    history: CustomerHistory,
    /// `sum_t sigmoid(s[t])` over observed days.
    hazard: f64,
}

struct Simulator<'a> {
    params: &'a ModelParams,
    touch: &'a TouchProfile,
    horizon: usize,
    noise: bool,
    level: f64,
    sd: f64,
    /// Targeting reference `b0`.
    center: f64,
}

impl<'a> Simulator<'a> {
    fn new(params: &'a ModelParams, touch: &'a TouchProfile, horizon: usize, noise: bool) -> Self {
        let level = params.stationary_mean().unwrap_or(0.0);
        let sd = params.stationary_variance().unwrap_or(1.0).sqrt();
        let expected = |coef: &[f64], channels: &[Channel]| -> f64 {
            coef.iter().zip(channels).map(|(b, ch)| b * ch.expected_count()).sum()
        };
        let drive = params.c + expected(&params.alpha, &touch.r) + expected(&params.beta, &touch.m);
        let center = drive / (1.0 - params.phi);
        Simulator {
            params,
            touch,
            horizon,
            noise,
            level,
            sd,
            center,
        }
    }

    fn draw(&self, channel: &Channel, strength: Option<f64>, basis: f64, max_boost: f64, rng: &mut DpmRng) -> u32 {
        let mut mean = channel.mean;
        if let Some(kappa) = strength {
            mean *= (kappa * (basis - self.center)).exp().min(max_boost);
        }
        if mean <= 0.0 {
            return 0;
        }
        let n: f64 = Poisson::new(mean).expect("positive finite mean").sample(rng);
        (n as u32).min(channel.cap)
    }

    fn touches(&self, x: f64, h: f64, rng: &mut DpmRng, r: &mut Vec<u32>, m: &mut Vec<u32>) {
        let (basis, max_boost) = match &self.touch.targeting {
            Some(t) => (
                match t.basis {
                    TargetingBasis::History => h,
                    TargetingBasis::Latent => x,
                },
                t.max_boost,
            ),
            None => (0.0, 1.0),
        };
        let targeting = self.touch.targeting.as_ref();
        for (j, ch) in self.touch.r.iter().enumerate() {
            let kappa = targeting.map(|t| t.r_strength[j]);
            r.push(self.draw(ch, kappa, basis, max_boost, rng));
        }
        for (j, ch) in self.touch.m.iter().enumerate() {
            let kappa = targeting.map(|t| t.m_strength[j]);
            m.push(self.draw(ch, kappa, basis, max_boost, rng));
        }
    }

    fn customer(&self, id: String, rng: &mut DpmRng) -> Simulated {
        let p = self.params;
        let (k, l) = (self.touch.k(), self.touch.l());
        let mut r = Vec::with_capacity(self.horizon * k);
        let mut m = Vec::with_capacity(self.horizon * l);
        let mut y = Vec::with_capacity(self.horizon);
        let mut hazard = 0.0;

        let z: f64 = if self.noise { rng.sample(StandardNormal) } else { 0.0 };
        let x_prior = self.level + self.sd * z;
        let mut s = p.c + p.phi * x_prior;
        let mut h = p.c + p.phi * self.level;
        for _ in 0..self.horizon {
            let q = sigmoid(s);
            hazard += q;
            let bought = rng.random::<f64>() < q;
            let eps: f64 = if self.noise { rng.sample(StandardNormal) } else { 0.0 };
            let x = s + eps;
            let (r0, m0) = (r.len(), m.len());
            self.touches(x, h, rng, &mut r, &mut m);
            y.push(bought as u8);
            if bought {
                break;
            }
            let drive = p.drive(&r[r0..], &m[m0..]);
            s = p.phi * x + drive;
            h = p.phi * h + drive;
        }
        let history = CustomerHistory::from_flat(id, None, k, l, r, m, y)
            .expect("simulated histories satisfy the history invariants");
        Simulated { history, hazard }
    }
}

fn simulate_all(
    params: &ModelParams,
    touch: &TouchProfile,
    n_customers: usize,
    horizon: usize,
    seed: u64,
    noise: bool,
) -> Vec<Simulated> {
    let sim = Simulator::new(params, touch, horizon, noise);
    (0..n_customers)
        .into_par_iter()
        .map(|i| {
            let mut rng = indexed_stream(seed, "simulate", i as u64);
            sim.customer((i + 1).to_string(), &mut rng)
        })
        .collect()
}

/// Draws `n_customers` histories of up to `horizon` days each; every
/// customer stops at their first purchase. Customer `i` (0-based) gets id
/// `i + 1` and its own random stream, so the output does not depend on the
/// thread count.
pub fn generate(config: &SimConfig) -> Result<Dataset> {
    config.validate()?;
    let customers = simulate_all(
        &config.true_params,
        &config.touch,
        config.n_customers,
        config.horizon,
        config.seed,
        true,
    );
    Dataset::with_channels(
        config.touch.k(),
        config.touch.l(),
        customers.into_iter().map(|s| s.history).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub pilot_customer_days: usize,
    pub bracket: (f64, f64),
    pub max_steps: usize,
    /// Accept `c` once the pilot rate is within this factor of the target.
    pub tolerance_factor: f64,
    /// Drop the prior draw and the transition noise. Test hook.
    pub disable_noise: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            pilot_customer_days: 100_000,
            bracket: (-30.0, 5.0),
            max_steps: 30,
            tolerance_factor: 1.5,
            disable_noise: false,
        }
    }
}

/// Daily purchase rate of a pilot simulation, estimated as the mean hazard
/// `sigmoid(s[t])` over at-risk customer-days. This has the same
/// expectation as purchases per customer-day with far less variance.
pub fn pilot_rate(
    params: &ModelParams,
    touch: &TouchProfile,
    horizon: usize,
    customer_days: usize,
    seed: u64,
    disable_noise: bool,
) -> Result<f64> {
    let n = customer_days.div_ceil(horizon.max(1)).max(1);
    let cfg = SimConfig {
        true_params: params.clone(),
        n_customers: n,
        horizon,
        touch: touch.clone(),
        seed,
    };
    cfg.validate()?;
    let sims = simulate_all(params, touch, n, horizon, seed, !disable_noise);
    let hazard: f64 = sims.iter().map(|s| s.hazard).sum();
    let days: usize = sims.iter().map(|s| s.history.horizon()).sum();
    Ok(hazard / days as f64)
}

/// Offset `c` that makes the simulated daily purchase rate hit `target`.
/// The `c` field of `params` is ignored.
pub fn calibrate_offset(
    params: &ModelParams,
    touch: &TouchProfile,
    horizon: usize,
    target: f64,
    seed: u64,
) -> Result<f64> {
    calibrate_offset_with(params, touch, horizon, target, seed, &CalibrationOptions::default())
}

pub fn calibrate_offset_with(
    params: &ModelParams,
    touch: &TouchProfile,
    horizon: usize,
    target: f64,
    seed: u64,
    options: &CalibrationOptions,
) -> Result<f64> {
    if !(target > 0.0 && target < 0.5) {
        return Err(DpmError::InvalidConfig(format!(
            "target rate must lie in (0, 0.5), got {target}"
        )));
    }
    let rate_at = |c: f64| {
        let mut p = params.clone();
        p.c = c;
        pilot_rate(&p, touch, horizon, options.pilot_customer_days, seed, options.disable_noise)
    };
    let (mut lo, mut hi) = options.bracket;
    let (rate_lo, rate_hi) = (rate_at(lo)?, rate_at(hi)?);
    if !(rate_lo <= target && target <= rate_hi) {
        return Err(DpmError::Calibration(format!(
            "target {target} outside the pilot rates [{rate_lo}, {rate_hi}] over c in [{lo}, {hi}]"
        )));
    }
    // Bisect in log-rate, which is close to linear in c for rare events.
    let mut best = (f64::INFINITY, lo);
    for _ in 0..options.max_steps {
        let mid = 0.5 * (lo + hi);
        let rate = rate_at(mid)?;
        let miss = (rate / target).ln().abs();
        if miss < best.0 {
            best = (miss, mid);
        }
        if rate < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > options.tolerance_factor.ln() {
        return Err(DpmError::Calibration(format!(
            "best pilot rate misses target {target} by a factor of {:.3}",
            best.0.exp()
        )));
    }
    Ok(best.1)
}
