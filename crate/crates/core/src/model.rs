//! Domain types and the propensity kernel.
//!
//! Day indices are 0-based throughout the crate. For a history of horizon
//! `T`, `y[t]` is emitted by the predictive propensity `s[t]`, where
//!
//! ```text
//! s[0] = c + phi * x0
//! s[t] = c + phi * x[t-1] + alpha . r[t-1] + beta . m[t-1]      (1 <= t <= T)
//! x[t] = s[t] + eps,  eps ~ N(0, 1)
//! ```
//!
//! `s[T]` is the post-horizon prediction and has no observed emission.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DpmError, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// One customer's daily touch counts and purchase indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerHistory {
    id: String,
    segment: Option<String>,
    k: usize,
    l: usize,
    /// `T x K`, row-major.
    r: Vec<u32>,
    /// `T x L`, row-major.
    m: Vec<u32>,
    y: Vec<u8>,
}

impl CustomerHistory {
    /// Builds a validated history from per-day rows.
    ///
    /// Histories must be truncated at the first purchase: at most one
    /// positive label, and only on the final day.
    pub fn new(
        id: impl Into<String>,
        r: Vec<Vec<u32>>,
        m: Vec<Vec<u32>>,
        y: Vec<u8>,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| DpmError::InvalidHistory {
            id: id.clone(),
            reason,
        };
        let horizon = y.len();
        if horizon == 0 {
            return Err(invalid("horizon must be at least one day".into()));
        }
        if r.len() != horizon || m.len() != horizon {
            return Err(invalid(format!(
                "touch matrices have {} and {} rows for {} days",
                r.len(),
                m.len(),
                horizon
            )));
        }
        let k = r[0].len();
        let l = m[0].len();
        if let Some(t) = r.iter().position(|row| row.len() != k) {
            return Err(invalid(format!("r row {} has {} channels, expected {k}", t + 1, r[t].len())));
        }
        if let Some(t) = m.iter().position(|row| row.len() != l) {
            return Err(invalid(format!("m row {} has {} channels, expected {l}", t + 1, m[t].len())));
        }
        Self::from_flat(id, None, k, l, r.concat(), m.concat(), y)
    }

    /// Builds a validated history from row-major touch buffers.
    pub fn from_flat(
        id: impl Into<String>,
        segment: Option<String>,
        k: usize,
        l: usize,
        r: Vec<u32>,
        m: Vec<u32>,
        y: Vec<u8>,
    ) -> Result<Self> {
        let history = CustomerHistory {
            id: id.into(),
            segment,
            k,
            l,
            r,
            m,
            y,
        };
        history.validate()?;
        Ok(history)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |reason: String| DpmError::InvalidHistory {
            id: self.id.clone(),
            reason,
        };
        let horizon = self.y.len();
        if horizon == 0 {
            return Err(invalid("horizon must be at least one day".into()));
        }
        if self.r.len() != horizon * self.k || self.m.len() != horizon * self.l {
            return Err(invalid("touch buffers do not match horizon and channel counts".into()));
        }
        if let Some(t) = self.y.iter().position(|&v| v > 1) {
            return Err(invalid(format!("y = {} on day {} is not binary", self.y[t], t + 1)));
        }
        if let Some(t) = self.y.iter().position(|&v| v == 1) {
            if t + 1 != horizon {
                return Err(invalid(format!(
                    "history continues after the first purchase on day {}",
                    t + 1
                )));
            }
        }
        Ok(())
    }

    pub fn with_segment(mut self, segment: Option<String>) -> Self {
        self.segment = segment;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn segment(&self) -> Option<&str> {
        self.segment.as_deref()
    }

    pub fn horizon(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn r(&self, t: usize) -> &[u32] {
        &self.r[t * self.k..(t + 1) * self.k]
    }

    pub fn m(&self, t: usize) -> &[u32] {
        &self.m[t * self.l..(t + 1) * self.l]
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn is_purchaser(&self) -> bool {
        self.y.last() == Some(&1)
    }

    /// Touch counts of channel `j` on day `t`, where channels `0..K` are the
    /// semi-targetable `r` and `K..K+L` the targetable `m`.
    pub fn channel(&self, t: usize, j: usize) -> u32 {
        if j < self.k {
            self.r[t * self.k + j]
        } else {
            self.m[t * self.l + j - self.k]
        }
    }
}

/// A set of histories sharing channel counts, with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    customers: Vec<CustomerHistory>,
    k: usize,
    l: usize,
}

impl Dataset {
    pub fn new(customers: Vec<CustomerHistory>) -> Result<Self> {
        let (k, l) = match customers.first() {
            Some(c) => (c.k, c.l),
            None => (0, 0),
        };
        Self::with_channels(k, l, customers)
    }

    /// Like [`Dataset::new`], with the channel counts fixed up front so that
    /// an empty dataset still knows them.
    pub fn with_channels(k: usize, l: usize, customers: Vec<CustomerHistory>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(customers.len());
        for c in &customers {
            if c.k != k || c.l != l {
                return Err(DpmError::InvalidHistory {
                    id: c.id.clone(),
                    reason: format!("has K={}, L={} but dataset uses K={k}, L={l}", c.k, c.l),
                });
            }
            if !seen.insert(c.id.as_str()) {
                return Err(DpmError::InvalidHistory {
                    id: c.id.clone(),
                    reason: "duplicate customer id".into(),
                });
            }
        }
        Ok(Dataset { customers, k, l })
    }

    pub fn customers(&self) -> &[CustomerHistory] {
        &self.customers
    }

    pub fn into_customers(self) -> Vec<CustomerHistory> {
        self.customers
    }

    pub fn len(&self) -> usize {
        self.customers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.customers.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn customer_days(&self) -> usize {
        self.customers.iter().map(CustomerHistory::horizon).sum()
    }

    pub fn purchasers(&self) -> usize {
        self.customers.iter().filter(|c| c.is_purchaser()).count()
    }

    /// Empirical daily purchase rate (purchases per customer-day).
    pub fn daily_purchase_rate(&self) -> f64 {
        let days = self.customer_days();
        if days == 0 {
            0.0
        } else {
            self.purchasers() as f64 / days as f64
        }
    }

    /// Partitions by segment key, preserving customer order within each part.
    /// Parts are ordered by key; customers without a segment form the `None`
    /// part.
    pub fn by_segment(&self) -> Vec<(Option<String>, Dataset)> {
        let mut parts: std::collections::BTreeMap<Option<String>, Vec<CustomerHistory>> =
            Default::default();
        for c in &self.customers {
            parts.entry(c.segment.clone()).or_default().push(c.clone());
        }
        parts
            .into_iter()
            .map(|(key, customers)| {
                let (k, l) = (self.k, self.l);
                (key, Dataset { customers, k, l })
            })
            .collect()
    }
}

/// Model parameters `theta = (c, phi, alpha, beta)`. The transition noise
/// scale is fixed at one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub c: f64,
    pub phi: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ModelParams {
    pub fn new(c: f64, phi: f64, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let params = ModelParams { c, phi, alpha, beta };
        params.check_finite()?;
        Ok(params)
    }

    pub fn zeros(k: usize, l: usize) -> Self {
        ModelParams {
            c: 0.0,
            phi: 0.0,
            alpha: vec![0.0; k],
            beta: vec![0.0; l],
        }
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn l(&self) -> usize {
        self.beta.len()
    }

    /// Length of the flattened parameter vector, `2 + K + L`.
    pub fn dim(&self) -> usize {
        2 + self.alpha.len() + self.beta.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        let all_finite = self.c.is_finite()
            && self.phi.is_finite()
            && self.alpha.iter().chain(&self.beta).all(|v| v.is_finite());
        if all_finite {
            Ok(())
        } else {
            Err(DpmError::NonFinite("model parameters"))
        }
    }

    pub fn check_channels(&self, k: usize, l: usize) -> Result<()> {
        check_dim("alpha", k, self.alpha.len())?;
        check_dim("beta", l, self.beta.len())
    }

    /// Whether the touch-free recursion has a stationary distribution.
    pub fn is_stationary(&self) -> bool {
        self.phi.abs() < 1.0
    }

    /// Mean of the touch-free stationary distribution, `c / (1 - phi)`.
    pub fn stationary_mean(&self) -> Option<f64> {
        self.is_stationary().then(|| self.c / (1.0 - self.phi))
    }

    /// Variance of the touch-free stationary distribution, `1 / (1 - phi^2)`.
    pub fn stationary_variance(&self) -> Option<f64> {
        self.is_stationary().then(|| 1.0 / (1.0 - self.phi * self.phi))
    }

    /// Flattened layout `[c, phi, alpha.., beta..]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.c);
        v.push(self.phi);
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn from_slice(k: usize, l: usize, values: &[f64]) -> Result<Self> {
        check_dim("flattened parameters", 2 + k + l, values.len())?;
        ModelParams::new(
            values[0],
            values[1],
            values[2..2 + k].to_vec(),
            values[2 + k..].to_vec(),
        )
    }

    /// Names matching [`ModelParams::to_vec`]: `c, phi, alpha_1.., beta_1..`.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["c".to_string(), "phi".to_string()];
        names.extend((1..=self.k()).map(|j| format!("alpha_{j}")));
        names.extend((1..=self.l()).map(|j| format!("beta_{j}")));
        names
    }

    /// `c + alpha . r + beta . m`, the part of the prediction that does not
    /// depend on the propensity.
    pub(crate) fn drive(&self, r: &[u32], m: &[u32]) -> f64 {
        let mut acc = self.c;
        for (a, &n) in self.alpha.iter().zip(r) {
            acc += a * f64::from(n);
        }
        for (b, &n) in self.beta.iter().zip(m) {
            acc += b * f64::from(n);
        }
        acc
    }
}

/// Latent path for one customer: filtered states `x` (length `T`) and
/// predictive states `s` (length `T + 1`), anchored at the prior state `x0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityPath {
    pub x0: f64,
    pub x: Vec<f64>,
    pub s: Vec<f64>,
}

impl PropensityPath {
    /// Builds a path from filtered states, recomputing `s` with
    /// [`predict_propensity`].
    pub fn from_states(
        params: &ModelParams,
        history: &CustomerHistory,
        x0: f64,
        x: Vec<f64>,
    ) -> Result<Self> {
        params.check_channels(history.k(), history.l())?;
        check_dim("filtered path", history.horizon(), x.len())?;
        let s = predictive_states(params, history, x0, &x);
        Ok(PropensityPath { x0, x, s })
    }

    pub fn horizon(&self) -> usize {
        self.x.len()
    }
}

/// `s[0..=T]` for fixed states; dimensions must already be checked.
pub(crate) fn predictive_states(
    params: &ModelParams,
    history: &CustomerHistory,
    x0: f64,
    x: &[f64],
) -> Vec<f64> {
    let zeros_r = vec![0u32; history.k()];
    let zeros_m = vec![0u32; history.l()];
    let mut s = Vec::with_capacity(x.len() + 1);
    s.push(predict_unchecked(params, x0, &zeros_r, &zeros_m));
    for (t, &xt) in x.iter().enumerate() {
        s.push(predict_unchecked(params, xt, history.r(t), history.m(t)));
    }
    s
}

#[inline]
pub(crate) fn predict_unchecked(params: &ModelParams, x_t: f64, r_t: &[u32], m_t: &[u32]) -> f64 {
    params.phi * x_t + params.drive(r_t, m_t)
}

/// Next-day predictive propensity `c + phi * x_t + alpha . r_t + beta . m_t`.
pub fn predict_propensity(params: &ModelParams, x_t: f64, r_t: &[u32], m_t: &[u32]) -> Result<f64> {
    check_dim("r_t", params.k(), r_t.len())?;
    check_dim("m_t", params.l(), m_t.len())?;
    Ok(predict_unchecked(params, x_t, r_t, m_t))
}

/// Logistic function, split on sign so neither branch overflows.
#[inline]
pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(s)` without cancellation in either tail.
#[inline]
pub fn log_sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    }
}

/// Log Bernoulli mass of `y` under success probability `sigmoid(s)`.
#[inline]
pub fn log_bernoulli_logit(y: u8, s: f64) -> f64 {
    if y == 1 {
        log_sigmoid(s)
    } else {
        log_sigmoid(-s)
    }
}

/// Log density of `N(mean, 1)` at `x`.
#[inline]
pub fn log_std_normal(x: f64, mean: f64) -> f64 {
    let d = x - mean;
    -HALF_LN_2PI - 0.5 * d * d
}

/// Purchase probability `1 / (1 + exp(-s))`.
pub fn purchase_prob(s: f64) -> Result<f64> {
    if !s.is_finite() {
        return Err(DpmError::NonFinite("predictive propensity"));
    }
    Ok(sigmoid(s))
}

/// The two sums making up [`log_joint`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTerms {
    /// `sum_t ln Bernoulli(y[t]; sigmoid(s[t]))`
    pub emission: f64,
    /// `sum_t ln N(x[t]; s[t], 1)`
    pub transition: f64,
}

impl JointTerms {
    pub fn total(&self) -> f64 {
        self.emission + self.transition
    }
}

/// Emission and transition sums of the conditional log-likelihood.
///
/// The predictive states are re-evaluated from `path.x0` and `path.x` under
/// `params`; `path.s` is not consulted, so the value is a function of the
/// parameters for a fixed latent path.
pub fn log_joint_terms(
    params: &ModelParams,
    history: &CustomerHistory,
    path: &PropensityPath,
) -> Result<JointTerms> {
    params.check_channels(history.k(), history.l())?;
    check_dim("filtered path", history.horizon(), path.x.len())?;
    check_dim("predictive path", history.horizon() + 1, path.s.len())?;
    let s = predictive_states(params, history, path.x0, &path.x);
    let mut emission = 0.0;
    let mut transition = 0.0;
    for (t, (&yt, &xt)) in history.y().iter().zip(&path.x).enumerate() {
        emission += log_bernoulli_logit(yt, s[t]);
        transition += log_std_normal(xt, s[t]);
    }
    Ok(JointTerms {
        emission,
        transition,
    })
}

/// Per-customer conditional log-likelihood for a fixed latent path.
pub fn log_joint(params: &ModelParams, history: &CustomerHistory, path: &PropensityPath) -> Result<f64> {
    log_joint_terms(params, history, path).map(|terms| terms.total())
}
