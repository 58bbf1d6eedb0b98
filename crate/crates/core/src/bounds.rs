//! Closed-form misclassification bounds and sample complexities.
//!
//! Every evaluator clamps its error bound to `[0, 1]` and records whether it
//! clamped. Sample complexities written as `O(·)` are evaluated with unit
//! constants and flagged `order_level`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::seeded_rng;
use crate::stats::{mean_stderr, phi};

/// Parameters shared by the evaluators. Unused fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    pub n: usize,
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Number of pre-training classes for the domain-adaptation variant.
    #[serde(rename = "K0", default)]
    pub k0: Option<usize>,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub beta_tilde: f64,
    #[serde(default)]
    pub beta0: f64,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Projection radius `R`.
    #[serde(rename = "R", default)]
    pub radius: Option<f64>,
    /// Number of projected steps `k`.
    #[serde(rename = "k", default)]
    pub steps: Option<u32>,
    /// Tail parameter `t`.
    #[serde(rename = "t", default)]
    pub tail: Option<f64>,
    /// Noise standard deviation, for the perfect-collapse formula.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub independent_coordinates: bool,
}

impl Default for BoundQuery {
    fn default() -> Self {
        Self {
            n: 1,
            p: 1,
            k: 2,
            k0: None,
            beta: 0.0,
            beta_tilde: 0.0,
            beta0: 0.0,
            rho: None,
            gamma: None,
            alpha: None,
            radius: None,
            steps: None,
            tail: None,
            sigma: None,
            independent_coordinates: false,
        }
    }
}

impl BoundQuery {
    fn check(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("beta_tilde", self.beta_tilde), ("beta0", self.beta0)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(invalid("gamma", format!("must lie in (0, 1), got {g}")));
            }
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(invalid("alpha", format!("must lie in (0, 1), got {a}")));
            }
        }
        Ok(())
    }

    fn rho(&self) -> Result<f64> {
        match self.rho {
            Some(r) if r > 0.0 && r.is_finite() => Ok(r),
            Some(r) if r == 0.0 => Err(Error::InfiniteNoise),
            Some(r) => Err(invalid("rho", format!("must be positive, got {r}"))),
            None => Err(invalid("rho", "required")),
        }
    }

    fn gamma_log(&self) -> Option<f64> {
        self.gamma.map(|g| (1.0 / g).ln())
    }

    /// `β²p`.
    fn b2p(&self) -> f64 {
        self.beta * self.beta * self.p as f64
    }

    /// Variance term of the shift: `β⁴p² + β²p/3`, or `β⁴p + β²/3` when
    /// coordinates are independent.
    fn shift_spread(&self) -> f64 {
        let (b, p) = (self.beta, self.p as f64);
        if self.independent_coordinates {
            b.powi(4) * p + b * b / 3.0
        } else {
            b.powi(4) * p * p + b * b * p / 3.0
        }
    }
}

/// Outcome of one evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub formula_id: String,
    /// Error bound clamped to `[0, 1]`.
    pub error_bound: f64,
    /// Value before clamping.
    pub raw_bound: f64,
    pub clamped: bool,
    /// The hypotheses fail, so the bound carries no information.
    pub vacuous: bool,
    pub sample_complexity: Option<u64>,
    /// Sample complexity comes from an `O(·)` expression with unit constants.
    pub order_level: bool,
    /// Standard error, for Monte Carlo evaluators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    /// Related quantities reported next to the main value.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub companions: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl BoundResult {
    fn new(formula_id: &str, raw: f64) -> Self {
        let clamped_value = if raw.is_nan() { 1.0 } else { raw.clamp(0.0, 1.0) };
        Self {
            formula_id: formula_id.to_string(),
            error_bound: clamped_value,
            raw_bound: raw,
            clamped: clamped_value != raw,
            vacuous: false,
            sample_complexity: None,
            order_level: false,
            stderr: None,
            companions: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn vacuous(formula_id: &str, why: &str) -> Self {
        let mut r = Self::new(formula_id, 1.0);
        r.vacuous = true;
        r.notes.push(why.to_string());
        r
    }

    fn with_complexity(mut self, n: Option<f64>, order_level: bool) -> Self {
        self.sample_complexity = n.map(ceil_count);
        self.order_level = order_level && n.is_some();
        self
    }

    fn companion(mut self, name: &str, value: f64) -> Self {
        self.companions.insert(name.to_string(), value);
        self
    }

    fn note(mut self, text: &str) -> Self {
        self.notes.push(text.to_string());
        self
    }
}

fn ceil_count(x: f64) -> u64 {
    if x.is_finite() {
        x.ceil().max(1.0) as u64
    } else {
        u64::MAX
    }
}

/// One-step noiseless gradient descent under stochastic shifts.
///
/// Zero when `β²p ≤ 1` and `n ≥ K`; otherwise `exp(-n / (2 S))` with `S` the
/// shift spread. The sample complexity inverts the bound at `γ`.
pub fn gd_error_bound(q: &BoundQuery) -> Result<BoundResult> {
    q.check()?;
    let id = "gd-error";
    if q.b2p() <= 1.0 {
        if q.n >= q.k {
            return Ok(BoundResult::new(id, 0.0).with_complexity(Some(q.k as f64), false));
        }
        return Ok(BoundResult::vacuous(id, "n is below the number of classes")
            .with_complexity(Some(q.k as f64), false));
    }
    let s = q.shift_spread();
    let raw = (-(q.n as f64) / (2.0 * s)).exp();
    let n_star = q.gamma_log().map(|l| 2.0 * s * l);
    Ok(BoundResult::new(id, raw).with_complexity(n_star, false))
}

/// One-step noisy gradient descent: privacy term plus shift term.
pub fn noisygd_error_bound(q: &BoundQuery) -> Result<BoundResult> {
    q.check()?;
    let rho = q.rho()?;
    let n = q.n as f64;
    let g2 = 1.0 + q.b2p();
    let privacy = (-(n * n * rho) / (2.0 * g2 * g2)).exp();
    let s = q.shift_spread();
    let shift = if s > 0.0 { (-n / (8.0 * s)).exp() } else { 0.0 };
    let n_star = q.gamma_log().map(|l| {
        let b = q.beta;
        let p = q.p as f64;
        let tail = if q.independent_coordinates { 4.0 * p * b.powi(4) * l } else { p * b * b * l };
        g2 * g2 * l.sqrt() / (2.0 * rho) + tail
    });
    Ok(BoundResult::new("noisygd-error", privacy + shift)
        .with_complexity(n_star, true)
        .companion("privacy_term", privacy)
        .companion("shift_term", shift))
}

/// Deterministic shifts with `β²p < 1`, noise `σ² = (1 + β²p) / (2ρ)`.
pub fn deterministic_shift_bound(q: &BoundQuery) -> Result<BoundResult> {
    q.check()?;
    let rho = q.rho()?;
    let id = "deterministic-shift";
    let b2p = q.b2p();
    if b2p >= 1.0 {
        return Ok(BoundResult::vacuous(id, "requires beta^2 p < 1"));
    }
    let n = q.n as f64;
    let sigma_sq = (1.0 + b2p) / (2.0 * rho);
    let raw = (-(n * n * (1.0 - b2p).powi(2)) / ((1.0 + b2p) * sigma_sq)).exp();
    let n_star = q.gamma_log().map(|l| (1.0 + b2p) * l / (2.0 * rho * (1.0 - b2p).powi(2)));
    Ok(BoundResult::new(id, raw).with_complexity(n_star, true).companion("sigma_sq", sigma_sq))
}

/// The constant `C_{p,k}` of the projected multi-step bound, as stated.
pub fn projected_constant(k: u32, radius: f64, b2p: f64) -> f64 {
    let h = 0.5f64.powi(k as i32);
    let lead = (1.0 + h) / (1.0 - h) * ((1.0 - 0.5) / (1.0 + 0.5));
    lead * (1.0 + (radius * (1.0 + b2p)).exp()).powi(2) / (1.0 - b2p).powi(2)
}

/// Projected multi-step noisy gradient descent.
pub fn projected_multi_iter_bound(q: &BoundQuery) -> Result<BoundResult> {
    q.check()?;
    let rho = q.rho()?;
    let radius = q.radius.ok_or_else(|| invalid("R", "required"))?;
    let k = q.steps.ok_or_else(|| invalid("k", "required"))?;
    let t = q.tail.ok_or_else(|| invalid("t", "required"))?;
    if k == 0 {
        return Err(invalid("k", "must be at least 1"));
    }
    let id = "projected-multi-iter";
    let b2p = q.b2p();
    if b2p >= 1.0 {
        return Ok(BoundResult::vacuous(id, "requires beta^2 p < 1"));
    }
    let n = q.n as f64;
    let sigma_sq = (1.0 + b2p) / (2.0 * rho);
    let c = projected_constant(k, radius, b2p);
    let main = (-(n * n) / (c * c * sigma_sq * (1.0 + b2p))).exp();
    let tail = f64::from(k) * (-t).exp();
    let mut r = BoundResult::new(id, main + tail)
        .companion("C_pk", c)
        .companion("tail_term", tail)
        .note("tightness of the stated constant is only checked by simulation");
    let default_t = n * n + (1.0 / f64::from(k)).ln();
    if (t - default_t).abs() <= 1e-9 * default_t.abs().max(1.0) {
        r = r.companion("simplified_order_form", (-(rho * n * n) / (1.0 + b2p).powi(2)).exp());
    }
    Ok(r)
}

/// Perfect collapse, one noisy step from zero with noise `sigma`.
///
/// Without `K0`: `(K-1) Φ(-(n/(Kσ)) (1 + (K-2)/(K(K-1))))`. With `K0`:
/// `(K-1) Φ(-n C/σ)`, `C = (1/K)(K K0 - 2)/(K²(K0 - 1))`. Both are the
/// stated forms. Companions carry the variant with a `√2 σ` spread (the
/// difference of two independent noise coordinates), the domain-adaptation
/// constant without the leading `1/K`, and the union bound at the exact
/// mean gap `n K0 / (K (K0 - 1))`.
pub fn perfect_nc_error(n: usize, k: usize, k0: Option<usize>, sigma: f64) -> Result<BoundResult> {
    if k < 2 {
        return Err(Error::TooFewClasses(k));
    }
    if n < k {
        return Err(invalid("n", format!("need n >= K = {k}, got {n}")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(invalid("sigma", format!("must be positive, got {sigma}")));
    }
    let (nf, kf) = (n as f64, k as f64);
    let km1 = kf - 1.0;
    let sqrt2 = std::f64::consts::SQRT_2;
    let (id, gap) = match k0 {
        None => ("perfect-collapse", (nf / kf) * (1.0 + (kf - 2.0) / (kf * km1))),
        Some(k0) if k0 < k => {
            return Err(invalid("K0", format!("must be at least K = {k}, got {k0}")));
        }
        Some(k0) if k0 < 2 => return Err(Error::TooFewClasses(k0)),
        Some(k0) => {
            let k0f = k0 as f64;
            ("domain-adaptation", nf * (kf * k0f - 2.0) / (kf * kf * kf * (k0f - 1.0)))
        }
    };
    let k0f = k0.map_or(kf, |v| v as f64);
    let exact_gap = nf * k0f / (kf * (k0f - 1.0));
    let mut r = BoundResult::new(id, km1 * phi(-gap / sigma))
        .companion("sqrt2_spread", (km1 * phi(-gap / (sqrt2 * sigma))).min(1.0))
        .companion("exact_gap_union", (km1 * phi(-exact_gap / (sqrt2 * sigma))).min(1.0));
    if let Some(k0) = k0 {
        let k0f = k0 as f64;
        let proof_gap = nf * (kf * k0f - 2.0) / (kf * kf * (k0f - 1.0));
        r = r
            .companion("proof_constant", (km1 * phi(-proof_gap / sigma)).min(1.0))
            .note("the stated argument sign is taken as negative so the value is an error bound");
    }
    if k > 2 {
        r = r.note("stated spread uses sigma; the score difference has spread sqrt(2) sigma");
    }
    Ok(r)
}

/// PCA mitigation: `n = ceil(sqrt(G² ln(2/γ) / (M ρ)))`.
pub fn pca_sample_complexity(q: &BoundQuery) -> Result<BoundResult> {
    q.check()?;
    let rho = q.rho()?;
    let gamma = q.gamma.ok_or_else(|| invalid("gamma", "required"))?;
    let (b, b0, p) = (q.beta, q.beta0, q.p as f64);
    let g = 1.0 + b * (1.0 + b0 + p * b0);
    let m = (1.0 - b0).powi(2)
        - p * b * b0
        - (1.0 + b0) * (b + b0 * p)
        - (b + b0 * p) * (1.0 + b + b0 + b * b0 * p);
    if m <= 0.0 {
        return Err(Error::MitigationInsufficient { g, m });
    }
    let n = (g * g * (2.0 / gamma).ln() / (m * rho)).sqrt();
    let relaxed = b * b0 * p <= 1.0;
    Ok(BoundResult::new("pca-sample-complexity", gamma)
        .with_complexity(Some(n), false)
        .companion("G", g)
        .companion("M", m)
        .companion("relaxed_condition_holds", if relaxed { 1.0 } else { 0.0 }))
}

/// Rows of the sample-complexity summary table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Table1Setting {
    #[serde(rename = "perfect-NC")]
    PerfectNc,
    #[serde(rename = "approx-NC")]
    ApproxNc,
    #[serde(rename = "approx-NC-separable")]
    ApproxNcSeparable,
    #[serde(rename = "stochastic-test")]
    StochasticTest,
    #[serde(rename = "adversarial-test")]
    AdversarialTest,
    #[serde(rename = "offset-train")]
    OffsetTrain,
    #[serde(rename = "offset-train-imbalanced")]
    OffsetTrainImbalanced,
}

impl Table1Setting {
    pub const ALL: [Table1Setting; 7] = [
        Table1Setting::PerfectNc,
        Table1Setting::ApproxNc,
        Table1Setting::ApproxNcSeparable,
        Table1Setting::StochasticTest,
        Table1Setting::AdversarialTest,
        Table1Setting::OffsetTrain,
        Table1Setting::OffsetTrainImbalanced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Table1Setting::PerfectNc => "perfect-NC",
            Table1Setting::ApproxNc => "approx-NC",
            Table1Setting::ApproxNcSeparable => "approx-NC-separable",
            Table1Setting::StochasticTest => "stochastic-test",
            Table1Setting::AdversarialTest => "adversarial-test",
            Table1Setting::OffsetTrain => "offset-train",
            Table1Setting::OffsetTrainImbalanced => "offset-train-imbalanced",
        }
    }

    /// Whether a non-private entry exists.
    pub fn has_nonprivate(self) -> bool {
        matches!(self, Table1Setting::PerfectNc | Table1Setting::ApproxNc | Table1Setting::ApproxNcSeparable)
    }
}

impl fmt::Display for Table1Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Table1Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Table1Setting::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown { kind: "setting", name: s.to_string() })
    }
}

/// Sample complexity from the summary table, unit constants, ceil-rounded.
pub fn table1_sample_complexity(setting: Table1Setting, private: bool, q: &BoundQuery) -> Result<BoundResult> {
    q.check()?;
    let id = format!("table1:{}:{}", setting.name(), if private { "private" } else { "nonprivate" });
    let l = q.gamma_log().ok_or_else(|| invalid("gamma", "required"))?;
    let (b, bt, p) = (q.beta, q.beta_tilde, q.p as f64);
    let b2p = q.b2p();
    let n = if !private {
        match setting {
            Table1Setting::PerfectNc => q.k as f64,
            Table1Setting::ApproxNc if b2p <= 1.0 => q.k as f64,
            Table1Setting::ApproxNc => p * b * b * l,
            Table1Setting::ApproxNcSeparable if b2p <= 1.0 => q.k as f64,
            Table1Setting::ApproxNcSeparable => p * b.powi(4) * l,
            other => {
                return Err(Error::Unknown { kind: "non-private setting", name: other.name().to_string() })
            }
        }
    } else {
        let rho = q.rho()?;
        let s = l.sqrt() / (2.0 * rho).sqrt();
        match setting {
            Table1Setting::PerfectNc => 2.0 * l.sqrt() / rho.sqrt(),
            Table1Setting::ApproxNc => p * b * b * l + b2p.max(1.0) * s,
            Table1Setting::ApproxNcSeparable => p * b.powi(4) * l + b2p.max(1.0) * s,
            Table1Setting::StochasticTest | Table1Setting::OffsetTrain => (p.sqrt() * bt).max(1.0) * s,
            Table1Setting::AdversarialTest => (p * bt).max(1.0) * s,
            Table1Setting::OffsetTrainImbalanced => {
                let a = q.alpha.ok_or_else(|| invalid("alpha", "required"))?;
                (p.sqrt() * bt).max(1.0) * s / (1.0 - bt + 2.0 * bt * a)
            }
        }
    };
    let order = !(matches!(setting, Table1Setting::PerfectNc) && !private);
    Ok(BoundResult::new(&id, q.gamma.unwrap_or(1.0)).with_complexity(Some(n), order))
}

/// `μ(ξ) = -ξ - n e^{-ξ} / (1 + e^{-ξ})`.
fn random_init_mean(xi: f64, n: usize) -> f64 {
    // e^{-ξ}/(1+e^{-ξ}) = 1/(1+e^{ξ}), stable for large |ξ|.
    -xi - n as f64 / (1.0 + xi.exp())
}

/// Integrand of the Gaussian-initialization error.
pub fn random_init_integrand(xi: f64, n: usize, rho: f64, g: f64) -> f64 {
    phi((2.0 * rho).sqrt() * random_init_mean(xi, n) / g)
}

/// Monte Carlo estimate of `E_ξ[Φ(sqrt(2ρ) μ(ξ) / G)]` for `ξ ~ N(0, 1)`:
/// the error on the class `-1` test point after one step from a Gaussian
/// initialization.
pub fn random_init_error(n: usize, rho: f64, g: f64, num_draws: usize, seed: u64) -> Result<BoundResult> {
    if num_draws < 10_000 {
        return Err(invalid("num_draws", format!("need at least 10^4 draws, got {num_draws}")));
    }
    if !(rho.is_finite() && rho > 0.0) {
        return Err(invalid("rho", format!("must be positive, got {rho}")));
    }
    if !(g.is_finite() && g > 0.0) {
        return Err(invalid("G", format!("must be positive, got {g}")));
    }
    let mut rng = seeded_rng(seed);
    let values: Vec<f64> = (0..num_draws)
        .map(|_| {
            let xi: f64 = StandardNormal.sample(&mut rng);
            random_init_integrand(xi, n, rho, g)
        })
        .collect();
    let (mean, se) = mean_stderr(&values);
    let mut r = BoundResult::new("random-init", mean);
    r.stderr = Some(se);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gd_zero_regime() {
        let q = BoundQuery { n: 5, p: 10, k: 2, ..BoundQuery::default() };
        assert_eq!(gd_error_bound(&q).unwrap().error_bound, 0.0);
    }

    #[test]
    fn deterministic_vacuous_at_boundary() {
        let q = BoundQuery { n: 10, p: 100, beta: 0.1, rho: Some(1.0), ..BoundQuery::default() };
        let r = deterministic_shift_bound(&q).unwrap();
        assert!(r.vacuous);
        assert_eq!(r.error_bound, 1.0);
    }

    #[test]
    fn projected_leading_factor() {
        let c = projected_constant(3, 0.0, 0.0);
        // (9/8)/(7/8)/3 times (1 + 1)^2 / 1.
        assert!((c - 4.0 * 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn projected_requires_parameters() {
        let q = BoundQuery { n: 10, rho: Some(1.0), ..BoundQuery::default() };
        assert!(projected_multi_iter_bound(&q).is_err());
    }

    #[test]
    fn unknown_setting() {
        assert!("nope".parse::<Table1Setting>().is_err());
        assert_eq!("perfect-nc".parse::<Table1Setting>().unwrap(), Table1Setting::PerfectNc);
    }

    #[test]
    fn nonprivate_only_where_defined() {
        let q = BoundQuery { gamma: Some(0.1), ..BoundQuery::default() };
        assert!(table1_sample_complexity(Table1Setting::AdversarialTest, false, &q).is_err());
    }

    #[test]
    fn random_init_needs_draws() {
        assert!(random_init_error(4, 0.1, 1.0, 100, 0).is_err());
    }
}
