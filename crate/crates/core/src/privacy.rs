//! zCDP accounting for the Gaussian mechanism.
//!
//! All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::synth::{NoiseLaw, ShiftKind, ShiftModel};

/// A zCDP budget `ρ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub rho: f64,
}

impl PrivacyBudget {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(invalid("rho", format!("must be finite and non-negative, got {rho}")));
        }
        Ok(Self { rho })
    }

    /// Budget equivalent to `(epsilon, delta)`-DP.
    pub fn from_dp(epsilon: f64, delta: f64) -> Result<Self> {
        Self::new(dp_to_zcdp(epsilon, delta)?)
    }
}

/// Gaussian noise scale for one release.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    /// L2 sensitivity `G`.
    pub sensitivity: f64,
    /// Per-coordinate variance `σ²`.
    pub sigma_sq: f64,
}

impl NoiseCalibration {
    /// No noise at all, for the non-private baseline.
    pub fn noiseless() -> Self {
        Self { sensitivity: f64::INFINITY, sigma_sq: 0.0 }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_sq.sqrt()
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma_sq == 0.0
    }
}

/// `σ² = G² / (2ρ)`.
pub fn calibrate(sensitivity: f64, budget: PrivacyBudget) -> Result<NoiseCalibration> {
    if !(sensitivity.is_finite() && sensitivity > 0.0) {
        return Err(invalid("sensitivity", format!("must be positive, got {sensitivity}")));
    }
    if budget.rho == 0.0 {
        return Err(Error::InfiniteNoise);
    }
    Ok(NoiseCalibration { sensitivity, sigma_sq: sensitivity * sensitivity / (2.0 * budget.rho) })
}

fn check_delta(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid("delta", format!("must lie in (0, 1), got {delta}")));
    }
    Ok((1.0 / delta).ln())
}

/// `ε = ρ + 2 sqrt(ρ ln(1/δ))`.
pub fn zcdp_to_dp(rho: f64, delta: f64) -> Result<f64> {
    let l = check_delta(delta)?;
    PrivacyBudget::new(rho)?;
    Ok(rho + 2.0 * (rho * l).sqrt())
}

/// Inverse of [`zcdp_to_dp`]: `ρ = (sqrt(ln(1/δ) + ε) - sqrt(ln(1/δ)))²`.
pub fn dp_to_zcdp(epsilon: f64, delta: f64) -> Result<f64> {
    let l = check_delta(delta)?;
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(invalid("epsilon", format!("must be finite and non-negative, got {epsilon}")));
    }
    // Rationalized form avoids cancellation for small ε.
    let d = epsilon / ((l + epsilon).sqrt() + l.sqrt());
    Ok(d * d)
}

/// Budget spent by `steps` adaptive releases at `rho_per_step` each.
pub fn compose(rho_per_step: f64, steps: u32) -> Result<PrivacyBudget> {
    PrivacyBudget::new(rho_per_step * f64::from(steps))
}

/// Row-norm bound `sqrt(1 + β²p)` for features `M_y + v` with `‖v‖∞ ≤ β`,
/// or 1 when rows are clipped to the unit ball.
pub fn sensitivity_bound(shift: &ShiftModel, p: usize, clip_to_unit: bool) -> Result<f64> {
    if clip_to_unit {
        return Ok(1.0);
    }
    match shift.kind {
        ShiftKind::None | ShiftKind::AdversarialTest => Ok(1.0),
        ShiftKind::Stochastic if matches!(shift.law, NoiseLaw::Gaussian { .. }) => {
            Err(Error::UnboundedShift)
        }
        ShiftKind::Stochastic | ShiftKind::Offset => {
            let b = shift.beta;
            if !b.is_finite() {
                return Err(Error::UnboundedShift);
            }
            Ok((1.0 + b * b * p as f64).sqrt())
        }
    }
}
