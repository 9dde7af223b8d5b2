//! Privacy budgets, regime conversions, composition and the Gaussian mechanism.
//!
//! Budgets are plain values. Estimators report what they spent as a
//! [`PrivacyBudget`]; the harness composes and checks the totals.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_param, Result};
use crate::linalg::SymMatrix;
use crate::noise::NoiseSource;

/// A privacy guarantee in one of three regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum PrivacyBudget {
    Zcdp { rho: f64 },
    PureDp { eps: f64 },
    ApproxDp { eps: f64, delta: f64 },
}

impl PrivacyBudget {
    pub fn zcdp(rho: f64) -> Result<Self> {
        check_param(rho.is_finite() && rho >= 0.0, || format!("rho must be >= 0, got {rho}"))?;
        Ok(PrivacyBudget::Zcdp { rho })
    }

    pub fn pure_dp(eps: f64) -> Result<Self> {
        check_param(eps.is_finite() && eps >= 0.0, || format!("eps must be >= 0, got {eps}"))?;
        Ok(PrivacyBudget::PureDp { eps })
    }

    pub fn approx_dp(eps: f64, delta: f64) -> Result<Self> {
        check_param(eps.is_finite() && eps >= 0.0, || format!("eps must be >= 0, got {eps}"))?;
        check_param((0.0..1.0).contains(&delta), || format!("delta must be in [0,1), got {delta}"))?;
        Ok(PrivacyBudget::ApproxDp { eps, delta })
    }

    pub fn rho(&self) -> Option<f64> {
        match *self {
            PrivacyBudget::Zcdp { rho } => Some(rho),
            _ => None,
        }
    }

    /// (ε, δ) view of the guarantee; zCDP is converted at `delta`.
    pub fn to_approx_dp(&self, delta: f64) -> Result<(f64, f64)> {
        match *self {
            PrivacyBudget::Zcdp { rho } => zcdp_to_approx_dp(rho, delta),
            PrivacyBudget::PureDp { eps } => Ok((eps, 0.0)),
            PrivacyBudget::ApproxDp { eps, delta } => Ok((eps, delta)),
        }
    }
}

pub fn compose_zcdp(rhos: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &r in rhos {
        check_param(r.is_finite() && r >= 0.0, || format!("rho must be >= 0, got {r}"))?;
        total += r;
    }
    Ok(total)
}

/// ρ-zCDP implies (ρ + 2√(ρ ln(1/δ)), δ)-DP.
pub fn zcdp_to_approx_dp(rho: f64, delta: f64) -> Result<(f64, f64)> {
    check_param(rho.is_finite() && rho >= 0.0, || format!("rho must be >= 0, got {rho}"))?;
    check_param(delta > 0.0 && delta < 1.0, || format!("delta must be in (0,1), got {delta}"))?;
    Ok((rho + 2.0 * (rho * (1.0 / delta).ln()).sqrt(), delta))
}

/// ε-DP implies ε²/2-zCDP.
pub fn pure_dp_to_zcdp(eps: f64) -> f64 {
    eps * eps / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApproxComposition {
    Basic,
    /// Advanced composition with slack δ₀; every step must share the same ε₀ ≤ 1.
    Advanced {
        delta0: f64,
    },
}

pub fn compose_approx_dp(budgets: &[(f64, f64)], mode: ApproxComposition) -> Result<(f64, f64)> {
    for &(e, d) in budgets {
        check_param(e.is_finite() && e >= 0.0, || format!("eps must be >= 0, got {e}"))?;
        check_param((0.0..1.0).contains(&d), || format!("delta must be in [0,1), got {d}"))?;
    }
    let delta_sum: f64 = budgets.iter().map(|b| b.1).sum();
    match mode {
        ApproxComposition::Basic => Ok((budgets.iter().map(|b| b.0).sum(), delta_sum)),
        ApproxComposition::Advanced { delta0 } => {
            check_param(delta0 > 0.0 && delta0 < 1.0, || format!("delta0 must be in (0,1), got {delta0}"))?;
            let Some(&(eps0, _)) = budgets.first() else {
                return Ok((0.0, delta0));
            };
            check_param(eps0 <= 1.0, || format!("advanced composition needs eps0 <= 1, got {eps0}"))?;
            check_param(budgets.iter().all(|b| b.0 == eps0), || {
                "advanced composition needs equal per-step eps".to_string()
            })?;
            let t = budgets.len() as f64;
            Ok((eps0 * (6.0 * t * (1.0 / delta0).ln()).sqrt(), delta0 + delta_sum))
        }
    }
}

/// Noise standard deviation of the Gaussian mechanism: Δ₂/√(2ρ).
pub fn gaussian_sigma(sensitivity: f64, rho: f64) -> Result<f64> {
    check_param(rho > 0.0 && rho.is_finite(), || format!("rho must be > 0, got {rho}"))?;
    check_param(sensitivity >= 0.0, || format!("sensitivity must be >= 0, got {sensitivity}"))?;
    Ok(sensitivity / (2.0 * rho).sqrt())
}

pub fn gaussian_mechanism_vector(
    v: &DVector<f64>,
    sensitivity: f64,
    rho: f64,
    noise: &mut NoiseSource,
) -> Result<DVector<f64>> {
    let sigma = gaussian_sigma(sensitivity, rho)?;
    let mut out = v.clone();
    if sigma == 0.0 || noise.is_zero_noise() {
        return Ok(out);
    }
    for x in out.iter_mut() {
        *x += noise.gaussian(sigma);
    }
    Ok(out)
}

/// Adds GUE(σ²) noise with σ = Δ_F/√(2ρ): i.i.d. draws on and above the
/// diagonal, mirrored below.
pub fn gaussian_mechanism_symmetric(
    m: &SymMatrix,
    sensitivity: f64,
    rho: f64,
    noise: &mut NoiseSource,
) -> Result<SymMatrix> {
    let sigma = gaussian_sigma(sensitivity, rho)?;
    if sigma == 0.0 || noise.is_zero_noise() {
        return Ok(m.clone());
    }
    Ok(m.add(&gue(m.dim(), sigma, noise)))
}

/// A GUE(σ²) draw.
pub fn gue(d: usize, sigma: f64, noise: &mut NoiseSource) -> SymMatrix {
    let mut n = nalgebra::DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let z = noise.gaussian(sigma);
            n[(i, j)] = z;
            n[(j, i)] = z;
        }
    }
    SymMatrix::from_symmetric_unchecked(n)
}
