//! Gaussian mean estimation.
//!
//! [`univariate_mean`] is a histogram-then-CDF estimator. The variance is
//! only known up to κ, so it runs in three stages:
//!
//! 1. Scale (ρ/4). Data is rescaled by s = 1/√κ, putting the working std in
//!    [s, 1]. Differences of sample pairs are N(0, σ_w²) whatever the mean;
//!    their octave ⌊log₂|D|⌋ is histogrammed and the heaviest octave gives
//!    σ̃ within a factor of about two.
//! 2. Location (ρ/4). The data is bucketed into intervals of width
//!    w = min(√2·σ̃, 1) covering [−R·s, R·s]; out-of-range values are
//!    clamped to the end buckets. The heaviest bucket (≥ 1/4) gives a coarse
//!    center μ̃. No heavy bucket means ⊥.
//! 3. CDF (ρ/2). On the held-out half, the empirical CDF is released at
//!    17 points μ̃ + (j/4)·w, j = −8..8 (Δ₂ = √17/m). A weighted
//!    least-squares probit fit Φ⁻¹(p̂) = (q − μ)/σ then gives μ̂.
//!
//! With known unit variance, step 3 at the single point μ̃ reduces to
//! μ̂ = μ̃ − Φ⁻¹(p̂). The multi-point fit removes the bias that one-point
//! inversion has whenever σ_w ≠ 1.
//!
//! [`naive_pme`] runs the univariate estimator per coordinate. [`pme`]
//! first preconditions with [`ppc`] on difference pairs, so the accuracy
//! no longer depends on κ.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cov::{pgce, ppc, CovEstimate, Preconditioner};
use crate::error::{check_param, Error, Result};
use crate::histogram::{argmax_bucket, histogram_zcdp, BucketKey};
use crate::linalg::{inv_psd, transform_rows};
use crate::noise::NoiseSource;
use crate::normal;
use crate::privacy::{gaussian_mechanism_vector, gaussian_sigma, PrivacyBudget};

/// Heaviest-octave position of |D|/σ for D ~ N(0, σ²).
const OCTAVE_PEAK: f64 = 0.665;
pub const CDF_POINTS: usize = 17;
const FIT_LOW: f64 = 0.02;
const FIT_HIGH: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortStage {
    Scale,
    Location,
    Fit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abort {
    pub coordinate: usize,
    pub stage: AbortStage,
}

/// Everything `univariate_mean` released, in working (rescaled) units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateDiagnostics {
    /// s = 1/√κ.
    pub scale: f64,
    pub sigma_tilde: Option<f64>,
    pub bucket_width: Option<f64>,
    pub mu_tilde: Option<f64>,
    pub grid: Vec<f64>,
    pub p_hat: Vec<f64>,
    /// Declared std of the CDF noise.
    pub cdf_noise_std: f64,
    /// Held-out sample count.
    pub m: usize,
    pub fit_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    /// `None` exactly when `aborted` is set.
    pub mu_hat: Option<DVector<f64>>,
    pub budget_spent: PrivacyBudget,
    /// Coarse histogram centers μ̃ in original units.
    pub weak_estimate: Option<DVector<f64>>,
    pub aborted: Option<Abort>,
    pub coords: Vec<UnivariateDiagnostics>,
    pub preconditioner: Option<Preconditioner>,
    /// Rows left over when the sample count is not a multiple of 3 (`pme`).
    pub ignored_rows: usize,
}

impl MeanEstimate {
    pub fn is_aborted(&self) -> bool {
        self.aborted.is_some()
    }
}

/// Fraction of `held` that is ≤ t.
pub fn empirical_cdf(held: &[f64], t: f64) -> f64 {
    held.iter().filter(|&&v| v <= t).count() as f64 / held.len() as f64
}

fn octave_key(v: f64, lo: i64, hi: i64) -> BucketKey {
    let k = if v > 0.0 { v.log2().floor() as i64 } else { lo };
    BucketKey::Index(k.clamp(lo, hi))
}

struct Univariate {
    mu_hat: Option<f64>,
    stage: Option<AbortStage>,
    diag: UnivariateDiagnostics,
}

/// Weighted least-squares fit of z = a + b·q; returns the root −a/b.
pub fn probit_fit(grid: &[f64], p_hat: &[f64], m: usize, noise_std: f64) -> Option<(f64, usize)> {
    let (mut sw, mut sq, mut sz, mut sqq, mut sqz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut used = 0;
    for (&q, &p) in grid.iter().zip(p_hat) {
        if !(FIT_LOW..=FIT_HIGH).contains(&p) {
            continue;
        }
        let z = normal::inv_cdf(p);
        let var = p * (1.0 - p) / m as f64 + noise_std * noise_std;
        let w = normal::pdf(z).powi(2) / var;
        sw += w;
        sq += w * q;
        sz += w * z;
        sqq += w * q * q;
        sqz += w * q * z;
        used += 1;
    }
    if used < 2 {
        return None;
    }
    let qbar = sq / sw;
    let zbar = sz / sw;
    let sxx = sqq / sw - qbar * qbar;
    let sxy = sqz / sw - qbar * zbar;
    if sxx.is_nan() || sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    if slope.is_nan() || slope <= 0.0 {
        return None;
    }
    Some((qbar - zbar / slope, used))
}

fn univariate_core(
    x: &[f64],
    rho: f64,
    beta: f64,
    r_bound: f64,
    kappa: f64,
    noise: &mut NoiseSource,
) -> Result<Univariate> {
    check_param(rho > 0.0, || format!("rho must be > 0, got {rho}"))?;
    check_param(beta > 0.0 && beta < 1.0, || format!("beta must be in (0,1), got {beta}"))?;
    check_param(r_bound >= 0.0 && r_bound.is_finite(), || format!("R must be finite and >= 0, got {r_bound}"))?;
    check_param(kappa >= 1.0, || format!("kappa must be >= 1, got {kappa}"))?;
    if x.len() < 4 {
        return Err(Error::InvalidInput(format!("need at least 4 samples, got {}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample value".into()));
    }
    let s = 1.0 / kappa.sqrt();
    let y: Vec<f64> = x.iter().map(|v| v * s).collect();
    let (hist, held) = y.split_at(y.len() / 2);
    let m = held.len();
    let mut diag = UnivariateDiagnostics {
        scale: s,
        sigma_tilde: None,
        bucket_width: None,
        mu_tilde: None,
        grid: Vec::new(),
        p_hat: Vec::new(),
        cdf_noise_std: gaussian_sigma((CDF_POINTS as f64).sqrt() / m as f64, rho / 2.0)?,
        m,
        fit_points: 0,
    };
    let abort = |stage, diag| Ok(Univariate { mu_hat: None, stage: Some(stage), diag });

    // Scale.
    let lo = (0.47 * s).log2().floor() as i64 - 1;
    let hi = 1;
    let diffs: Vec<BucketKey> =
        hist.chunks_exact(2).map(|p| octave_key(((p[1] - p[0]) / 2f64.sqrt()).abs(), lo, hi)).collect();
    if diffs.is_empty() {
        return abort(AbortStage::Scale, diag);
    }
    let octaves: Vec<BucketKey> = (lo..=hi).map(BucketKey::Index).collect();
    let h = histogram_zcdp(&diffs, &octaves, rho / 4.0, beta / 3.0, noise)?;
    let Some(BucketKey::Index(k)) = argmax_bucket(&h, 0.25) else {
        return abort(AbortStage::Scale, diag);
    };
    let sigma_tilde = (2f64.powi(k as i32) / OCTAVE_PEAK).clamp(0.71 * s, 1.41);
    diag.sigma_tilde = Some(sigma_tilde);

    // Location.
    let w = (2f64.sqrt() * sigma_tilde).min(1.0);
    diag.bucket_width = Some(w);
    let half = (r_bound * s / w).ceil() as i64 + 1;
    let keys: Vec<BucketKey> =
        hist.iter().map(|v| BucketKey::Index(((v / w).floor() as i64).clamp(-half, half - 1))).collect();
    let universe: Vec<BucketKey> = (-half..half).map(BucketKey::Index).collect();
    let h = histogram_zcdp(&keys, &universe, rho / 4.0, beta / 3.0, noise)?;
    let Some(BucketKey::Index(r)) = argmax_bucket(&h, 0.25) else {
        return abort(AbortStage::Location, diag);
    };
    let mu_tilde = (r as f64 + 0.5) * w;
    diag.mu_tilde = Some(mu_tilde);

    // CDF.
    let half_pts = (CDF_POINTS / 2) as i64;
    let grid: Vec<f64> = (-half_pts..=half_pts).map(|j| mu_tilde + j as f64 / 4.0 * w).collect();
    let cdf = DVector::from_iterator(CDF_POINTS, grid.iter().map(|&t| empirical_cdf(held, t)));
    let noisy = gaussian_mechanism_vector(&cdf, (CDF_POINTS as f64).sqrt() / m as f64, rho / 2.0, noise)?;
    let floor = 1.0 / (2.0 * m as f64);
    let p_hat: Vec<f64> = noisy.iter().map(|p| p.clamp(floor, 1.0 - floor)).collect();
    let fit = probit_fit(&grid, &p_hat, m, diag.cdf_noise_std);
    diag.grid = grid;
    diag.p_hat = p_hat;
    let Some((mu_w, used)) = fit else {
        return abort(AbortStage::Fit, diag);
    };
    diag.fit_points = used;
    Ok(Univariate { mu_hat: Some(mu_w / s), stage: None, diag })
}

/// ρ-zCDP estimate of the mean of N(μ, σ²) with |μ| ≤ R and σ² ≤ κ.
pub fn univariate_mean(
    x: &[f64],
    rho: f64,
    beta: f64,
    r_bound: f64,
    kappa: f64,
    noise: &mut NoiseSource,
) -> Result<MeanEstimate> {
    let u = univariate_core(x, rho, beta, r_bound, kappa, noise)?;
    let s = u.diag.scale;
    Ok(MeanEstimate {
        mu_hat: u.mu_hat.map(|v| DVector::from_element(1, v)),
        budget_spent: PrivacyBudget::Zcdp { rho },
        weak_estimate: u.diag.mu_tilde.map(|v| DVector::from_element(1, v / s)),
        aborted: u.stage.map(|stage| Abort { coordinate: 0, stage }),
        coords: vec![u.diag],
        preconditioner: None,
        ignored_rows: 0,
    })
}

/// Coordinate-wise estimator: `univariate_mean` with ρ/d, β/d per
/// coordinate, each on its own child noise stream. ρ-zCDP.
///
/// `alpha` only sets the accuracy target of the guarantee; the estimator
/// itself does not depend on it.
pub fn naive_pme(
    x: &DMatrix<f64>,
    rho: f64,
    alpha: f64,
    beta: f64,
    r_bound: f64,
    kappa: f64,
    noise: &mut NoiseSource,
) -> Result<MeanEstimate> {
    check_param(alpha > 0.0, || format!("alpha must be > 0, got {alpha}"))?;
    let d = x.ncols();
    if d == 0 || x.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let (rho_j, beta_j) = (rho / d as f64, beta / d as f64);
    let mut mu = DVector::zeros(d);
    let mut weak = DVector::zeros(d);
    let mut weak_ok = true;
    let mut coords = Vec::with_capacity(d);
    let mut aborted = None;
    for j in 0..d {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let mut child = noise.child(j as u64);
        let u = univariate_core(&col, rho_j, beta_j, r_bound, kappa, &mut child)?;
        match u.diag.mu_tilde {
            Some(t) => weak[j] = t / u.diag.scale,
            None => weak_ok = false,
        }
        match (u.mu_hat, u.stage) {
            (Some(v), _) => mu[j] = v,
            (None, stage) => {
                if aborted.is_none() {
                    aborted = Some(Abort { coordinate: j, stage: stage.unwrap_or(AbortStage::Fit) });
                }
            }
        }
        coords.push(u.diag);
    }
    Ok(MeanEstimate {
        mu_hat: if aborted.is_none() { Some(mu) } else { None },
        budget_spent: PrivacyBudget::Zcdp { rho },
        weak_estimate: weak_ok.then_some(weak),
        aborted,
        coords,
        preconditioner: None,
        ignored_rows: 0,
    })
}

/// Zᵢ = (x_{2i+1} − x_{2i})/√2 over the first `2·pairs` rows.
pub fn difference_pairs(x: &DMatrix<f64>, pairs: usize) -> DMatrix<f64> {
    assert!(2 * pairs <= x.nrows());
    let d = x.ncols();
    let c = std::f64::consts::FRAC_1_SQRT_2;
    DMatrix::from_fn(pairs, d, |i, j| (x[(2 * i + 1, j)] - x[(2 * i, j)]) * c)
}

/// Preconditioned mean estimator, 2ρ-zCDP: ρ for `ppc` on difference pairs
/// of the first two thirds, ρ for `naive_pme` on the preconditioned last
/// third.
///
/// The inner call gets the certified bound κ_f from `ppc` as variance bound
/// and R·‖A‖₂ as range, since I ⪯ Σ and AΣA ⪯ κ_f·I give ‖A‖₂ ≤ √κ_f.
pub fn pme(
    x: &DMatrix<f64>,
    rho: f64,
    alpha: f64,
    beta: f64,
    r_bound: f64,
    kappa: f64,
    noise: &mut NoiseSource,
) -> Result<MeanEstimate> {
    let n = x.nrows() / 3;
    if n < 4 {
        return Err(Error::InvalidInput(format!("need at least 12 rows, got {}", x.nrows())));
    }
    let z = difference_pairs(x, n);
    let pre = ppc(&z, rho, beta, kappa, noise)?;
    let y = transform_rows(&x.rows(2 * n, n).into_owned(), &pre.a);
    let a_norm = pre.a.spectral_norm();
    let inner = naive_pme(&y, rho, alpha, beta, r_bound * a_norm, pre.kappa_final.max(1.0), noise)?;
    let a_inv = inv_psd(&pre.a)?;
    Ok(MeanEstimate {
        mu_hat: inner.mu_hat.map(|m| a_inv.matrix() * m),
        budget_spent: PrivacyBudget::Zcdp { rho: 2.0 * rho },
        weak_estimate: inner.weak_estimate.map(|m| a_inv.matrix() * m),
        aborted: inner.aborted,
        coords: inner.coords,
        preconditioner: Some(pre),
        ignored_rows: x.nrows() - 3 * n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEstimate {
    pub mean: MeanEstimate,
    pub cov: CovEstimate,
    pub budget_spent: PrivacyBudget,
}

/// Mean and covariance together, ρ-zCDP: `pgce` on difference pairs of all
/// rows with ρ/2, `pme` with ρ/4 (which spends 2·ρ/4).
pub fn learn_gaussian(
    x: &DMatrix<f64>,
    rho: f64,
    alpha: f64,
    beta: f64,
    r_bound: f64,
    kappa: f64,
    noise: &mut NoiseSource,
) -> Result<GaussianEstimate> {
    check_param(rho > 0.0, || format!("rho must be > 0, got {rho}"))?;
    let z = difference_pairs(x, x.nrows() / 2);
    let cov = pgce(&z, rho / 2.0, beta / 2.0, kappa, &mut noise.child(0))?;
    let mean = pme(x, rho / 4.0, alpha, beta / 2.0, r_bound, kappa, &mut noise.child(1))?;
    Ok(GaussianEstimate { mean, cov, budget_spent: PrivacyBudget::Zcdp { rho } })
}
