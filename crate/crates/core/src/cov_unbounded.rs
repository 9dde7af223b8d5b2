//! Covariance estimation with no condition-number bound (only Σ ⪰ I).
//!
//! * [`p_estimate_trace`] buckets ‖xᵢ‖² into base-16 octaves and releases
//!   the heaviest bucket from a stable histogram. For Gaussian data the mass
//!   concentrates within one bucket of tr(Σ).
//! * [`weak_ppc_no_bound`] sweeps the threshold down from b towards a/2 in
//!   steps of 0.99 until the noisy moment shows a large direction, then
//!   shrinks that direction by d/√κ.
//! * [`ppc_range`] alternates the two until the released trace drops below
//!   40d³/ξ, leaving a polynomially conditioned problem.
//! * [`pgce_no_bound`] finishes with [`pgce`] at κ* = 40·Ξ·d⁴.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cov::{pgce, symmetric_factor, weak_ppc_cached, ClampedMoments, CovEstimate, Preconditioner, RoundRecord};
use crate::error::{check_param, Error, Result};
use crate::histogram::{argmax_bucket, stable_histogram_approx_dp, BucketKey};
use crate::linalg::{inv_psd, transform_rows, SymMatrix};
use crate::noise::NoiseSource;
use crate::privacy::{compose_approx_dp, zcdp_to_approx_dp, ApproxComposition, PrivacyBudget};

/// Bucket base.
pub const TRACE_BASE: f64 = 16.0;
pub const XI_LOW: f64 = 1.0 / TRACE_BASE;
pub const XI_HIGH: f64 = TRACE_BASE;
pub const SWEEP_FACTOR: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    /// Released value C^r.
    pub t: f64,
    pub c: f64,
    pub r: i64,
    /// Interval [ξT/d, Ξ·d·T] claimed to contain ‖Σ‖₂.
    pub certificate: (f64, f64),
}

/// 16^k, exact for the exponents that occur.
fn base_pow(k: i64) -> f64 {
    TRACE_BASE.powi(k as i32)
}

/// r with 16^{r−1} < v ≤ 16^r, for v > 0.
pub fn trace_bucket(v: f64) -> i64 {
    debug_assert!(v > 0.0 && v.is_finite());
    let mut r = (v.log2() / 4.0).ceil() as i64;
    while base_pow(r - 1) >= v {
        r -= 1;
    }
    while base_pow(r) < v {
        r += 1;
    }
    r
}

/// Smallest bucket index in the universe, ⌈log₁₆ d⌉ − 1.
pub fn min_trace_bucket(d: usize) -> i64 {
    trace_bucket(d as f64) - 1
}

pub fn trace_key(norm_sq: f64, d: usize) -> BucketKey {
    if norm_sq.is_nan() || norm_sq <= 0.0 || norm_sq.is_infinite() {
        return BucketKey::Bottom;
    }
    let r = trace_bucket(norm_sq);
    if r < min_trace_bucket(d) {
        BucketKey::Bottom
    } else {
        BucketKey::Index(r)
    }
}

/// (ε, δ)-DP trace estimate; `None` is the ⊥ outcome.
pub fn p_estimate_trace(
    x: &DMatrix<f64>,
    eps: f64,
    delta: f64,
    beta: f64,
    noise: &mut NoiseSource,
) -> Result<Option<TraceEstimate>> {
    let d = x.ncols();
    let keys: Vec<BucketKey> = x.row_iter().map(|r| trace_key(r.norm_squared(), d)).collect();
    let h = stable_histogram_approx_dp(&keys, eps, delta, beta, noise)?;
    Ok(argmax_bucket(&h, 0.25).map(|k| {
        let BucketKey::Index(r) = k else { unreachable!("argmax never returns Bottom") };
        let t = base_pow(r);
        TraceEstimate { t, c: TRACE_BASE, r, certificate: (XI_LOW * t / d as f64, XI_HIGH * d as f64 * t) }
    }))
}

/// Worst-case sweep length ⌈log_{100/99}(2b/a)⌉.
pub fn sweep_steps(a: f64, b: f64) -> usize {
    ((2.0 * b / a).ln() / (1.0 / SWEEP_FACTOR).ln()).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeStep {
    pub v: DMatrix<f64>,
    pub a: SymMatrix,
    /// Threshold parameter at which the subspace was found.
    pub kappa: f64,
    pub steps_run: usize,
    pub steps_budgeted: usize,
    pub rho_per_step: f64,
    pub noise_std: f64,
    pub kept: usize,
}

/// Sweeps κ = b, 0.99b, … while κ > a/2; returns the first non-empty
/// subspace with A = (d/√κ)Π_V + Π_V⊥, or `None`. ρ-zCDP: the budget is
/// split over the worst-case number of steps.
pub fn weak_ppc_no_bound(
    x: &DMatrix<f64>,
    rho: f64,
    beta: f64,
    interval: (f64, f64),
    noise: &mut NoiseSource,
) -> Result<Option<RangeStep>> {
    weak_ppc_no_bound_cached(&ClampedMoments::new(x)?, rho, beta, interval, noise)
}

fn weak_ppc_no_bound_cached(
    cm: &ClampedMoments,
    rho: f64,
    beta: f64,
    (a, b): (f64, f64),
    noise: &mut NoiseSource,
) -> Result<Option<RangeStep>> {
    let d = cm.dim() as f64;
    check_param(a > 40.0 * d.powi(3), || format!("interval start {a} must exceed 40d³ = {}", 40.0 * d.powi(3)))?;
    check_param(b >= a, || format!("interval [{a}, {b}] is empty"))?;
    let steps = sweep_steps(a, b);
    let (rho_s, beta_s) = (rho / steps as f64, beta / steps as f64);
    let mut kappa = b;
    let mut run = 0;
    while kappa > a / 2.0 && run < steps {
        let w = weak_ppc_cached(cm, rho_s, beta_s, kappa, kappa / (d * d), noise)?;
        run += 1;
        if w.v.ncols() > 0 {
            return Ok(Some(RangeStep {
                v: w.v,
                a: w.a,
                kappa,
                steps_run: run,
                steps_budgeted: steps,
                rho_per_step: rho_s,
                noise_std: w.naive.noise_std,
                kept: w.naive.kept,
            }));
        }
        kappa *= SWEEP_FACTOR;
    }
    Ok(None)
}

/// Per-round parameters (ε', δ', ρ', β').
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeParams {
    pub eps: f64,
    pub delta: f64,
    pub rho: f64,
    pub beta: f64,
}

pub fn range_params(eps: f64, delta: f64, beta: f64, d: usize) -> RangeParams {
    let l = (1.0 / delta).ln();
    let e = eps / (d as f64 * l).sqrt();
    RangeParams { eps: e, delta: delta / d as f64, rho: e * e / l, beta: beta / d as f64 }
}

/// κ* = 40·Ξ·d⁴.
pub fn kappa_star(d: usize) -> f64 {
    40.0 * XI_HIGH * (d as f64).powi(4)
}

fn subspace_rank(blocks: &[DMatrix<f64>], d: usize) -> usize {
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    if cols == 0 {
        return 0;
    }
    let mut m = DMatrix::zeros(d, cols);
    let mut c = 0;
    for b in blocks {
        m.columns_mut(c, b.ncols()).copy_from(b);
        c += b.ncols();
    }
    m.singular_values().iter().filter(|&&s| s > 1e-8).count()
}

/// Range-driven recursive preconditioner. Each completed round records the
/// trace bucket, the searched interval and the dimension of the accumulated
/// subspace in `round_log`.
pub fn ppc_range(x: &DMatrix<f64>, eps: f64, delta: f64, beta: f64, noise: &mut NoiseSource) -> Result<Preconditioner> {
    check_param(eps > 0.0, || format!("eps must be > 0, got {eps}"))?;
    check_param(delta > 0.0 && delta < 1.0, || format!("delta must be in (0,1), got {delta}"))?;
    check_param(beta > 0.0 && beta < 1.0, || format!("beta must be in (0,1), got {beta}"))?;
    if x.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let d = x.ncols();
    let p = range_params(eps, delta, beta, d);
    let floor = 40.0 * (d as f64).powi(3);
    let mut xt = x.clone();
    let mut m: DMatrix<f64> = DMatrix::identity(d, d);
    let mut log = Vec::new();
    let mut found: Vec<DMatrix<f64>> = Vec::new();
    let mut last_v = DMatrix::zeros(d, 0);
    for j in 0..d {
        let trace = p_estimate_trace(&xt, p.eps, p.delta, p.beta, noise)?
            .ok_or_else(|| Error::EstimationFailed(format!("trace estimate returned ⊥ in round {}", j + 1)))?;
        let a = XI_LOW * trace.t;
        let b = XI_HIGH * d as f64 * trace.t;
        if a < floor {
            break;
        }
        let cm = ClampedMoments::new(&xt)?;
        let step = weak_ppc_no_bound_cached(&cm, p.rho, p.beta, (a, b), noise)?.ok_or_else(|| {
            Error::EstimationFailed(format!("no large direction found in [{a:e}, {b:e}] in round {}", j + 1))
        })?;
        found.push(step.v.clone());
        log.push(RoundRecord {
            kappa: step.kappa,
            threshold: step.kappa / 2.0,
            dim_v: step.v.ncols(),
            shrink_k: step.kappa / (d * d) as f64,
            scale: 1.0,
            rho: p.rho,
            kept: step.kept,
            noise_std: step.noise_std,
            interval: Some((a, b)),
            trace: Some(trace.t),
            dim_accumulated: Some(subspace_rank(&found, d)),
        });
        xt = transform_rows(&xt, &step.a);
        m = step.a.matrix() * m;
        last_v = step.v;
    }
    m *= 2.0;
    Ok(Preconditioner { a: symmetric_factor(&m)?, v: last_v, k: 0.0, round_log: log, kappa_final: kappa_star(d) })
}

/// (ε, δ) charged to `ppc_range`: each of the d possible rounds is a trace
/// release at (ε', δ') plus a ρ'-zCDP search converted at δ', composed
/// basically; the rounds are composed with advanced composition at slack δ.
pub fn ppc_range_budget(eps: f64, delta: f64, d: usize) -> Result<(f64, f64)> {
    let p = range_params(eps, delta, 0.5, d);
    let search = zcdp_to_approx_dp(p.rho, p.delta)?;
    let round = compose_approx_dp(&[(p.eps, p.delta), search], ApproxComposition::Basic)?;
    compose_approx_dp(&vec![round; d], ApproxComposition::Advanced { delta0: delta })
}

/// Total (ε, δ) of `pgce_no_bound`: `ppc_range_budget` plus the ρ-zCDP
/// final stage converted at δ.
pub fn pgce_no_bound_budget(eps: f64, delta: f64, d: usize) -> Result<(f64, f64)> {
    let pre = ppc_range_budget(eps, delta, d)?;
    let fin = zcdp_to_approx_dp(final_rho(eps, delta), delta)?;
    compose_approx_dp(&[pre, fin], ApproxComposition::Basic)
}

/// ρ = ε²/(8 ln(1/δ)) for the final stage.
pub fn final_rho(eps: f64, delta: f64) -> f64 {
    eps * eps / (8.0 * (1.0 / delta).ln())
}

pub fn pgce_no_bound(
    x: &DMatrix<f64>,
    eps: f64,
    delta: f64,
    beta: f64,
    noise: &mut NoiseSource,
) -> Result<CovEstimate> {
    let d = x.ncols();
    let pre = ppc_range(x, eps, delta, beta, noise)?;
    let y = transform_rows(x, &pre.a);
    let inner = pgce(&y, final_rho(eps, delta), beta, kappa_star(d), noise)?;
    let a_inv = inv_psd(&pre.a)?;
    let sigma_hat = inner.sigma_hat.conjugate(&a_inv);
    let (e, dl) = pgce_no_bound_budget(eps, delta, d)?;
    let mut diagnostics = inner.diagnostics;
    let mut stds: Vec<f64> = pre.round_log.iter().map(|r| r.noise_std).collect();
    stds.append(&mut diagnostics.noise_stds);
    diagnostics.noise_stds = stds;
    diagnostics.rounds += pre.round_log.len();
    Ok(CovEstimate {
        sigma_hat,
        budget_spent: PrivacyBudget::ApproxDp { eps: e, delta: dl },
        preconditioner: pre,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{sample_gaussian, second_moment, GaussianParams};
    use nalgebra::DVector;

    #[test]
    fn bucketing_is_exact() {
        assert_eq!(trace_bucket(16.0), 1);
        assert_eq!(trace_bucket(16.000001), 2);
        assert_eq!(trace_bucket(1.0), 0);
        assert_eq!(trace_bucket(256.0), 2);
        assert_eq!(trace_bucket(0.5), 0);
        assert_eq!(trace_bucket(1.0 / 16.0), -1);
        let mut s = NoiseSource::seeded(0);
        for _ in 0..10_000 {
            let v = (s.uniform() * 80.0 - 20.0).exp();
            let r = trace_bucket(v);
            assert!(base_pow(r - 1) < v && v <= base_pow(r), "{v} {r}");
        }
    }

    #[test]
    fn below_universe_is_bottom() {
        // d = 16: universe starts at r = 0, i.e. values ≤ 1/16 go to ⊥.
        assert_eq!(min_trace_bucket(16), 0);
        assert_eq!(trace_key(0.05, 16), BucketKey::Bottom);
        assert_eq!(trace_key(0.07, 16), BucketKey::Index(0));
        assert_eq!(trace_key(0.0, 16), BucketKey::Bottom);
    }

    #[test]
    fn zero_noise_trace() {
        // All ‖x‖² in (16², 16³].
        let mut x = DMatrix::zeros(100, 2);
        for i in 0..100 {
            x[(i, 0)] = (300.0 + i as f64 * 30.0).sqrt();
        }
        let mut z = NoiseSource::zero_noise_oracle();
        let t = p_estimate_trace(&x, 1.0, 1e-3, 0.1, &mut z).unwrap().unwrap();
        assert_eq!(t.t, 4096.0);
        assert_eq!(t.r, 3);

        // Five equally filled buckets: none reaches 1/4.
        let mut y = DMatrix::zeros(100, 1);
        for i in 0..100 {
            y[(i, 0)] = base_pow(1 + (i % 5) as i64).sqrt();
        }
        assert!(p_estimate_trace(&y, 1.0, 1e-3, 0.1, &mut z).unwrap().is_none());
    }

    #[test]
    fn trace_band() {
        let d = 16;
        let p = GaussianParams::unbounded(DVector::zeros(d), SymMatrix::identity(d)).unwrap();
        let mut ok = 0;
        for seed in 0..20 {
            let x = sample_gaussian(&p, 5000, &mut NoiseSource::seeded(1000 + seed)).unwrap();
            let mut s = NoiseSource::seeded(seed);
            if let Some(t) = p_estimate_trace(&x, 1.0, 1e-5, 0.05, &mut s).unwrap() {
                if 16.0 >= t.t / 16.0 && 16.0 <= 16.0 * t.t {
                    ok += 1;
                }
            }
        }
        assert!(ok >= 18, "{ok}");
    }

    #[test]
    fn sweep_step_count() {
        // 2b/a = 2 → ⌈ln 2 / ln(100/99)⌉ = 69.
        assert_eq!(sweep_steps(1.0, 1.0), 69);
        assert!(0.99f64.powi(68) * 1.0 > 0.5 && 0.99f64.powi(69) <= 0.5);
    }

    #[test]
    fn no_bound_rejects_small_interval() {
        let x = DMatrix::from_element(4, 2, 1.0);
        let mut z = NoiseSource::zero_noise_oracle();
        assert!(matches!(weak_ppc_no_bound(&x, 1.0, 0.1, (320.0, 1e4), &mut z), Err(Error::InvalidParameter(_))));
    }

    fn exact_rows(diag: &[f64]) -> DMatrix<f64> {
        // Rows ±√(n·λⱼ)·eⱼ give second moment diag(λ) exactly.
        let d = diag.len();
        let mut x = DMatrix::zeros(2 * d, d);
        for (j, &l) in diag.iter().enumerate() {
            let v = (d as f64 * l).sqrt();
            x[(2 * j, j)] = v;
            x[(2 * j + 1, j)] = -v;
        }
        x
    }

    #[test]
    fn no_bound_threshold_logic() {
        let d = 2;
        let lambda1 = 4000.0;
        let x = exact_rows(&[lambda1, 1.0]);
        let mut z = NoiseSource::zero_noise_oracle();
        let (a, b) = (1000.0, 20_000.0);
        let st = weak_ppc_no_bound(&x, 1.0, 0.1, (a, b), &mut z).unwrap().unwrap();
        assert_eq!(st.v.ncols(), 1);
        assert!((st.v[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!(st.kappa / 2.0 <= lambda1 && st.kappa / SWEEP_FACTOR / 2.0 > lambda1);
        let want_top = d as f64 / st.kappa.sqrt();
        assert!((st.a.get(0, 0) - want_top).abs() < 1e-12);

        let x = exact_rows(&[a / 4.0 - 1.0, 1.0]);
        assert!(weak_ppc_no_bound(&x, 1.0, 0.1, (a, b), &mut z).unwrap().is_none());
    }

    #[test]
    fn range_params_formula() {
        let p = range_params(1.0, 1e-6, 0.1, 4);
        let l = 1e6f64.ln();
        assert!((p.eps - 1.0 / (4.0 * l).sqrt()).abs() < 1e-15);
        assert!((p.rho - 1.0 / (4.0 * l * l)).abs() < 1e-15);
        assert_eq!(p.delta, 2.5e-7);
        assert_eq!(p.beta, 0.025);
    }

    #[test]
    fn small_trace_breaks_immediately() {
        let d = 3;
        let p = GaussianParams::unbounded(DVector::zeros(d), SymMatrix::from_diagonal(&[50.0, 2.0, 1.0])).unwrap();
        let x = sample_gaussian(&p, 4000, &mut NoiseSource::seeded(3)).unwrap();
        let pre = ppc_range(&x, 1.0, 1e-6, 0.1, &mut NoiseSource::seeded(4)).unwrap();
        assert!(pre.round_log.is_empty());
        assert_eq!(pre.a, SymMatrix::identity(d).scale(2.0));
    }

    #[test]
    fn zero_noise_no_bound_recovers_moment() {
        let d = 4;
        let p = GaussianParams::unbounded(DVector::zeros(d), SymMatrix::from_diagonal(&[1.0, 50.0, 1e4, 1e7])).unwrap();
        let x = sample_gaussian(&p, 5000, &mut NoiseSource::seeded(5)).unwrap();
        let mut z = NoiseSource::zero_noise_oracle();
        let est = pgce_no_bound(&x, 1.0, 1e-6, 0.1, &mut z).unwrap();
        assert!(!est.preconditioner.round_log.is_empty());
        assert_eq!(est.diagnostics.clamped, 0);
        let emp = second_moment(&x).unwrap();
        let rel = (est.sigma_hat.matrix() - emp.matrix()).norm() / emp.frobenius_norm();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn budget_is_composition() {
        let (e, d) = pgce_no_bound_budget(1.0, 1e-6, 4).unwrap();
        let p = range_params(1.0, 1e-6, 0.1, 4);
        let search = zcdp_to_approx_dp(p.rho, p.delta).unwrap();
        let round = (p.eps + search.0, p.delta + search.1);
        let adv = (round.0 * (6.0 * 4.0 * 1e6f64.ln()).sqrt(), 1e-6 + 4.0 * round.1);
        let fin = zcdp_to_approx_dp(final_rho(1.0, 1e-6), 1e-6).unwrap();
        assert!((e - (adv.0 + fin.0)).abs() < 1e-12);
        assert!((d - (adv.1 + fin.1)).abs() < 1e-18);
    }
}
