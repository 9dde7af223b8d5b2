//! Distances between distributions and parameter errors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_param, Error, Result};
use crate::linalg::{eigendecompose, mahalanobis_mat, mahalanobis_vec, sample_gaussian, GaussianParams, SymMatrix};
use crate::noise::NoiseSource;
use crate::normal;

pub const MAX_EXACT_PRODUCT_DIM: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tv {
    Exact { value: f64 },
    Estimate { mean: f64, stderr: f64 },
}

impl Tv {
    pub fn value(&self) -> f64 {
        match *self {
            Tv::Exact { value } => value,
            Tv::Estimate { mean, .. } => mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub tv: Tv,
    pub kl: f64,
    pub chi2: f64,
    pub mahalanobis_mean: f64,
    pub mahalanobis_cov: f64,
}

impl DistanceReport {
    /// Distances from `truth` to `est`. TV is closed-form when the
    /// covariances coincide, otherwise a Monte Carlo estimate.
    pub fn gaussian(
        truth: &GaussianParams,
        est: &GaussianParams,
        trials: usize,
        noise: &mut NoiseSource,
    ) -> Result<Self> {
        let (mahalanobis_mean, mahalanobis_cov) = gaussian_param_error(truth, est)?;
        let tv = if truth.cov == est.cov {
            Tv::Exact { value: tv_gaussian_same_cov(&truth.mean, &est.mean, &truth.cov)? }
        } else {
            let e = tv_gaussian_mc(truth, est, trials, noise)?;
            Tv::Estimate { mean: e.mean, stderr: e.stderr }
        };
        Ok(Self {
            tv,
            kl: kl_gaussian(truth, est)?,
            chi2: chi2_gaussian(truth, est)?,
            mahalanobis_mean,
            mahalanobis_cov,
        })
    }
}

/// 2Φ(‖μ₁ − μ₂‖_Σ / 2) − 1.
pub fn tv_gaussian_same_cov(mu1: &DVector<f64>, mu2: &DVector<f64>, sigma: &SymMatrix) -> Result<f64> {
    let m = mahalanobis_vec(&(mu1 - mu2), sigma)?;
    Ok((2.0 * normal::cdf(m / 2.0) - 1.0).clamp(0.0, 1.0))
}

/// Log-density evaluator for a nondegenerate Gaussian.
struct LogDensity {
    mean: DVector<f64>,
    inv: DMatrix<f64>,
    log_det: f64,
}

impl LogDensity {
    fn new(p: &GaussianParams) -> Result<Self> {
        let e = eigendecompose(&p.cov)?;
        let top = e.values.first().copied().unwrap_or(0.0);
        if e.values.iter().any(|&l| l.is_nan() || l <= crate::linalg::SINGULAR_TOL * top) {
            return Err(Error::SingularMatrix("covariance is not positive definite".into()));
        }
        Ok(Self {
            mean: p.mean.clone(),
            inv: e.reassemble(|l| 1.0 / l).into_inner(),
            log_det: e.values.iter().map(|l| l.ln()).sum(),
        })
    }

    /// log p(x) without the −(d/2)·ln 2π term.
    fn eval(&self, x: &DVector<f64>) -> f64 {
        let c = x - &self.mean;
        -0.5 * (c.dot(&(&self.inv * &c)) + self.log_det)
    }
}

/// E_{x∼P}[max(0, 1 − q(x)/p(x))], evaluated in log space.
pub fn tv_gaussian_mc(
    p: &GaussianParams,
    q: &GaussianParams,
    trials: usize,
    noise: &mut NoiseSource,
) -> Result<McEstimate> {
    check_param(trials >= 2, || format!("need at least 2 trials, got {trials}"))?;
    if p.dim() != q.dim() {
        return Err(Error::InvalidInput(format!("dimension mismatch: {} vs {}", p.dim(), q.dim())));
    }
    let lp = LogDensity::new(p)?;
    let lq = LogDensity::new(q)?;
    let x = sample_gaussian(p, trials, noise)?;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for row in x.row_iter() {
        let v = row.transpose();
        let log_ratio = lq.eval(&v) - lp.eval(&v);
        let t = if log_ratio >= 0.0 { 0.0 } else { -log_ratio.exp_m1() };
        sum += t;
        sum_sq += t * t;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(McEstimate { mean, stderr: (var / n).sqrt(), trials })
}

/// KL(P‖Q) for Gaussians.
pub fn kl_gaussian(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    let lp = LogDensity::new(p)?;
    let lq = LogDensity::new(q)?;
    let delta = &p.mean - &q.mean;
    let tr = (&lq.inv * p.cov.matrix()).trace();
    let quad = delta.dot(&(&lq.inv * &delta));
    Ok((0.5 * (tr + quad - p.dim() as f64 + lq.log_det - lp.log_det)).max(0.0))
}

/// χ²(P‖Q) for Gaussians; infinite unless 2Σ_Q − Σ_P ≻ 0.
pub fn chi2_gaussian(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    let lp = LogDensity::new(p)?;
    let lq = LogDensity::new(q)?;
    let m = q.cov.scale(2.0).sub(&p.cov);
    let e = eigendecompose(&m)?;
    if e.values.iter().any(|&l| l <= 0.0) {
        return Ok(f64::INFINITY);
    }
    let log_det_m: f64 = e.values.iter().map(|l| l.ln()).sum();
    let delta = &p.mean - &q.mean;
    let quad = delta.dot(&(e.reassemble(|l| 1.0 / l).matrix() * &delta));
    let log_ratio = lq.log_det - 0.5 * lp.log_det - 0.5 * log_det_m + quad;
    Ok(log_ratio.exp_m1().max(0.0))
}

/// Exact total variation between two product Bernoulli distributions.
pub fn tv_product_exact(p: &[f64], q: &[f64]) -> Result<f64> {
    check_product_pair(p, q)?;
    let d = p.len();
    if d > MAX_EXACT_PRODUCT_DIM {
        return Err(Error::TooLarge(format!("exact product TV needs d <= {MAX_EXACT_PRODUCT_DIM}, got {d}")));
    }
    let mut total = 0.0;
    for x in 0u32..(1 << d) {
        let (mut pp, mut qq) = (1.0, 1.0);
        for j in 0..d {
            if x >> j & 1 == 1 {
                pp *= p[j];
                qq *= q[j];
            } else {
                pp *= 1.0 - p[j];
                qq *= 1.0 - q[j];
            }
        }
        total += (pp - qq).abs();
    }
    Ok((total / 2.0).min(1.0))
}

/// Σⱼ |pⱼ − qⱼ|, which upper-bounds the product TV.
pub fn product_sd_upper(p: &[f64], q: &[f64]) -> Result<f64> {
    check_product_pair(p, q)?;
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

fn check_product_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!("dimension mismatch: {} vs {}", p.len(), q.len())));
    }
    if let Some(v) = p.iter().chain(q).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("mean {v} outside [0,1]")));
    }
    Ok(())
}

/// (χ²(Ber p‖Ber q), KL(Ber p‖Ber q)); both infinite when q ∈ {0,1} and p ≠ q.
pub fn chi2_kl_bernoulli(p: f64, q: f64) -> Result<(f64, f64)> {
    check_param((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q), || {
        format!("Bernoulli means must be in [0,1], got p={p}, q={q}")
    })?;
    if q == 0.0 || q == 1.0 {
        return Ok(if p == q { (0.0, 0.0) } else { (f64::INFINITY, f64::INFINITY) });
    }
    let chi2 = (p - q).powi(2) / (q * (1.0 - q));
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    let kl = (term(p, q) + term(1.0 - p, 1.0 - q)).max(0.0);
    Ok((chi2, kl))
}

/// (‖μ − μ̂‖_Σ, ‖Σ − Σ̂‖_Σ) with Σ the true covariance.
pub fn gaussian_param_error(truth: &GaussianParams, est: &GaussianParams) -> Result<(f64, f64)> {
    Ok((
        mahalanobis_vec(&(&truth.mean - &est.mean), &truth.cov)?,
        mahalanobis_mat(&truth.cov.sub(&est.cov), &truth.cov)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gp(mean: &[f64], cov: SymMatrix) -> GaussianParams {
        GaussianParams::unbounded(DVector::from_column_slice(mean), cov).unwrap()
    }

    /// Trapezoid rule on [−lim, lim].
    fn quad(f: impl Fn(f64) -> f64, lim: f64, steps: usize) -> f64 {
        let h = 2.0 * lim / steps as f64;
        (0..=steps)
            .map(|i| {
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                w * f(-lim + i as f64 * h)
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn same_cov_closed_form() {
        let s = SymMatrix::identity(1);
        let a = DVector::from_element(1, 0.0);
        let b = DVector::from_element(1, 1.0);
        assert_eq!(tv_gaussian_same_cov(&a, &a, &s).unwrap(), 0.0);
        let tv = tv_gaussian_same_cov(&a, &b, &s).unwrap();
        let oracle = quad(|x| (normal::pdf(x) - normal::pdf(x - 1.0)).abs() / 2.0, 12.0, 200_000);
        assert!((tv - oracle).abs() < 1e-8, "{tv} {oracle}");
        assert!((tv - 0.38292).abs() < 1e-5);
    }

    #[test]
    fn same_cov_affine_invariance() {
        let s = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let a = DVector::from_vec(vec![0.3, -0.2]);
        let b = DVector::from_vec(vec![-0.5, 0.4]);
        let t = DMatrix::from_row_slice(2, 2, &[1.5, -0.3, 0.7, 2.0]);
        let shift = DVector::from_vec(vec![10.0, -3.0]);
        let tv1 = tv_gaussian_same_cov(&a, &b, &s).unwrap();
        let tv2 = tv_gaussian_same_cov(&(&t * &a + &shift), &(&t * &b + &shift), &s.congruence(&t)).unwrap();
        assert!((tv1 - tv2).abs() < 1e-12);
    }

    #[test]
    fn mc_identical_is_zero() {
        let p = gp(&[1.0, 2.0], SymMatrix::identity(2));
        let e = tv_gaussian_mc(&p, &p, 1000, &mut NoiseSource::seeded(1)).unwrap();
        assert_eq!(e.mean, 0.0);
    }

    #[test]
    fn mc_matches_quadrature_for_scale_change() {
        let p = gp(&[0.0], SymMatrix::identity(1));
        let q = gp(&[0.0], SymMatrix::from_diagonal(&[4.0]));
        let oracle = quad(|x| (normal::pdf(x) - normal::pdf(x / 2.0) / 2.0).abs() / 2.0, 40.0, 400_000);
        let e = tv_gaussian_mc(&p, &q, 200_000, &mut NoiseSource::seeded(2)).unwrap();
        assert!((e.mean - oracle).abs() <= 3.0 * e.stderr, "{e:?} {oracle}");
    }

    #[test]
    fn mc_stderr_shrinks() {
        let p = gp(&[0.0, 0.0], SymMatrix::identity(2));
        let q = gp(&[0.5, 0.0], SymMatrix::from_diagonal(&[1.5, 1.0]));
        let a = tv_gaussian_mc(&p, &q, 20_000, &mut NoiseSource::seeded(3)).unwrap();
        let b = tv_gaussian_mc(&p, &q, 40_000, &mut NoiseSource::seeded(4)).unwrap();
        let ratio = b.stderr / a.stderr;
        assert!((0.6..0.8).contains(&ratio), "{ratio}");
    }

    #[test]
    fn product_tv_examples() {
        assert_eq!(tv_product_exact(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((tv_product_exact(&[0.3], &[0.5]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(tv_product_exact(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(tv_product_exact(&[0.5; 21], &[0.5; 21]), Err(Error::TooLarge(_))));
        assert!((product_sd_upper(&[0.2; 3], &[0.3; 3]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_divergences() {
        assert_eq!(chi2_kl_bernoulli(0.4, 0.4).unwrap(), (0.0, 0.0));
        let (chi2, _) = chi2_kl_bernoulli(0.5, 0.25).unwrap();
        assert!((chi2 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(chi2_kl_bernoulli(0.2, 0.0).unwrap(), (f64::INFINITY, f64::INFINITY));
        assert_eq!(chi2_kl_bernoulli(1.0, 1.0).unwrap(), (0.0, 0.0));
        // Asymmetry.
        let (c1, k1) = chi2_kl_bernoulli(0.1, 0.5).unwrap();
        let (c2, k2) = chi2_kl_bernoulli(0.5, 0.1).unwrap();
        assert!((c1 - 0.64).abs() < 1e-12 && (c2 - 0.16 / 0.09).abs() < 1e-12);
        assert!(k1 != k2);
    }

    #[test]
    fn pinsker_chain_sweep() {
        let mut s = NoiseSource::seeded(5);
        for _ in 0..1000 {
            let p = s.uniform();
            let q = s.uniform();
            let (chi2, kl) = chi2_kl_bernoulli(p, q).unwrap();
            let tv = (p - q).abs();
            assert!(2.0 * tv * tv <= kl + 1e-15 && kl <= chi2 + 1e-15, "{p} {q}");
        }
    }

    #[test]
    fn param_error_examples() {
        let a = gp(&[0.0], SymMatrix::from_diagonal(&[4.0]));
        let b = gp(&[0.0], SymMatrix::from_diagonal(&[5.0]));
        assert_eq!(gaussian_param_error(&a, &a).unwrap(), (0.0, 0.0));
        let (m, c) = gaussian_param_error(&a, &b).unwrap();
        assert_eq!(m, 0.0);
        assert!((c - 0.25).abs() < 1e-15);
    }

    #[test]
    fn param_error_conjugation_invariant() {
        let t = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 3.0]);
        let a = gp(&[1.0, 0.0], SymMatrix::from_diagonal(&[1.0, 2.0]));
        let b = gp(&[0.5, 0.2], SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.2, 0.1, 0.1, 2.5])).unwrap());
        let map = |g: &GaussianParams| gp((&t * &g.mean).as_slice(), g.cov.congruence(&t));
        let (m1, c1) = gaussian_param_error(&a, &b).unwrap();
        let (m2, c2) = gaussian_param_error(&map(&a), &map(&b)).unwrap();
        assert!((m1 - m2).abs() < 1e-12 && (c1 - c2).abs() < 1e-12);
    }

    #[test]
    fn gaussian_divergences_against_quadrature() {
        let p = gp(&[0.3], SymMatrix::from_diagonal(&[1.0]));
        let q = gp(&[0.0], SymMatrix::from_diagonal(&[1.5]));
        let dp = |x: f64| normal::pdf(x - 0.3);
        let dq = |x: f64| normal::pdf(x / 1.5f64.sqrt()) / 1.5f64.sqrt();
        let kl = quad(|x| dp(x) * (dp(x) / dq(x)).ln(), 20.0, 200_000);
        let chi2 = quad(|x| dp(x).powi(2) / dq(x), 20.0, 200_000) - 1.0;
        assert!((kl_gaussian(&p, &q).unwrap() - kl).abs() < 1e-9);
        assert!((chi2_gaussian(&p, &q).unwrap() - chi2).abs() < 1e-9);
        let wide = gp(&[0.0], SymMatrix::from_diagonal(&[3.0]));
        assert_eq!(chi2_gaussian(&wide, &p).unwrap(), f64::INFINITY);
    }

    #[test]
    fn distance_report_uses_exact_tv_for_equal_cov() {
        let a = gp(&[0.0, 0.0], SymMatrix::identity(2));
        let b = gp(&[1.0, 0.0], SymMatrix::identity(2));
        let r = DistanceReport::gaussian(&a, &b, 100, &mut NoiseSource::seeded(0)).unwrap();
        assert!(matches!(r.tv, Tv::Exact { .. }));
        assert!((r.kl - 0.5).abs() < 1e-12);
        assert!((r.chi2 - (1f64.exp() - 1.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn product_tv_dominated_by_sum(
            pq in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..7)
        ) {
            let (p, q): (Vec<f64>, Vec<f64>) = pq.into_iter().unzip();
            let tv = tv_product_exact(&p, &q).unwrap();
            let ub = product_sd_upper(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&tv));
            prop_assert!(tv <= ub + 1e-12);
            prop_assert!((tv - tv_product_exact(&q, &p).unwrap()).abs() < 1e-12);
            if p.len() == 1 {
                prop_assert!((tv - ub).abs() < 1e-15);
            }
        }
    }
}
