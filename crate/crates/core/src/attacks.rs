//! Tracing (membership-inference) attacks built on fingerprinting scores,
//! and the covariance packing used in lower-bound constructions.
//!
//! A fingerprinting score correlates an estimate with one sample. For an
//! accurate, non-private estimator, members score noticeably higher than
//! fresh samples. Privacy forces the two score distributions together.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_param, Error, Result};
use crate::linalg::SymMatrix;
use crate::noise::NoiseSource;
use crate::product::{ppde, BinaryMatrix, BlockSizing};

/// Σⱼ ((1/9 − pⱼ²)/(1 − pⱼ²))·(estⱼ − pⱼ)·(xⱼ − pⱼ), for ±1 data with mean p.
pub fn fp_score_product(est: &[f64], x: &[f64], p: &[f64]) -> Result<f64> {
    check_lengths(est.len(), x.len(), p.len())?;
    let mut z = 0.0;
    for ((&e, &xi), &pj) in est.iter().zip(x).zip(p) {
        let denom = 1.0 - pj * pj;
        if denom == 0.0 {
            return Err(Error::DivisionByZero(format!("product mean {pj} has |p| = 1")));
        }
        z += (1.0 / 9.0 - pj * pj) / denom * (e - pj) * (xi - pj);
    }
    Ok(z)
}

/// Σⱼ (R² − μⱼ²)·(estⱼ − μⱼ)·(xⱼ − μⱼ).
pub fn fp_score_gaussian(est: &[f64], x: &[f64], mu: &[f64], r: f64) -> Result<f64> {
    check_lengths(est.len(), x.len(), mu.len())?;
    if let Some(m) = mu.iter().find(|m| m.abs() > r) {
        return Err(Error::InvalidParameter(format!("mean coordinate {m} outside [-{r}, {r}]")));
    }
    Ok(est.iter().zip(x).zip(mu).map(|((&e, &xi), &m)| (r * r - m * m) * (e - m) * (xi - m)).sum())
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::InvalidInput(format!("length mismatch: {a}, {b}, {c}")));
    }
    Ok(())
}

/// Distribution of the hidden parameters, and of the data given them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    /// pⱼ ~ U[−1/3, 1/3]; rows in {±1}^d with mean p.
    Product,
    /// μⱼ ~ U[−R, R]; rows ~ N(μ, I).
    Gaussian { r: f64 },
}

impl Prior {
    fn bound(&self) -> f64 {
        match *self {
            Prior::Product => 1.0 / 3.0,
            Prior::Gaussian { r } => r,
        }
    }

    fn draw_params(&self, d: usize, noise: &mut NoiseSource) -> Vec<f64> {
        let b = self.bound();
        (0..d).map(|_| b * (2.0 * noise.uniform() - 1.0)).collect()
    }

    fn draw_rows(&self, params: &[f64], n: usize, noise: &mut NoiseSource) -> DMatrix<f64> {
        let d = params.len();
        let mut x = DMatrix::zeros(n, d);
        for i in 0..n {
            for (j, &p) in params.iter().enumerate() {
                x[(i, j)] = match self {
                    Prior::Product => {
                        if noise.bernoulli((1.0 + p) / 2.0) {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    Prior::Gaussian { .. } => p + noise.standard_normal(),
                };
            }
        }
        x
    }

    fn score(&self, est: &[f64], x: &[f64], params: &[f64]) -> Result<f64> {
        match *self {
            Prior::Product => fp_score_product(est, x, params),
            Prior::Gaussian { r } => fp_score_gaussian(est, x, params, r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub prior: Prior,
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    /// Fresh samples scored per trial.
    pub non_members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintReport {
    pub config: AttackConfig,
    /// Per successful trial: mean score of the members.
    pub in_scores: Vec<f64>,
    /// Per successful trial: mean score of the non-members.
    pub out_scores: Vec<f64>,
    /// mean(in) − mean(out).
    pub separation: f64,
    pub separation_stderr: f64,
    /// Mean over trials of Σᵢ Zᵢ over the members.
    pub member_sum_mean: f64,
    /// Mean over trials and coordinates of Σᵢ Zᵢʲ + (fʲ − pʲ)².
    pub fp_lemma_lhs: f64,
    pub fp_lemma_stderr: f64,
    /// Trials whose mechanism returned an error.
    pub failures: usize,
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `mechanism` on fresh members each trial and scores its clamped
/// output against members and non-members. Trial t uses `noise.child(t)`;
/// the mechanism gets its own grandchild stream.
pub fn run_tracing_attack<M>(mut mechanism: M, cfg: AttackConfig, noise: &mut NoiseSource) -> Result<FingerprintReport>
where
    M: FnMut(&DMatrix<f64>, &mut NoiseSource) -> Result<DVector<f64>>,
{
    check_param(cfg.n >= 1 && cfg.d >= 1, || "attack needs n, d >= 1".into())?;
    check_param(cfg.trials >= 1, || "attack needs at least one trial".into())?;
    check_param(cfg.non_members >= 1, || "attack needs at least one non-member".into())?;
    if let Prior::Gaussian { r } = cfg.prior {
        check_param(r > 0.0, || format!("prior range must be > 0, got {r}"))?;
    }
    let bound = cfg.prior.bound();
    let (mut ins, mut outs, mut sums, mut lhs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut failures = 0;
    for t in 0..cfg.trials {
        let mut rng = noise.child(t as u64);
        let params = cfg.prior.draw_params(cfg.d, &mut rng);
        let members = cfg.prior.draw_rows(&params, cfg.n, &mut rng);
        let fresh = cfg.prior.draw_rows(&params, cfg.non_members, &mut rng);
        let est = match mechanism(&members, &mut rng.child(0)) {
            Ok(e) if e.len() == cfg.d && e.iter().all(|v| !v.is_nan()) => e,
            _ => {
                failures += 1;
                continue;
            }
        };
        let est: Vec<f64> = est.iter().map(|v| v.clamp(-bound, bound)).collect();
        let score_rows = |x: &DMatrix<f64>| -> Result<f64> {
            let mut s = 0.0;
            for row in x.row_iter() {
                let r: Vec<f64> = row.iter().copied().collect();
                s += cfg.prior.score(&est, &r, &params)?;
            }
            Ok(s)
        };
        let member_sum = score_rows(&members)?;
        let err_sq: f64 = est.iter().zip(&params).map(|(e, p)| (e - p).powi(2)).sum();
        ins.push(member_sum / cfg.n as f64);
        outs.push(score_rows(&fresh)? / cfg.non_members as f64);
        sums.push(member_sum);
        lhs.push((member_sum + err_sq) / cfg.d as f64);
    }
    let diffs: Vec<f64> = ins.iter().zip(&outs).map(|(a, b)| a - b).collect();
    let (separation, separation_stderr) = mean_stderr(&diffs);
    let (fp_lemma_lhs, fp_lemma_stderr) = mean_stderr(&lhs);
    Ok(FingerprintReport {
        config: cfg,
        in_scores: ins,
        out_scores: outs,
        separation,
        separation_stderr,
        member_sum_mean: mean_stderr(&sums).0,
        fp_lemma_lhs,
        fp_lemma_stderr,
        failures,
    })
}

/// Non-private column means.
pub fn empirical_mean(x: &DMatrix<f64>, _noise: &mut NoiseSource) -> Result<DVector<f64>> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(x.row_mean().transpose())
}

/// `ppde` as a mechanism on ±1 data: bits are (x + 1)/2 and the learned
/// Bernoulli means q are reported as 2q − 1.
pub fn ppde_mechanism(
    rho: f64,
    alpha: f64,
    beta: f64,
    sizing: BlockSizing,
) -> impl FnMut(&DMatrix<f64>, &mut NoiseSource) -> Result<DVector<f64>> {
    move |x, noise| {
        let rows: Vec<Vec<u8>> = x.row_iter().map(|r| r.iter().map(|&v| (v > 0.0) as u8).collect()).collect();
        let bits = BinaryMatrix::from_rows(&rows)?;
        let est = ppde(&bits, rho, alpha, beta, sizing, noise)?;
        Ok(DVector::from_iterator(x.ncols(), est.model.p.iter().map(|q| 2.0 * q - 1.0)))
    }
}

/// Matrices I + v, v symmetric with zero diagonal and off-diagonal entries
/// ±α/(2d). All 2^{d(d−1)/2} sign patterns when there are at most `count`,
/// otherwise `count` distinct patterns drawn from `noise`.
pub fn cov_packing(d: usize, alpha: f64, count: usize, noise: &mut NoiseSource) -> Result<Vec<SymMatrix>> {
    check_param(d >= 2, || format!("packing needs d >= 2, got {d}"))?;
    check_param(alpha > 0.0 && alpha <= 1.0, || format!("alpha must be in (0,1], got {alpha}"))?;
    check_param(count >= 1, || "packing needs count >= 1".into())?;
    let pairs = d * (d - 1) / 2;
    let entry = alpha / (2.0 * d as f64);
    let build = |signs: &[bool]| {
        let mut m = DMatrix::identity(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in i + 1..d {
                let v = if signs[k] { entry } else { -entry };
                m[(i, j)] = v;
                m[(j, i)] = v;
                k += 1;
            }
        }
        SymMatrix::symmetrize(&m)
    };
    let total = if pairs < 64 { Some(1u64 << pairs) } else { None };
    match total {
        Some(t) if t <= count as u64 => {
            Ok((0..t).map(|code| build(&(0..pairs).map(|k| code >> k & 1 == 1).collect::<Vec<_>>())).collect())
        }
        _ => {
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let signs: Vec<bool> = (0..pairs).map(|_| noise.bernoulli(0.5)).collect();
                if seen.insert(signs.clone()) {
                    out.push(build(&signs));
                }
            }
            Ok(out)
        }
    }
}
