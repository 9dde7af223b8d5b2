//! Covariance estimation when I ⪯ Σ ⪯ κI.
//!
//! * [`naive_pce`]: drop samples outside a norm ball, average the outer
//!   products, add GUE noise, project onto the PSD cone. The error grows
//!   with κ.
//! * [`weak_ppc`]: one noisy look at the spectrum. Directions with noisy
//!   eigenvalue ≥ κ/2 are shrunk by 1/√K.
//! * [`ppc`]: repeat `weak_ppc` (inflated by 1.1) on the transformed data
//!   until the certified bound drops to 1000, shrinking κ by 0.7 per round.
//! * [`pgce`]: precondition with half the budget, run `naive_pce` on the
//!   transformed data with the other half, undo the transform.
//!
//! Samples are assumed centered: "covariance" means the second moment
//! (1/n)·Σ xᵢxᵢᵀ throughout.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_param, Error, Result};
use crate::linalg::{eigendecompose, inv_psd, project_psd, sqrt_psd, transform_rows, SymMatrix};
use crate::noise::NoiseSource;
use crate::privacy::{gaussian_mechanism_symmetric, gaussian_sigma, PrivacyBudget};

/// `ppc` stops once the certified bound is at most this.
pub const PPC_TARGET: f64 = 1000.0;
pub const PPC_SHRINK: f64 = 0.7;
pub const PPC_INFLATE: f64 = 1.1;
pub const DEFAULT_K: f64 = 2.0;

/// Squared clamp radius B² = κd(1 + 3 ln(2n/β)).
pub fn clamp_radius_sq(n: usize, d: usize, beta: f64, kappa: f64) -> f64 {
    kappa * d as f64 * (1.0 + 3.0 * (2.0 * n as f64 / beta).ln())
}

/// Frobenius sensitivity of the clamped second moment under replacement.
pub fn clamped_moment_sensitivity(n: usize, radius_sq: f64) -> f64 {
    2.0 * radius_sq / n as f64
}

/// Number of `ppc` rounds: the smallest T with κ·0.7^T ≤ 1000.
pub fn ppc_rounds(kappa: f64) -> usize {
    if kappa <= PPC_TARGET {
        return 0;
    }
    ((kappa / PPC_TARGET).ln() / (1.0 / PPC_SHRINK).ln()).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaivePce {
    pub sigma: SymMatrix,
    /// |S|, the number of samples inside the clamp ball.
    pub kept: usize,
    pub radius_sq: f64,
    pub noise_std: f64,
}

impl NaivePce {
    pub fn dropped(&self, n: usize) -> usize {
        n - self.kept
    }
}

/// Rows sorted by ascending squared norm with prefix sums of their outer
/// products every `BLOCK` rows, so the clamped moment at any radius costs at
/// most `BLOCK` outer products. Only additions are used, so heavy rows that
/// get dropped cannot cancel away the precision of the kept ones.
#[derive(Debug, Clone)]
pub struct ClampedMoments {
    n: usize,
    d: usize,
    // (‖xᵢ‖², i), ascending
    norms: Vec<(f64, usize)>,
    checkpoints: Vec<DMatrix<f64>>,
    data: DMatrix<f64>,
}

const BLOCK: usize = 512;

impl ClampedMoments {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample value".into()));
        }
        let d = x.ncols();
        let mut norms: Vec<(f64, usize)> = x.row_iter().enumerate().map(|(i, r)| (r.norm_squared(), i)).collect();
        norms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut checkpoints = vec![DMatrix::zeros(d, d)];
        let mut acc = DMatrix::zeros(d, d);
        for chunk in norms.chunks(BLOCK) {
            if chunk.len() < BLOCK {
                break;
            }
            let rows = DMatrix::from_fn(BLOCK, d, |r, c| x[(chunk[r].1, c)]);
            acc += rows.transpose() * &rows;
            checkpoints.push(acc.clone());
        }
        Ok(ClampedMoments { n: x.nrows(), d, norms, checkpoints, data: x.clone() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// ((1/n)·Σ_{‖xᵢ‖² ≤ r²} xᵢxᵢᵀ, |S|).
    pub fn clamped(&self, radius_sq: f64) -> (SymMatrix, usize) {
        let kept = self.norms.partition_point(|(nsq, _)| *nsq <= radius_sq);
        let block = (kept / BLOCK).min(self.checkpoints.len() - 1);
        let mut m = self.checkpoints[block].clone();
        let tail = &self.norms[block * BLOCK..kept];
        if !tail.is_empty() {
            let rows = DMatrix::from_fn(tail.len(), self.d, |r, c| self.data[(tail[r].1, c)]);
            m += rows.transpose() * &rows;
        }
        m /= self.n as f64;
        (SymMatrix::symmetrize(&m), kept)
    }

    pub fn naive_pce(&self, rho: f64, beta: f64, kappa: f64, noise: &mut NoiseSource) -> Result<NaivePce> {
        check_param(rho > 0.0, || format!("rho must be > 0, got {rho}"))?;
        check_param(beta > 0.0 && beta < 1.0, || format!("beta must be in (0,1), got {beta}"))?;
        check_param(kappa >= 1.0, || format!("kappa must be >= 1, got {kappa}"))?;
        let radius_sq = clamp_radius_sq(self.n, self.d, beta, kappa);
        let (moment, kept) = self.clamped(radius_sq);
        let sens = clamped_moment_sensitivity(self.n, radius_sq);
        let noisy = gaussian_mechanism_symmetric(&moment, sens, rho, noise)?;
        Ok(NaivePce { sigma: project_psd(&noisy)?, kept, radius_sq, noise_std: gaussian_sigma(sens, rho)? })
    }
}

/// Clamped, noised, PSD-projected second moment. ρ-zCDP.
pub fn naive_pce(x: &DMatrix<f64>, rho: f64, beta: f64, kappa: f64, noise: &mut NoiseSource) -> Result<NaivePce> {
    ClampedMoments::new(x)?.naive_pce(rho, beta, kappa, noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakPpc {
    /// Orthonormal basis (columns) of the large-eigenvalue subspace; may have zero columns.
    pub v: DMatrix<f64>,
    pub a: SymMatrix,
    pub threshold: f64,
    pub naive: NaivePce,
}

/// I − (1 − s)·VVᵀ, i.e. s on span(V) and 1 on its complement.
pub fn shrink_subspace(v: &DMatrix<f64>, d: usize, s: f64) -> SymMatrix {
    let mut a = DMatrix::identity(d, d);
    if v.ncols() > 0 {
        a -= (v * v.transpose()) * (1.0 - s);
    }
    SymMatrix::symmetrize(&a)
}

/// Eigenvectors of `z` with eigenvalue ≥ `threshold` (ties included).
pub fn top_subspace(z: &SymMatrix, threshold: f64) -> Result<DMatrix<f64>> {
    let e = eigendecompose(z)?;
    let k = e.values.iter().take_while(|&&l| l >= threshold).count();
    Ok(e.vectors.columns(0, k).into_owned())
}

pub fn weak_ppc(x: &DMatrix<f64>, rho: f64, beta: f64, kappa: f64, k: f64, noise: &mut NoiseSource) -> Result<WeakPpc> {
    weak_ppc_cached(&ClampedMoments::new(x)?, rho, beta, kappa, k, noise)
}

pub fn weak_ppc_cached(
    cm: &ClampedMoments,
    rho: f64,
    beta: f64,
    kappa: f64,
    k: f64,
    noise: &mut NoiseSource,
) -> Result<WeakPpc> {
    check_param(kappa > 1.0, || format!("kappa must be > 1, got {kappa}"))?;
    check_param(k >= 1.0, || format!("K must be >= 1, got {k}"))?;
    let naive = cm.naive_pce(rho, beta, kappa, noise)?;
    let threshold = kappa / 2.0;
    let v = top_subspace(&naive.sigma, threshold)?;
    let a = shrink_subspace(&v, cm.dim(), 1.0 / k.sqrt());
    Ok(WeakPpc { v, a, threshold, naive })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Upper bound in force when the round started.
    pub kappa: f64,
    pub threshold: f64,
    pub dim_v: usize,
    pub shrink_k: f64,
    /// Overall scalar applied to the round's matrix (1.1 in `ppc`).
    pub scale: f64,
    pub rho: f64,
    pub kept: usize,
    pub noise_std: f64,
    /// Interval [a, b] searched by the range-driven variant.
    pub interval: Option<(f64, f64)>,
    /// Released trace bucket value, range-driven variant only.
    pub trace: Option<f64>,
    /// Dimension of the span of all subspaces found so far, range-driven variant only.
    pub dim_accumulated: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    /// Symmetric PD preconditioner; the data is used as A·xᵢ.
    pub a: SymMatrix,
    /// Large-eigenvalue subspace found in the last round that found one.
    pub v: DMatrix<f64>,
    pub k: f64,
    pub round_log: Vec<RoundRecord>,
    /// Certified upper bound on AΣA (lower bound is I).
    pub kappa_final: f64,
}

impl Preconditioner {
    pub fn identity(d: usize, kappa: f64) -> Self {
        Preconditioner {
            a: SymMatrix::identity(d),
            v: DMatrix::zeros(d, 0),
            k: DEFAULT_K,
            round_log: Vec::new(),
            kappa_final: kappa,
        }
    }

    pub fn rho_spent(&self) -> f64 {
        self.round_log.iter().map(|r| r.rho).sum()
    }
}

/// Symmetric positive factor of a product of round matrices: for M = A_T⋯A₁,
/// returns P = (MᵀM)^{1/2}. M = UP with U orthogonal, so PΣP and MΣMᵀ have
/// the same spectrum and P carries the same certificate as M.
pub fn symmetric_factor(m: &DMatrix<f64>) -> Result<SymMatrix> {
    sqrt_psd(&SymMatrix::symmetrize(&(m.transpose() * m)))
}

/// Recursive private preconditioner. ρ-zCDP in total, split evenly over
/// `ppc_rounds(κ)` rounds.
pub fn ppc(x: &DMatrix<f64>, rho: f64, beta: f64, kappa: f64, noise: &mut NoiseSource) -> Result<Preconditioner> {
    ppc_with_k(x, rho, beta, kappa, DEFAULT_K, noise)
}

pub fn ppc_with_k(
    x: &DMatrix<f64>,
    rho: f64,
    beta: f64,
    kappa: f64,
    k: f64,
    noise: &mut NoiseSource,
) -> Result<Preconditioner> {
    check_param(kappa >= 1.0, || format!("kappa must be >= 1, got {kappa}"))?;
    check_param(rho > 0.0, || format!("rho must be > 0, got {rho}"))?;
    if x.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let d = x.ncols();
    let rounds = ppc_rounds(kappa);
    if rounds == 0 {
        return Ok(Preconditioner::identity(d, kappa));
    }
    let (rho_t, beta_t) = (rho / rounds as f64, beta / rounds as f64);
    let mut xt = x.clone();
    let mut m: DMatrix<f64> = DMatrix::identity(d, d);
    let mut kappa_t = kappa;
    let mut log = Vec::with_capacity(rounds);
    let mut last_v = DMatrix::zeros(d, 0);
    for _ in 0..rounds {
        let w = weak_ppc(&xt, rho_t, beta_t, kappa_t, k, noise)?;
        let at = w.a.scale(PPC_INFLATE);
        log.push(RoundRecord {
            kappa: kappa_t,
            threshold: w.threshold,
            dim_v: w.v.ncols(),
            shrink_k: k,
            scale: PPC_INFLATE,
            rho: rho_t,
            kept: w.naive.kept,
            noise_std: w.naive.noise_std,
            interval: None,
            trace: None,
            dim_accumulated: None,
        });
        if w.v.ncols() > 0 {
            last_v = w.v.clone();
        }
        xt = transform_rows(&xt, &at);
        m = at.matrix() * m;
        kappa_t *= PPC_SHRINK;
    }
    Ok(Preconditioner { a: symmetric_factor(&m)?, v: last_v, k, round_log: log, kappa_final: kappa_t })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovDiagnostics {
    /// Samples kept by the final clamped estimate.
    pub kept: usize,
    pub clamped: usize,
    /// Noise std of every `naive_pce` call, in order.
    pub noise_stds: Vec<f64>,
    pub rounds: usize,
    /// Bound on AΣA used for the final clamp radius.
    pub kappa_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovEstimate {
    pub sigma_hat: SymMatrix,
    pub budget_spent: PrivacyBudget,
    pub preconditioner: Preconditioner,
    pub diagnostics: CovDiagnostics,
}

/// Full covariance estimator, ρ-zCDP: ρ/2 for `ppc`, ρ/2 for the final
/// clamped estimate.
///
/// The final clamp uses the bound certified by `ppc` (κ·0.7^T, which is κ
/// itself when no rounds run) rather than the generic 1000; any radius is
/// private, and the certified one is the smallest that keeps Gaussian data
/// unclamped.
pub fn pgce(x: &DMatrix<f64>, rho: f64, beta: f64, kappa: f64, noise: &mut NoiseSource) -> Result<CovEstimate> {
    check_param(rho > 0.0, || format!("rho must be > 0, got {rho}"))?;
    check_param(beta > 0.0 && beta < 1.0, || format!("beta must be in (0,1), got {beta}"))?;
    let pre = ppc(x, rho / 2.0, beta / 2.0, kappa, noise)?;
    let xa = transform_rows(x, &pre.a);
    let fin = naive_pce(&xa, rho / 2.0, beta / 2.0, pre.kappa_final.max(1.0), noise)?;
    let a_inv = inv_psd(&pre.a)?;
    let sigma_hat = fin.sigma.conjugate(&a_inv);
    let mut noise_stds: Vec<f64> = pre.round_log.iter().map(|r| r.noise_std).collect();
    noise_stds.push(fin.noise_std);
    Ok(CovEstimate {
        sigma_hat,
        budget_spent: PrivacyBudget::Zcdp { rho },
        diagnostics: CovDiagnostics {
            kept: fin.kept,
            clamped: x.nrows() - fin.kept,
            noise_stds,
            rounds: pre.round_log.len(),
            kappa_final: pre.kappa_final,
        },
        preconditioner: pre,
    })
}
