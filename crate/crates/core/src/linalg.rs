//! Dense symmetric-matrix numerics.
//!
//! [`SymMatrix`] keeps entries exactly symmetric: every constructor either
//! checks `m[(i,j)] == m[(j,i)]` bit-for-bit or mirrors one triangle. Square
//! roots are always the symmetric PSD root from the eigendecomposition.
//!
//! Sample matrices are `n × d` with one sample per row.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_param, Error, Result};
use crate::noise::NoiseSource;

/// Relative eigenvalue floor below which a matrix is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, which must be square, finite and exactly symmetric.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidInput(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        let d = m.nrows();
        for i in 0..d {
            for j in 0..i {
                if m[(i, j)] != m[(j, i)] {
                    return Err(Error::InvalidInput(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// (M + Mᵀ)/2, which is exactly symmetric in floating point.
    pub fn symmetrize(m: &DMatrix<f64>) -> Self {
        assert!(m.is_square());
        let mut s = m + m.transpose();
        s *= 0.5;
        SymMatrix(s)
    }

    pub(crate) fn from_symmetric_unchecked(m: DMatrix<f64>) -> Self {
        debug_assert!(m.is_square());
        SymMatrix(m)
    }

    pub fn zeros(d: usize) -> Self {
        SymMatrix(DMatrix::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }

    /// A·M·A for symmetric A.
    pub fn conjugate(&self, a: &SymMatrix) -> SymMatrix {
        SymMatrix::symmetrize(&(&a.0 * &self.0 * &a.0))
    }

    /// B·M·Bᵀ for arbitrary square B.
    pub fn congruence(&self, b: &DMatrix<f64>) -> SymMatrix {
        SymMatrix::symmetrize(&(b * &self.0 * b.transpose()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues().iter().fold(0.0, |m, l| m.max(l.abs()))
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.0.clone().symmetric_eigenvalues().iter().copied().collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    pub fn min_eigenvalue(&self) -> f64 {
        *self.eigenvalues().last().expect("non-empty matrix")
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }
}

/// Eigenpairs sorted by descending eigenvalue; `vectors` has one unit
/// eigenvector per column.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl Eigen {
    pub fn pairs(&self) -> impl Iterator<Item = (f64, DVector<f64>)> + '_ {
        self.values.iter().enumerate().map(|(i, &l)| (l, self.vectors.column(i).into_owned()))
    }

    /// Σ f(λᵢ) vᵢvᵢᵀ.
    pub fn reassemble(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let mut scaled = self.vectors.clone();
        for (i, &l) in self.values.iter().enumerate() {
            scaled.column_mut(i).scale_mut(f(l));
        }
        SymMatrix::symmetrize(&(scaled * self.vectors.transpose()))
    }
}

pub fn eigendecompose(m: &SymMatrix) -> Result<Eigen> {
    if m.0.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    let e = SymmetricEigen::new(m.0.clone());
    let mut order: Vec<usize> = (0..m.dim()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(m.dim(), m.dim());
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &e.eigenvectors.column(i));
    }
    Ok(Eigen { values, vectors })
}

/// Nearest PSD matrix in Frobenius norm: negative eigenvalues clamped to 0.
pub fn project_psd(m: &SymMatrix) -> Result<SymMatrix> {
    let e = eigendecompose(m)?;
    if e.values.iter().all(|&l| l >= 0.0) {
        return Ok(m.clone());
    }
    Ok(e.reassemble(|l| l.max(0.0)))
}

fn positive_definite_eigen(sigma: &SymMatrix) -> Result<Eigen> {
    let e = eigendecompose(sigma)?;
    let top = e.values.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let floor = SINGULAR_TOL * top;
    match e.values.last() {
        Some(&l) if l > floor && l > 0.0 => Ok(e),
        Some(&l) => Err(Error::SingularMatrix(format!("smallest eigenvalue {l:e} <= {floor:e}"))),
        None => Err(Error::EmptyInput),
    }
}

/// Σ^{-1/2} (symmetric root).
pub fn inv_sqrt_psd(sigma: &SymMatrix) -> Result<SymMatrix> {
    Ok(positive_definite_eigen(sigma)?.reassemble(|l| 1.0 / l.sqrt()))
}

/// Σ^{1/2} (symmetric root); tiny negative eigenvalues are clamped to 0.
pub fn sqrt_psd(sigma: &SymMatrix) -> Result<SymMatrix> {
    Ok(eigendecompose(sigma)?.reassemble(|l| l.max(0.0).sqrt()))
}

/// Inverse of a positive-definite matrix via its eigendecomposition.
pub fn inv_psd(sigma: &SymMatrix) -> Result<SymMatrix> {
    Ok(positive_definite_eigen(sigma)?.reassemble(|l| 1.0 / l))
}

/// ‖Σ^{-1/2} v‖₂.
pub fn mahalanobis_vec(v: &DVector<f64>, sigma: &SymMatrix) -> Result<f64> {
    check_dims(v.len(), sigma.dim())?;
    let e = positive_definite_eigen(sigma)?;
    let proj = e.vectors.transpose() * v;
    Ok(proj.iter().zip(&e.values).map(|(p, l)| p * p / l).sum::<f64>().sqrt())
}

/// ‖Σ^{-1/2} X Σ^{-1/2}‖_F.
pub fn mahalanobis_mat(x: &SymMatrix, sigma: &SymMatrix) -> Result<f64> {
    check_dims(x.dim(), sigma.dim())?;
    let s = inv_sqrt_psd(sigma)?;
    Ok((s.matrix() * x.matrix() * s.matrix()).norm())
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Mean and covariance of a Gaussian, with the range bounds ‖μ‖₂ ≤ R and
/// I ⪯ Σ ⪯ κI that estimators are told about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
    pub r_bound: f64,
    pub kappa: Option<f64>,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, cov: SymMatrix, r_bound: f64, kappa: Option<f64>) -> Result<Self> {
        check_dims(mean.len(), cov.dim())?;
        check_param(r_bound >= 0.0, || format!("R must be >= 0, got {r_bound}"))?;
        if let Some(k) = kappa {
            check_param(k >= 1.0, || format!("kappa must be >= 1, got {k}"))?;
        }
        check_psd(&cov)?;
        Ok(GaussianParams { mean, cov, r_bound, kappa })
    }

    /// Parameters with unspecified range bounds (R = ‖μ‖, no κ).
    pub fn unbounded(mean: DVector<f64>, cov: SymMatrix) -> Result<Self> {
        let r = mean.norm();
        Self::new(mean, cov, r, None)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_psd(cov: &SymMatrix) -> Result<()> {
    let ev = cov.eigenvalues();
    let top = ev.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    if let Some(&low) = ev.last() {
        if low < -1e-9 * top.max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidInput(format!("covariance not PSD (eigenvalue {low:e})")));
        }
    }
    Ok(())
}

/// n rows drawn i.i.d. from N(μ, Σ), d standard normals per row in order.
pub fn sample_gaussian(params: &GaussianParams, n: usize, noise: &mut NoiseSource) -> Result<DMatrix<f64>> {
    check_psd(&params.cov)?;
    let d = params.dim();
    let root = match params.cov.0.clone().cholesky() {
        Some(c) => c.l(),
        None => sqrt_psd(&params.cov)?.into_inner(),
    };
    let mut out = DMatrix::zeros(n, d);
    let mut z = DVector::zeros(d);
    for i in 0..n {
        for zj in z.iter_mut() {
            *zj = noise.standard_normal();
        }
        let x = &root * &z + &params.mean;
        out.set_row(i, &x.transpose());
    }
    Ok(out)
}

/// (1/n) Σ xᵢxᵢᵀ (uncentered).
pub fn second_moment(x: &DMatrix<f64>) -> Result<SymMatrix> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(SymMatrix::symmetrize(&(x.transpose() * x / x.nrows() as f64)))
}

pub fn column_means(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(x.row_mean().transpose())
}

/// Rows multiplied by the symmetric matrix A, i.e. xᵢ ↦ A xᵢ.
pub fn transform_rows(x: &DMatrix<f64>, a: &SymMatrix) -> DMatrix<f64> {
    x * a.matrix()
}

/// Writes one sample per row as decimal text.
pub fn write_samples_csv<W: Write>(w: W, x: &DMatrix<f64>, header: bool) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    if header {
        wr.write_record((0..x.ncols()).map(|j| format!("x{j}")))?;
    }
    for row in x.row_iter() {
        wr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(r: R, header: bool) -> Result<DMatrix<f64>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(header).trim(csv::Trim::All).from_reader(r);
    let mut data = Vec::new();
    let mut d = None;
    let mut n = 0;
    for rec in rd.records() {
        let rec = rec?;
        match d {
            None => d = Some(rec.len()),
            Some(k) if k != rec.len() => {
                return Err(Error::InvalidInput(format!("row {n} has {} fields, expected {k}", rec.len())))
            }
            _ => {}
        }
        for f in rec.iter() {
            data.push(f.parse::<f64>().map_err(|e| Error::InvalidInput(format!("row {n}: {e}")))?);
        }
        n += 1;
    }
    let d = d.ok_or(Error::EmptyInput)?;
    Ok(DMatrix::from_row_slice(n, d, &data))
}
