#![allow(dead_code)]

use dpdist::linalg::sample_gaussian;
use dpdist::{GaussianParams, NoiseSource, SymMatrix};
use nalgebra::{DMatrix, DVector};

pub fn diag_gaussian(mean: &[f64], diag: &[f64], kappa: Option<f64>) -> GaussianParams {
    let mean = DVector::from_column_slice(mean);
    let r = mean.norm();
    GaussianParams::new(mean, SymMatrix::from_diagonal(diag), r, kappa).unwrap()
}

pub fn centered(diag: &[f64]) -> GaussianParams {
    diag_gaussian(&vec![0.0; diag.len()], diag, None)
}

pub fn draw(p: &GaussianParams, n: usize, seed: u64) -> DMatrix<f64> {
    sample_gaussian(p, n, &mut NoiseSource::seeded(seed)).unwrap()
}

/// Uniform direction scaled to norm `r·u`, u ~ U[0,1].
pub fn random_mean(d: usize, r: f64, noise: &mut NoiseSource) -> DVector<f64> {
    let v = DVector::from_fn(d, |_, _| noise.standard_normal());
    v.normalize() * (r * noise.uniform())
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Extreme eigenvalues of AΣA.
pub fn sandwich(a: &SymMatrix, sigma: &SymMatrix) -> (f64, f64) {
    let m = sigma.conjugate(a);
    (m.min_eigenvalue(), m.max_eigenvalue())
}
