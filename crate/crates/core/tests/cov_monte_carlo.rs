mod common;

use common::{centered, draw, median, sandwich};
use dpdist::cov::pgce;
use dpdist::cov_unbounded::{kappa_star, p_estimate_trace, pgce_no_bound, ppc_range, range_params, weak_ppc_no_bound};
use dpdist::linalg::mahalanobis_mat;
use dpdist::NoiseSource;

#[test]
fn pgce_accuracy_at_high_condition_number() {
    let p = centered(&[1.0, 10.0, 1e3, 1e4]);
    let errs: Vec<f64> = (0..20)
        .map(|seed| {
            let x = draw(&p, 500_000, 100 + seed);
            let est = pgce(&x, 1.0, 0.1, 1e4, &mut NoiseSource::seeded(seed)).unwrap();
            mahalanobis_mat(&p.cov.sub(&est.sigma_hat), &p.cov).unwrap()
        })
        .collect();
    let med = median(errs.clone());
    assert!(med <= 0.3, "median {med}, errors {errs:?}");
}

/// The lower side needs the found direction aligned to within ~d/(4√κ);
/// at n = 10⁵ the per-step noise leaves it off by ~0.3 rad.
#[test]
#[ignore = "infeasible at the stated sample size; see README"]
fn weak_ppc_no_bound_certificate() {
    let d = 8;
    let l1 = 10.0 * 40.0 * (d as f64).powi(3);
    let mut diag = vec![1.0; d];
    diag[0] = l1;
    let p = centered(&diag);
    let ok = (0..20)
        .filter(|&seed| {
            let x = draw(&p, 100_000, 200 + seed);
            let Some(step) =
                weak_ppc_no_bound(&x, 1.0, 0.1, (l1 / 2.0, 2.0 * l1), &mut NoiseSource::seeded(seed)).unwrap()
            else {
                return false;
            };
            let (lo, hi) = sandwich(&step.a, &p.cov);
            let d2 = (d * d) as f64;
            lo >= 1.0 - 4.0 / d2 && hi <= 5.0 * d2 + 0.75 * l1
        })
        .count();
    assert!(ok >= 18, "{ok}/20");
}

#[test]
fn ppc_range_first_round_shrinks_top_direction() {
    let d = 6;
    let p = centered(&[1e6, 1.0, 1.0, 1.0, 1.0, 1.0]);
    let rp = range_params(1.0, 1e-6, 0.1, d);
    let ok = (0..20)
        .filter(|&seed| {
            let x = draw(&p, 200_000, 300 + seed);
            let mut s = NoiseSource::seeded(seed);
            let Some(t) = p_estimate_trace(&x, rp.eps, rp.delta, rp.beta, &mut s).unwrap() else {
                return false;
            };
            let interval = (t.t / 16.0, 16.0 * d as f64 * t.t);
            match weak_ppc_no_bound(&x, rp.rho, rp.beta, interval, &mut s).unwrap() {
                Some(step) => {
                    let m = p.cov.conjugate(&step.a);
                    let proj = step.v.transpose() * m.matrix() * &step.v;
                    proj.norm() < 10.0 * (d * d) as f64
                }
                None => false,
            }
        })
        .count();
    assert!(ok >= 18, "{ok}/20");
}

/// Same alignment requirement as the weak step, compounded over rounds.
#[test]
#[ignore = "infeasible at the stated sample size; see README"]
fn ppc_range_final_certificate() {
    let d = 6;
    let p = centered(&[1e6, 1e4, 1.0, 1.0, 1.0, 1.0]);
    let ok = (0..20)
        .filter(|&seed| {
            let x = draw(&p, 200_000, 400 + seed);
            match ppc_range(&x, 1.0, 1e-6, 0.1, &mut NoiseSource::seeded(seed)) {
                Ok(pre) => {
                    let (lo, hi) = sandwich(&pre.a, &p.cov);
                    lo >= 1.0 && hi <= kappa_star(d)
                }
                Err(_) => false,
            }
        })
        .count();
    assert!(ok >= 17, "{ok}/20");
}

/// Inherits the misaligned preconditioner: A⁻¹ amplifies the final error.
#[test]
#[ignore = "infeasible at the stated sample size; see README"]
fn pgce_no_bound_accuracy() {
    let p = centered(&[1.0, 50.0, 1e4, 1e7]);
    let errs: Vec<f64> = (0..10)
        .map(|seed| {
            let x = draw(&p, 1_000_000, 500 + seed);
            match pgce_no_bound(&x, 1.0, 1e-6, 0.1, &mut NoiseSource::seeded(seed)) {
                Ok(est) => mahalanobis_mat(&p.cov.sub(&est.sigma_hat), &p.cov).unwrap(),
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    let med = median(errs.clone());
    assert!(med <= 0.5, "median {med}, errors {errs:?}");
}
