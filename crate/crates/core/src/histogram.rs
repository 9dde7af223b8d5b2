//! Private histograms over finite and countably infinite bucket universes.
//!
//! Two mechanisms:
//!
//! * [`stable_histogram_approx_dp`] works over an unbounded key space. Only
//!   buckets that occur in the data get Laplace noise (scale 2/(εn)), and a
//!   noisy frequency is released only if it clears
//!   τ = 1/n + 2·ln(2/δ)/(εn). A bucket absent from the data is never
//!   reported, whatever the seed.
//! * [`histogram_zcdp`] works over a fixed finite universe and adds Gaussian
//!   noise to the full frequency vector (Δ₂ = √2/n under replacement).
//!
//! Both return an `accuracy_bound` so callers can check their own
//! preconditions at run time.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_param, Error, Result};
use crate::noise::NoiseSource;
use crate::privacy::gaussian_mechanism_vector;

/// Bucket identifier. `Bottom` sorts before every index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BucketKey {
    Bottom,
    Index(i64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramResult {
    pub entries: BTreeMap<BucketKey, f64>,
    pub n: usize,
    /// ℓ∞ error guaranteed with probability 1 − β.
    pub accuracy_bound: f64,
}

impl HistogramResult {
    pub fn get(&self, key: BucketKey) -> f64 {
        self.entries.get(&key).copied().unwrap_or(0.0)
    }
}

fn counts(data: &[BucketKey]) -> BTreeMap<BucketKey, usize> {
    let mut c = BTreeMap::new();
    for &k in data {
        *c.entry(k).or_insert(0) += 1;
    }
    c
}

pub fn stable_accuracy_bound(n: usize, eps: f64, delta: f64, beta: f64) -> f64 {
    let n = n as f64;
    4.0 * (2.0 * n / (delta * beta)).ln() / (eps * n)
}

pub fn stable_threshold(n: usize, eps: f64, delta: f64) -> f64 {
    let n = n as f64;
    1.0 / n + 2.0 * (2.0 / delta).ln() / (eps * n)
}

/// (ε, δ)-DP histogram over an unbounded universe.
///
/// With the zero-noise oracle the release threshold is skipped as well, so
/// the result is the exact empirical distribution.
pub fn stable_histogram_approx_dp(
    data: &[BucketKey],
    eps: f64,
    delta: f64,
    beta: f64,
    noise: &mut NoiseSource,
) -> Result<HistogramResult> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    check_param(eps > 0.0, || format!("eps must be > 0, got {eps}"))?;
    check_param(delta > 0.0 && delta < 1.0 / n as f64, || {
        format!("delta must be in (0, 1/n) = (0, {}), got {delta}", 1.0 / n as f64)
    })?;
    check_param(beta > 0.0 && beta < 1.0, || format!("beta must be in (0,1), got {beta}"))?;

    let nf = n as f64;
    let scale = 2.0 / (eps * nf);
    let tau = stable_threshold(n, eps, delta);
    let exact = noise.is_zero_noise();
    let mut entries = BTreeMap::new();
    for (k, c) in counts(data) {
        let f = c as f64 / nf;
        if exact {
            entries.insert(k, f);
            continue;
        }
        let noisy = f + noise.laplace(scale);
        if noisy >= tau {
            entries.insert(k, noisy);
        }
    }
    Ok(HistogramResult { entries, n, accuracy_bound: stable_accuracy_bound(n, eps, delta, beta) })
}

pub fn zcdp_accuracy_bound(n: usize, universe: usize, rho: f64, beta: f64) -> f64 {
    (2.0 * (2.0 * universe as f64 / beta).ln() / rho).sqrt() / n as f64 * 2f64.sqrt()
}

/// ρ-zCDP histogram over a finite universe. Every universe key gets an entry.
pub fn histogram_zcdp(
    data: &[BucketKey],
    universe: &[BucketKey],
    rho: f64,
    beta: f64,
    noise: &mut NoiseSource,
) -> Result<HistogramResult> {
    let n = data.len();
    if n == 0 || universe.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_param(beta > 0.0 && beta < 1.0, || format!("beta must be in (0,1), got {beta}"))?;
    let mut index = HashMap::with_capacity(universe.len());
    for (i, &k) in universe.iter().enumerate() {
        if index.insert(k, i).is_some() {
            return Err(Error::InvalidInput(format!("duplicate universe key {k:?}")));
        }
    }
    let mut freq = DVector::zeros(universe.len());
    for k in data {
        let Some(&i) = index.get(k) else {
            return Err(Error::InvalidInput(format!("key {k:?} outside the universe")));
        };
        freq[i] += 1.0;
    }
    freq /= n as f64;
    let noisy = gaussian_mechanism_vector(&freq, 2f64.sqrt() / n as f64, rho, noise)?;
    Ok(HistogramResult {
        entries: universe.iter().copied().zip(noisy.iter().copied()).collect(),
        n,
        accuracy_bound: zcdp_accuracy_bound(n, universe.len(), rho, beta),
    })
}

/// Heaviest indexed bucket if its frequency reaches `threshold`; ties go to
/// the smaller index. `Bottom` is never returned.
pub fn argmax_bucket(h: &HistogramResult, threshold: f64) -> Option<BucketKey> {
    let mut best: Option<(BucketKey, f64)> = None;
    // BTreeMap iterates in ascending key order, so a strict `>` keeps the
    // smallest index among ties.
    for (&k, &f) in &h.entries {
        if k == BucketKey::Bottom {
            continue;
        }
        if best.is_none_or(|(_, bf)| f > bf) {
            best = Some((k, f));
        }
    }
    best.filter(|&(_, f)| f >= threshold).map(|(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(v: &[i64]) -> Vec<BucketKey> {
        v.iter().map(|&i| BucketKey::Index(i)).collect()
    }

    fn hist(pairs: &[(i64, f64)]) -> HistogramResult {
        HistogramResult {
            entries: pairs.iter().map(|&(k, f)| (BucketKey::Index(k), f)).collect(),
            n: 1,
            accuracy_bound: 0.0,
        }
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax_bucket(&hist(&[(2, 0.6), (5, 0.1)]), 0.25), Some(BucketKey::Index(2)));
        assert_eq!(argmax_bucket(&hist(&[(2, 0.2)]), 0.25), None);
        assert_eq!(argmax_bucket(&hist(&[(1, 0.3), (4, 0.3)]), 0.25), Some(BucketKey::Index(1)));
        let mut h = hist(&[(1, 0.3)]);
        h.entries.insert(BucketKey::Bottom, 0.7);
        assert_eq!(argmax_bucket(&h, 0.25), Some(BucketKey::Index(1)));
    }

    #[test]
    fn bottom_orders_first() {
        assert!(BucketKey::Bottom < BucketKey::Index(i64::MIN));
    }

    #[test]
    fn stable_zero_noise_single_bucket() {
        let data = vec![BucketKey::Index(3); 500];
        let mut z = NoiseSource::zero_noise_oracle();
        let h = stable_histogram_approx_dp(&data, 1.0, 1e-4, 0.05, &mut z).unwrap();
        assert_eq!(h.entries.len(), 1);
        assert_eq!(h.get(BucketKey::Index(3)), 1.0);
    }

    #[test]
    fn stable_never_invents_buckets() {
        let data = idx(&[0, 0, 0, 1, 5, 5, 9]);
        for seed in 0..500 {
            let mut s = NoiseSource::seeded(seed);
            let h = stable_histogram_approx_dp(&data, 50.0, 0.1, 0.1, &mut s).unwrap();
            for k in h.entries.keys() {
                assert!(data.contains(k));
            }
        }
    }

    #[test]
    fn stable_delta_must_be_below_inverse_n() {
        let data = idx(&[1; 100]);
        let mut s = NoiseSource::seeded(0);
        assert!(stable_histogram_approx_dp(&data, 1.0, 0.01, 0.1, &mut s).is_err());
        assert!(stable_histogram_approx_dp(&data, 1.0, 0.0099, 0.1, &mut s).is_ok());
    }

    #[test]
    fn stable_bound_formula() {
        let (n, eps, delta, beta) = (1000usize, 1.0, 1e-4, 0.05);
        let want = 4.0 * (2.0 * 1000.0 / (1e-4 * 0.05f64)).ln() / 1000.0;
        assert!((stable_accuracy_bound(n, eps, delta, beta) - want).abs() < 1e-15);
        let data = idx(&[0; 1000]);
        let mut s = NoiseSource::seeded(2);
        let h = stable_histogram_approx_dp(&data, eps, delta, beta, &mut s).unwrap();
        assert_eq!(h.accuracy_bound, want);
    }

    #[test]
    fn stable_error_within_bound() {
        let n = 2000;
        let data: Vec<_> = (0..n).map(|i| BucketKey::Index((i % 7) as i64)).collect();
        let mut fails = 0;
        for seed in 0..200 {
            let mut s = NoiseSource::seeded(seed);
            let h = stable_histogram_approx_dp(&data, 1.0, 1e-5, 0.05, &mut s).unwrap();
            let truth = counts(&data);
            let err = truth.iter().map(|(k, &c)| (h.get(*k) - c as f64 / n as f64).abs()).fold(0.0, f64::max);
            if err > h.accuracy_bound {
                fails += 1;
            }
        }
        assert!(fails <= 10, "{fails}");
    }

    #[test]
    fn zcdp_zero_noise_exact() {
        let data = idx(&[0, 1, 1, 2, 2, 2]);
        let uni = idx(&[0, 1, 2, 3]);
        let mut z = NoiseSource::zero_noise_oracle();
        let h = histogram_zcdp(&data, &uni, 1.0, 0.1, &mut z).unwrap();
        assert_eq!(h.get(BucketKey::Index(2)), 0.5);
        assert_eq!(h.get(BucketKey::Index(3)), 0.0);
        let total: f64 = h.entries.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zcdp_universe_checks() {
        let mut s = NoiseSource::seeded(0);
        assert!(matches!(histogram_zcdp(&idx(&[5]), &idx(&[0, 1]), 1.0, 0.1, &mut s), Err(Error::InvalidInput(_))));
        let h = histogram_zcdp(&idx(&[0, 0]), &idx(&[0]), 1.0, 0.1, &mut s).unwrap();
        assert_eq!(h.entries.len(), 1);
        assert!((h.get(BucketKey::Index(0)) - 1.0).abs() < 5.0 / 2.0);
    }

    #[test]
    fn replacement_sensitivity_is_sqrt2_over_n() {
        let n = 10;
        let uni = idx(&[0, 1, 2]);
        let a: Vec<_> = idx(&[0; 10]);
        let mut b = a.clone();
        b[0] = BucketKey::Index(2);
        let mut z = NoiseSource::zero_noise_oracle();
        let ha = histogram_zcdp(&a, &uni, 1.0, 0.1, &mut z).unwrap();
        let hb = histogram_zcdp(&b, &uni, 1.0, 0.1, &mut z).unwrap();
        let diff: f64 = uni.iter().map(|&k| (ha.get(k) - hb.get(k)).powi(2)).sum::<f64>().sqrt();
        assert!((diff - 2f64.sqrt() / n as f64).abs() < 1e-15);
    }

    #[test]
    fn zcdp_error_within_bound() {
        let n = 2000;
        let uni: Vec<_> = (0..40).map(BucketKey::Index).collect();
        let data: Vec<_> = (0..n).map(|i| BucketKey::Index(((i * i) % 40) as i64)).collect();
        let mut z = NoiseSource::zero_noise_oracle();
        let exact = histogram_zcdp(&data, &uni, 0.5, 0.05, &mut z).unwrap();
        let mut ok = 0;
        for seed in 0..200 {
            let mut s = NoiseSource::seeded(seed);
            let h = histogram_zcdp(&data, &uni, 0.5, 0.05, &mut s).unwrap();
            let err = uni.iter().map(|&k| (h.get(k) - exact.get(k)).abs()).fold(0.0, f64::max);
            if err <= h.accuracy_bound {
                ok += 1;
            }
        }
        assert!(ok >= 190, "{ok}");
    }
}
