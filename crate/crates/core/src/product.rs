//! Learning product distributions over {0,1}^d.
//!
//! [`ppde`] splits the samples into disjoint blocks, one per round. Round r
//! releases a noisy truncated mean of the still-active coordinates. Heavy
//! coordinates (noisy mean ≥ τ_r) are frozen at that value. The rest carry
//! on with half the mean bound u_r, and therefore a smaller truncation
//! radius and less noise. Each row is read in exactly one round, so the
//! whole procedure is ρ-zCDP without composition.

use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_param, Error, Result};
use crate::noise::NoiseSource;
use crate::privacy::{gaussian_mechanism_vector, gaussian_sigma, PrivacyBudget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductModel {
    pub p: Vec<f64>,
}

impl ProductModel {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("product mean {v} outside [0,1]")));
        }
        Ok(Self { p })
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn sample(&self, n: usize, noise: &mut NoiseSource) -> BinaryMatrix {
        let d = self.dim();
        let mut bits = Vec::with_capacity(n * d);
        for _ in 0..n {
            bits.extend(self.p.iter().map(|&p| noise.bernoulli(p) as u8));
        }
        BinaryMatrix { n, d, bits }
    }
}

/// x if ‖x‖₂ ≤ B, else (B/‖x‖₂)·x.
pub fn trunc(x: &[f64], b: f64) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= b {
        x.to_vec()
    } else {
        x.iter().map(|v| v * (b / norm)).collect()
    }
}

/// (1/m)·Σ trunc(xᵢ, B) over the rows of `x`.
pub fn tmean(x: &DMatrix<f64>, b: f64) -> Result<DVector<f64>> {
    check_param(b >= 0.0, || format!("truncation radius must be >= 0, got {b}"))?;
    if x.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let mut acc = DVector::zeros(x.ncols());
    for row in x.row_iter() {
        let norm = row.norm();
        let s = if norm <= b { 1.0 } else { b / norm };
        acc += row.transpose() * s;
    }
    Ok(acc / x.nrows() as f64)
}

/// Read access to binary samples, as needed by [`ppde`].
pub trait ProductSamples {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Truncated mean over `rows`, restricted to `coords`, radius `b`.
    fn truncated_mean(&self, rows: Range<usize>, coords: &[usize], b: f64) -> Vec<f64>;
}

/// Dense n×d matrix of bits, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    n: usize,
    d: usize,
    bits: Vec<u8>,
}

impl BinaryMatrix {
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut bits = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::InvalidInput(format!("row {i} has {} columns, expected {d}", r.len())));
            }
            if let Some(v) = r.iter().find(|&&v| v > 1) {
                return Err(Error::InvalidInput(format!("row {i} has non-binary value {v}")));
            }
            bits.extend_from_slice(r);
        }
        Ok(Self { n: rows.len(), d, bits })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, bits: vec![0; n * d] }
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.d + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.d + j] = v as u8;
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.d..(i + 1) * self.d]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut acc = vec![0usize; self.d];
        for i in 0..self.n {
            for (a, &b) in acc.iter_mut().zip(self.row(i)) {
                *a += b as usize;
            }
        }
        acc.into_iter().map(|c| c as f64 / self.n as f64).collect()
    }

    /// Copy with the given columns complemented.
    pub fn flip_columns(&self, flip: &[bool]) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for (j, &f) in flip.iter().enumerate() {
                if f {
                    out.bits[i * self.d + j] ^= 1;
                }
            }
        }
        out
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.d, |i, j| self.get(i, j) as f64)
    }

    /// Rows of 0/1 integers, no header.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| match f {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::InvalidInput(format!("non-binary field {other:?}"))),
                })
                .collect::<Result<Vec<u8>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for i in 0..self.n {
            wtr.write_record(self.row(i).iter().map(|b| if *b == 1 { "1" } else { "0" }))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl ProductSamples for BinaryMatrix {
    fn dim(&self) -> usize {
        self.d
    }

    fn len(&self) -> usize {
        self.n
    }

    fn truncated_mean(&self, rows: Range<usize>, coords: &[usize], b: f64) -> Vec<f64> {
        let m = rows.len();
        let mut acc = vec![0.0; coords.len()];
        for i in rows {
            let row = self.row(i);
            let ones = coords.iter().filter(|&&j| row[j] == 1).count();
            if ones == 0 {
                continue;
            }
            let norm = (ones as f64).sqrt();
            let s = if norm <= b { 1.0 } else { b / norm };
            for (a, &j) in acc.iter_mut().zip(coords) {
                if row[j] == 1 {
                    *a += s;
                }
            }
        }
        acc.iter().map(|a| a / m as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSizing {
    /// m = c'·d/α² + c·d/(α√(2ρ)), with c = k·ln^{5/4}(d/(αβ√(2ρ))) and
    /// c' = k·ln³(d·R/β). The analysis uses k = 128.
    Formula {
        constant: f64,
    },
    Fixed(usize),
}

impl Default for BlockSizing {
    fn default() -> Self {
        BlockSizing::Formula { constant: 128.0 }
    }
}

/// Partitioning rounds: r with 2^{−r}·d ≥ 1.
pub fn partition_rounds(d: usize) -> usize {
    if d == 0 {
        0
    } else {
        d.ilog2() as usize
    }
}

pub fn block_size(d: usize, rho: f64, alpha: f64, beta: f64, sizing: BlockSizing) -> Result<usize> {
    check_param(rho > 0.0, || format!("rho must be > 0, got {rho}"))?;
    check_param(alpha > 0.0, || format!("alpha must be > 0, got {alpha}"))?;
    check_param(beta > 0.0 && beta < 1.0, || format!("beta must be in (0,1), got {beta}"))?;
    match sizing {
        BlockSizing::Fixed(m) => {
            check_param(m >= 1, || "fixed block size must be >= 1".into())?;
            Ok(m)
        }
        BlockSizing::Formula { constant } => {
            check_param(constant > 0.0, || format!("block constant must be > 0, got {constant}"))?;
            let df = d as f64;
            let r = partition_rounds(d).max(1) as f64;
            let s = (2.0 * rho).sqrt();
            let c = constant * (df / (alpha * beta * s)).ln().max(1.0).powf(1.25);
            let c2 = constant * (df * r / beta).ln().max(1.0).powi(3);
            let m = c2 * df / (alpha * alpha) + c * df / (alpha * s);
            if !m.is_finite() || m > u32::MAX as f64 {
                return Err(Error::TooLarge(format!("block size {m:e}")));
            }
            Ok(m.ceil() as usize)
        }
    }
}

/// One round of [`ppde`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionState {
    /// 1-based round index.
    pub round: usize,
    pub active: Vec<usize>,
    pub u: f64,
    pub tau: f64,
    pub b: f64,
    pub rows: Range<usize>,
    pub noise_std: f64,
    /// Noisy truncated means of the active coordinates, in `active` order.
    pub q_round: Vec<f64>,
    pub frozen: Vec<usize>,
    /// True for the final round, which fixes every remaining coordinate.
    pub last: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpdeEstimate {
    pub model: ProductModel,
    pub rounds: Vec<PartitionState>,
    pub m: usize,
    pub blocks: usize,
    /// Coordinates whose noisy value was clamped into [0,1].
    pub clamped: usize,
    pub budget_spent: PrivacyBudget,
    /// Coordinates complemented before estimation (`ppde_flip_heavy`).
    pub flipped: Vec<bool>,
}

/// ρ-zCDP product-distribution learner. Assumes every coordinate mean is at
/// most 1/2; see [`ppde_flip_heavy`] otherwise.
pub fn ppde<S: ProductSamples + ?Sized>(
    x: &S,
    rho: f64,
    alpha: f64,
    beta: f64,
    sizing: BlockSizing,
    noise: &mut NoiseSource,
) -> Result<PpdeEstimate> {
    let d = x.dim();
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    let m = block_size(d, rho, alpha, beta, sizing)?;
    let max_rounds = partition_rounds(d);
    let blocks = max_rounds + 1;
    if x.len() < blocks * m {
        return Err(Error::InsufficientSamples { required: blocks * m, available: x.len(), block_size: m, blocks });
    }
    let log_r = max_rounds.max(1) as f64;
    let mf = m as f64;
    let mut q = vec![0.0; d];
    let mut active: Vec<usize> = (0..d).collect();
    let (mut u, mut tau) = (0.5, 3.0 / 16.0);
    let mut rounds = Vec::new();
    let mut r = 1;

    let release = |active: &[usize], b: f64, r: usize, noise: &mut NoiseSource| -> Result<(Vec<f64>, f64)> {
        let rows = (r - 1) * m..r * m;
        let t = DVector::from_vec(x.truncated_mean(rows, active, b));
        let noisy = gaussian_mechanism_vector(&t, b / mf, rho, noise)?;
        Ok((noisy.iter().copied().collect(), gaussian_sigma(b / mf, rho)?))
    };

    while u * active.len() as f64 >= 1.0 {
        debug_assert!(r <= max_rounds);
        let b = (6.0 * u * active.len() as f64 * (mf * log_r / beta).ln()).sqrt();
        let (qr, noise_std) = release(&active, b, r, noise)?;
        let mut next = Vec::new();
        let mut frozen = Vec::new();
        for (&j, &v) in active.iter().zip(&qr) {
            if v < tau {
                next.push(j);
            } else {
                q[j] = v;
                frozen.push(j);
            }
        }
        rounds.push(PartitionState {
            round: r,
            active: std::mem::take(&mut active),
            u,
            tau,
            b,
            rows: (r - 1) * m..r * m,
            noise_std,
            q_round: qr,
            frozen,
            last: false,
        });
        active = next;
        u /= 2.0;
        tau /= 2.0;
        r += 1;
    }
    if !active.is_empty() {
        let b = (6.0 * (mf / beta).ln()).sqrt();
        let (qr, noise_std) = release(&active, b, r, noise)?;
        for (&j, &v) in active.iter().zip(&qr) {
            q[j] = v;
        }
        rounds.push(PartitionState {
            round: r,
            frozen: active.clone(),
            active,
            u,
            tau,
            b,
            rows: (r - 1) * m..r * m,
            noise_std,
            q_round: qr,
            last: true,
        });
    }
    let clamped = q.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    let p = q.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(PpdeEstimate {
        model: ProductModel { p },
        rounds,
        m,
        blocks,
        clamped,
        budget_spent: PrivacyBudget::Zcdp { rho },
        flipped: vec![false; d],
    })
}

/// Removes the mean ≤ 1/2 precondition: a ρ/10 noisy vote on the column
/// means (Δ₂ = √d/n) picks which coordinates to complement, `ppde` runs on
/// the complemented data with the remaining budget, and the flipped
/// coordinates are mapped back to 1 − q.
pub fn ppde_flip_heavy(
    x: &BinaryMatrix,
    rho: f64,
    alpha: f64,
    beta: f64,
    sizing: BlockSizing,
    noise: &mut NoiseSource,
) -> Result<PpdeEstimate> {
    check_param(rho > 0.0, || format!("rho must be > 0, got {rho}"))?;
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rho_vote = rho / 10.0;
    let rho_main = rho - rho_vote;
    let means = DVector::from_vec(x.column_means());
    let sens = (x.dim() as f64).sqrt() / x.len() as f64;
    let vote = gaussian_mechanism_vector(&means, sens, rho_vote, &mut noise.child(0))?;
    let flip: Vec<bool> = vote.iter().map(|&v| v > 0.5).collect();
    let mut est = ppde(&x.flip_columns(&flip), rho_main, alpha, beta, sizing, &mut noise.child(1))?;
    for (p, &f) in est.model.p.iter_mut().zip(&flip) {
        if f {
            *p = 1.0 - *p;
        }
    }
    est.flipped = flip;
    est.budget_spent = PrivacyBudget::Zcdp { rho: rho_vote + rho_main };
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::cell::RefCell;

    /// Returns population means, ignoring data; records which rows are read.
    struct Population {
        p: Vec<f64>,
        n: usize,
        reads: RefCell<Vec<Range<usize>>>,
    }

    impl ProductSamples for Population {
        fn dim(&self) -> usize {
            self.p.len()
        }
        fn len(&self) -> usize {
            self.n
        }
        fn truncated_mean(&self, rows: Range<usize>, coords: &[usize], _b: f64) -> Vec<f64> {
            self.reads.borrow_mut().push(rows);
            coords.iter().map(|&j| self.p[j]).collect()
        }
    }

    #[test]
    fn trunc_examples() {
        assert_eq!(trunc(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        assert_eq!(trunc(&[1.0; 4], 1.0), vec![0.5; 4]);
    }

    proptest! {
        #[test]
        fn trunc_idempotent_and_direction_preserving(
            x in proptest::collection::vec(-10.0f64..10.0, 1..8), b in 0.0f64..5.0
        ) {
            let t = trunc(&x, b);
            let tt = trunc(&t, b);
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm <= b * (1.0 + 1e-12) || t == x);
            for (a, c) in t.iter().zip(&tt) {
                prop_assert!((a - c).abs() <= 1e-12 * (1.0 + a.abs()));
            }
            for (a, c) in x.iter().zip(&t) {
                prop_assert!(a * c >= 0.0);
            }
        }

        #[test]
        fn binary_tmean_matches_dense(bits in proptest::collection::vec(0u8..2, 24), b in 0.5f64..3.0) {
            let rows: Vec<Vec<u8>> = bits.chunks(4).map(|c| c.to_vec()).collect();
            let bm = BinaryMatrix::from_rows(&rows).unwrap();
            let dense = tmean(&bm.to_matrix(), b).unwrap();
            let fast = bm.truncated_mean(0..6, &[0, 1, 2, 3], b);
            for (a, c) in dense.iter().zip(&fast) {
                prop_assert!((a - c).abs() < 1e-12);
            }
        }

        #[test]
        fn output_always_in_unit_cube(seed in 0u64..1000, rho in 0.001f64..1.0) {
            let p = ProductModel::new(vec![0.4, 0.1, 0.02, 0.3, 0.0]).unwrap();
            let x = p.sample(200, &mut NoiseSource::seeded(seed));
            let e = ppde(&x, rho, 0.5, 0.1, BlockSizing::Fixed(50), &mut NoiseSource::seeded(seed)).unwrap();
            prop_assert!(e.model.p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn tmean_plain_mean_and_zero_row() {
        let x = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.0]);
        assert_eq!(tmean(&x, 10.0).unwrap(), DVector::from_vec(vec![0.2, 0.1]));
        assert_eq!(tmean(&DMatrix::zeros(1, 3), 1.0).unwrap(), DVector::zeros(3));
        assert!(matches!(tmean(&DMatrix::zeros(0, 3), 1.0), Err(Error::EmptyInput)));
    }

    #[test]
    fn tmean_adversarial_pairs() {
        // Opposite rows at norm B: change 2B/m. Nonnegative rows: at most √2·B/m.
        let (m, b) = (5usize, 1.5);
        let base = DMatrix::from_fn(m, 3, |i, j| ((i + j) % 2) as f64 * 0.3);
        let mut x1 = base.clone();
        let mut x2 = base.clone();
        x1.set_row(0, &nalgebra::RowDVector::from_vec(vec![b, 0.0, 0.0]));
        x2.set_row(0, &nalgebra::RowDVector::from_vec(vec![-b, 0.0, 0.0]));
        let diff = (tmean(&x1, b).unwrap() - tmean(&x2, b).unwrap()).norm();
        assert!((diff - 2.0 * b / m as f64).abs() < 1e-12);
        x2.set_row(0, &nalgebra::RowDVector::from_vec(vec![0.0, b, 0.0]));
        let diff = (tmean(&x1, b).unwrap() - tmean(&x2, b).unwrap()).norm();
        assert!((diff - 2f64.sqrt() * b / m as f64).abs() < 1e-12);
    }

    #[test]
    fn threshold_logic_with_population_means() {
        let pop = Population { p: vec![0.4, 0.01], n: 1000, reads: RefCell::new(Vec::new()) };
        let e = ppde(&pop, 1.0, 0.1, 0.1, BlockSizing::Fixed(100), &mut NoiseSource::zero_noise_oracle()).unwrap();
        let r1 = &e.rounds[0];
        assert_eq!(r1.tau, 3.0 / 16.0);
        assert_eq!(r1.frozen, vec![0]);
        assert_eq!(e.model.p[0], 0.4);
        // u₂·|S₂| = 1/4 < 1: straight to the final round.
        assert!(e.rounds[1].last);
        assert_eq!(e.rounds[1].active, vec![1]);
        assert_eq!(e.model.p[1], 0.01);
    }

    #[test]
    fn all_zero_data_gives_zero() {
        let x = BinaryMatrix::zeros(400, 12);
        let e = ppde(&x, 1.0, 0.1, 0.1, BlockSizing::Fixed(100), &mut NoiseSource::zero_noise_oracle()).unwrap();
        assert_eq!(e.model.p, vec![0.0; 12]);
        assert_eq!(e.rounds.len(), 4);
    }

    #[test]
    fn rows_read_once_and_rounds_halve() {
        for d in [2usize, 3, 7, 8, 33, 64] {
            let p: Vec<f64> = (0..d).map(|j| 0.5 / (1 + j) as f64).collect();
            let pop = Population { p, n: 100 * (partition_rounds(d) + 1), reads: RefCell::new(Vec::new()) };
            let e = ppde(&pop, 1.0, 0.1, 0.1, BlockSizing::Fixed(100), &mut NoiseSource::seeded(d as u64)).unwrap();
            let reads = pop.reads.borrow();
            let mut seen = vec![0u8; pop.n];
            for r in reads.iter() {
                for i in r.clone() {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c <= 1));
            assert!(e.rounds.len() <= e.blocks);
            for w in e.rounds.windows(2) {
                assert_eq!(w[1].u, w[0].u / 2.0);
                assert_eq!(w[1].tau, w[0].tau / 2.0);
                assert_eq!(w[0].tau, 0.75 * w[1].u);
                assert!(w[1].active.iter().all(|j| w[0].active.contains(j)));
            }
        }
    }

    #[test]
    fn frozen_coordinates_have_small_chi2() {
        // Population means, zero noise: frozen q equals p, so the certified
        // inequality 4(p−q)²/q ≤ α²/d holds with slack.
        let d = 16;
        let alpha = 0.2;
        let p: Vec<f64> = (0..d).map(|j| 0.45 / (1 + j) as f64).collect();
        let pop = Population { p: p.clone(), n: 500, reads: RefCell::new(Vec::new()) };
        let e = ppde(&pop, 1.0, alpha, 0.1, BlockSizing::Fixed(100), &mut NoiseSource::zero_noise_oracle()).unwrap();
        for r in &e.rounds {
            for &j in &r.frozen {
                let q = e.model.p[j];
                assert!(q == 0.0 || 4.0 * (p[j] - q).powi(2) / q <= alpha * alpha / d as f64);
            }
        }
    }

    #[test]
    fn insufficient_samples_reports_requirement() {
        let x = BinaryMatrix::zeros(10, 4);
        match ppde(&x, 1.0, 0.1, 0.1, BlockSizing::Fixed(5), &mut NoiseSource::seeded(0)) {
            Err(Error::InsufficientSamples { required, available, block_size, blocks }) => {
                assert_eq!((required, available, block_size, blocks), (15, 10, 5, 3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn block_size_formula() {
        let m = block_size(12, 1.0, 0.15, 0.1, BlockSizing::Formula { constant: 1.0 }).unwrap();
        let c = (12.0f64 / (0.15 * 0.1 * 2f64.sqrt())).ln().powf(1.25);
        let c2 = (12.0f64 * 3.0 / 0.1).ln().powi(3);
        let expect = c2 * 12.0 / 0.0225 + c * 12.0 / (0.15 * 2f64.sqrt());
        assert_eq!(m, expect.ceil() as usize);
        assert_eq!(partition_rounds(12), 3);
        assert_eq!(partition_rounds(16), 4);
    }

    #[test]
    fn flip_heavy_handles_dense_coordinates() {
        let p = ProductModel::new(vec![0.9, 0.1, 0.7, 0.3]).unwrap();
        let x = p.sample(40_000, &mut NoiseSource::seeded(1));
        let e = ppde_flip_heavy(&x, 1.0, 0.2, 0.1, BlockSizing::Fixed(10_000), &mut NoiseSource::seeded(2)).unwrap();
        assert_eq!(e.flipped, vec![true, false, true, false]);
        for (a, b) in e.model.p.iter().zip(&p.p) {
            assert!((a - b).abs() < 0.03, "{a} vs {b}");
        }
        assert!((e.budget_spent.rho().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let x = ProductModel::new(vec![0.5; 5]).unwrap().sample(20, &mut NoiseSource::seeded(3));
        let mut buf = Vec::new();
        x.write_csv(&mut buf).unwrap();
        assert_eq!(BinaryMatrix::read_csv(buf.as_slice()).unwrap(), x);
        assert!(BinaryMatrix::read_csv("0,2\n".as_bytes()).is_err());
    }
}
