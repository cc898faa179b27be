//! Synthetic set-valued tasks.
//!
//! * Gaussian sets: the five coordinates of one draw from `N(0, I)` or
//!   `N(0, Σ(ρ))` form a set of five scalars; `Σ(ρ)` is the identity except
//!   for a correlation ρ between coordinates 2 and 4 (1-based). Label 1 marks
//!   the correlated distribution.
//! * Cluster counting: 6 to 10 noisy 2-D points drawn around `c` distinct
//!   centers; the label is `c`.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::tape::ln_factorial;
use crate::error::{DmpsError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Gaussian,
    Counting,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Gaussian => "gaussian",
            Task::Counting => "counting",
        })
    }
}

/// One input set (rows are elements) with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct SetExample {
    pub elements: Tensor,
    pub label: u32,
}

pub type SetBatch = Vec<SetExample>;

pub const GAUSSIAN_DIM: usize = 5;
/// Correlated coordinate pair, 1-based.
pub const CORRELATED_PAIR: (usize, usize) = (2, 4);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTaskSpec {
    pub rho: f64,
    pub batch_size: usize,
}

impl Default for GaussianTaskSpec {
    fn default() -> Self {
        Self {
            rho: 0.95,
            batch_size: 128,
        }
    }
}

/// `Σ(ρ)`: 5x5 identity with `Σ₂₄ = Σ₄₂ = ρ`.
pub fn build_covariance(rho: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rho) {
        return Err(DmpsError::config(format!("rho must lie in [0, 1), got {rho}")));
    }
    let mut sigma = Tensor::identity(GAUSSIAN_DIM);
    let (a, b) = (CORRELATED_PAIR.0 - 1, CORRELATED_PAIR.1 - 1);
    sigma[(a, b)] = rho;
    sigma[(b, a)] = rho;
    Ok(sigma)
}

/// Lower Cholesky factor; fails unless `m` is symmetric positive definite.
pub fn cholesky(m: &Tensor) -> Result<Tensor> {
    let n = m.rows();
    if m.cols() != n {
        return Err(DmpsError::Dimension {
            op: "cholesky",
            left: m.shape(),
            right: (n, n),
        });
    }
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(DmpsError::config("matrix is not positive definite"));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Draws `x = L·z`, `z ~ N(0, I)`, and returns its coordinates as an `n x 1`
/// set of scalars.
pub fn sample_gaussian_set<R: Rng + ?Sized>(chol: &Tensor, rng: &mut R) -> Tensor {
    let n = chol.rows();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_fn(n, 1, |i, _| (0..=i).map(|k| chol[(i, k)] * z[k]).sum())
}

/// Sampler holding both Cholesky factors.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    identity: Tensor,
    correlated: Tensor,
}

impl GaussianSampler {
    pub fn new(rho: f64) -> Result<Self> {
        Ok(Self {
            identity: Tensor::identity(GAUSSIAN_DIM),
            correlated: cholesky(&build_covariance(rho)?)?,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, label: u32, rng: &mut R) -> SetExample {
        let chol = if label == 1 { &self.correlated } else { &self.identity };
        SetExample {
            elements: sample_gaussian_set(chol, rng),
            label,
        }
    }

    /// Balanced batch: the first half from `N(0, I)`, the rest from `N(0, Σ)`.
    pub fn batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> SetBatch {
        let half = size / 2;
        (0..size)
            .map(|i| self.sample(u32::from(i >= half), rng))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountingTaskSpec {
    pub min_size: usize,
    pub max_size: usize,
    pub dim: usize,
    /// Centers are uniform in `[−center_range, center_range]^dim`.
    pub center_range: f64,
    pub noise: f64,
    pub min_separation: f64,
    pub batch_size: usize,
}

impl Default for CountingTaskSpec {
    fn default() -> Self {
        Self {
            min_size: 6,
            max_size: 10,
            dim: 2,
            center_range: 1.0,
            noise: 0.1,
            min_separation: 0.5,
            batch_size: 32,
        }
    }
}

impl CountingTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(DmpsError::config(format!(
                "invalid set-size range [{}, {}]",
                self.min_size, self.max_size
            )));
        }
        if self.dim == 0 || !(self.center_range > 0.0) || self.noise < 0.0 || self.min_separation < 0.0 {
            return Err(DmpsError::config("invalid counting-task geometry"));
        }
        Ok(())
    }

    /// `P(c)` under `n ~ U{min..max}`, `c ~ U{1..n}`.
    pub fn label_marginal(&self, c: usize) -> f64 {
        let sizes = (self.max_size - self.min_size + 1) as f64;
        (self.min_size.max(c)..=self.max_size)
            .map(|n| 1.0 / sizes / n as f64)
            .sum()
    }
}

fn sample_centers<R: Rng + ?Sized>(spec: &CountingTaskSpec, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    const TRIES: usize = 1_000;
    let min_sq = spec.min_separation * spec.min_separation;
    'restart: loop {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
        while centers.len() < count {
            let mut placed = false;
            for _ in 0..TRIES {
                let c: Vec<f64> = (0..spec.dim)
                    .map(|_| rng.random_range(-spec.center_range..=spec.center_range))
                    .collect();
                let clear = centers
                    .iter()
                    .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= min_sq);
                if clear {
                    centers.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return centers;
    }
}

/// Draws `(set, c)`: `n ~ U{min..max}`, `c ~ U{1..n}`, `c` separated centers,
/// one element per center plus `n − c` elements assigned uniformly, each
/// perturbed by isotropic Gaussian noise. Element order is shuffled.
pub fn sample_counting_set<R: Rng + ?Sized>(spec: &CountingTaskSpec, rng: &mut R) -> SetExample {
    let n = rng.random_range(spec.min_size..=spec.max_size);
    let c = rng.random_range(1..=n);
    let centers = sample_centers(spec, c, rng);
    let mut assignment: Vec<usize> = (0..c).collect();
    assignment.extend((c..n).map(|_| rng.random_range(0..c)));
    assignment.shuffle(rng);
    let mut elements = Tensor::zeros(n, spec.dim);
    for (i, &k) in assignment.iter().enumerate() {
        for j in 0..spec.dim {
            let noise: f64 = rng.sample(StandardNormal);
            elements[(i, j)] = centers[k][j] + spec.noise * noise;
        }
    }
    SetExample {
        elements,
        label: c as u32,
    }
}

pub fn counting_batch<R: Rng + ?Sized>(spec: &CountingTaskSpec, size: usize, rng: &mut R) -> SetBatch {
    (0..size).map(|_| sample_counting_set(spec, rng)).collect()
}

/// `−log p(x | λ) = λ − x·ln λ + ln x!`.
pub fn poisson_nll(rate: f64, count: i64) -> Result<f64> {
    if count < 0 {
        return Err(DmpsError::contract(format!("Poisson count must be nonnegative, got {count}")));
    }
    if !(rate > 0.0) {
        return Err(DmpsError::contract(format!("Poisson rate must be positive, got {rate}")));
    }
    let x = count as f64;
    Ok(rate - x * rate.ln() + ln_factorial(count as u64))
}

/// Mode of `Poisson(λ)`: `⌈λ⌉ − 1`, which is `⌊λ⌋` for non-integer λ.
pub fn poisson_mode(rate: f64) -> u64 {
    (rate.ceil() - 1.0).max(0.0) as u64
}

/// Count decision used for accuracy: λ rounded to the nearest integer.
pub fn count_decision(rate: f64) -> u64 {
    rate.round().max(0.0) as u64
}

/// `−[y ln p + (1 − y) ln(1 − p)]`.
pub fn binary_ce(p: f64, y: u32) -> f64 {
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task: Task,
    pub label: u32,
    pub elements: Vec<Vec<f64>>,
}

impl DatasetRecord {
    pub fn from_example(task: Task, example: &SetExample) -> Self {
        Self {
            task,
            label: example.label,
            elements: (0..example.elements.rows())
                .map(|i| example.elements.row(i).to_vec())
                .collect(),
        }
    }

    pub fn to_example(&self) -> Result<SetExample> {
        let n = self.elements.len();
        let p = self.elements.first().map_or(0, Vec::len);
        if self.elements.iter().any(|r| r.len() != p) {
            return Err(DmpsError::config("ragged element rows in dataset record"));
        }
        Ok(SetExample {
            elements: Tensor::from_vec(n, p, self.elements.concat())?,
            label: self.label,
        })
    }
}

/// One JSON object per line.
pub fn write_ndjson<W: Write>(mut out: W, task: Task, sets: &[SetExample]) -> Result<()> {
    for s in sets {
        serde_json::to_writer(&mut out, &DatasetRecord::from_example(task, s))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn covariance_examples() {
        assert_eq!(build_covariance(0.0).unwrap(), Tensor::identity(5));
        let s = build_covariance(0.95).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expected = match (i, j) {
                    (1, 3) | (3, 1) => 0.95,
                    _ if i == j => 1.0,
                    _ => 0.0,
                };
                assert_eq!(s[(i, j)], expected);
            }
        }
        assert!(build_covariance(1.0).is_err());
        assert!(build_covariance(-0.1).is_err());
    }

    #[test]
    fn cholesky_reconstructs() {
        let s = build_covariance(0.5).unwrap();
        let l = cholesky(&s).unwrap();
        let back = l.matmul_nt(&l).unwrap();
        assert!(back.sub(&s).unwrap().max_abs() < 1e-14);
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn cholesky_fails_at_boundary() {
        let mut s = Tensor::identity(5);
        s[(1, 3)] = 1.0;
        s[(3, 1)] = 1.0;
        assert!(matches!(cholesky(&s), Err(DmpsError::Config(_))));
    }

    #[test]
    fn poisson_examples() {
        assert!((poisson_nll(1.0, 0).unwrap() - 1.0).abs() < 1e-15);
        assert!((poisson_nll(1.0, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!(poisson_nll(1.0, -1).is_err());
        let (x, lam, h) = (3, 2.2, 1e-6);
        let d = (poisson_nll(lam + h, x).unwrap() - poisson_nll(lam - h, x).unwrap()) / (2.0 * h);
        assert!((d - (1.0 - 3.0 / lam)).abs() < 1e-8);
        let d = (poisson_nll(3.0 + h, 3).unwrap() - poisson_nll(3.0 - h, 3).unwrap()) / (2.0 * h);
        assert!(d.abs() < 1e-8);
    }

    #[test]
    fn poisson_mode_and_decision() {
        assert_eq!(poisson_mode(3.7), 3);
        assert_eq!(poisson_mode(0.4), 0);
        assert_eq!(poisson_mode(4.0), 3);
        assert_eq!(count_decision(3.7), 4);
        assert_eq!(count_decision(3.2), 3);
    }

    #[test]
    fn bce_examples() {
        assert!((binary_ce(0.5, 0) - 2f64.ln()).abs() < 1e-15);
        assert!((binary_ce(0.5, 1) - 2f64.ln()).abs() < 1e-15);
        assert!(binary_ce(1.0 - 1e-12, 1) < 1e-11);
        assert!((binary_ce(0.9, 0) - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn counting_edge_cases() {
        let spec = CountingTaskSpec::default();
        let mut rng = stream_rng(1, 0, 0);
        let mut seen_full = false;
        let mut seen_single = false;
        for _ in 0..2_000 {
            let s = sample_counting_set(&spec, &mut rng);
            let n = s.elements.rows();
            let c = s.label as usize;
            assert!(1 <= c && c <= n && (6..=10).contains(&n));
            if c == n {
                seen_full = true;
                // One element per well-separated center: all pairwise gaps are large.
                for i in 0..n {
                    for j in (i + 1)..n {
                        let d: f64 = s.elements.row(i).iter().zip(s.elements.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                        assert!(d.sqrt() > 0.5 - 8.0 * 0.1);
                    }
                }
            }
            if c == 1 {
                seen_single = true;
                let mean = s.elements.sum_rows().scale(1.0 / n as f64);
                for i in 0..n {
                    let d: f64 = s.elements.row(i).iter().zip(mean.data()).map(|(a, b)| (a - b).powi(2)).sum();
                    assert!(d.sqrt() < 1.0);
                }
            }
        }
        assert!(seen_full && seen_single);
    }

    #[test]
    fn label_marginal_sums_to_one() {
        let spec = CountingTaskSpec::default();
        let total: f64 = (1..=10).map(|c| spec.label_marginal(c)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((spec.label_marginal(10) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn dataset_round_trip() {
        let spec = CountingTaskSpec::default();
        let mut rng = stream_rng(2, 0, 0);
        let sets = counting_batch(&spec, 5, &mut rng);
        let mut buf = Vec::new();
        write_ndjson(&mut buf, Task::Counting, &sets).unwrap();
        let back: Vec<SetExample> = read_ndjson(&buf[..])
            .unwrap()
            .iter()
            .map(|r| r.to_example().unwrap())
            .collect();
        assert_eq!(back, sets);
    }

    #[test]
    fn balanced_gaussian_batch() {
        let s = GaussianSampler::new(0.5).unwrap();
        let b = s.batch(128, &mut stream_rng(3, 0, 0));
        assert_eq!(b.iter().filter(|e| e.label == 1).count(), 64);
        assert!(b.iter().all(|e| e.elements.shape() == (5, 1)));
    }
}
