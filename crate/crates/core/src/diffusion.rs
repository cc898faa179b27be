//! Discrete diffusion on a weighted graph.
//!
//! The Dirichlet energy `E = C/2 · Σ_{i<j} w_ij ‖x_i − x_j‖²` has gradient
//! `C·Σ_j w_ij (x_i − x_j)`; an explicit Euler step of size δt with row sums
//! equal to one gives `x_i ← (1 − s)·x_i + s·Σ_j w_ij x_j` with `s = δt·C`.
//! At `s = 1` this is exactly the message-passing step.

use std::io::Write;

use crate::error::{DmpsError, Result};
use crate::tensor::Tensor;

const STOCHASTIC_TOL: f64 = 1e-9;

/// Undirected graph with symmetric nonnegative edge weights and energy
/// constant `C`. Each unordered edge is counted once.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph {
    weights: Tensor,
    constant: f64,
}

impl WeightedGraph {
    pub fn new(weights: Tensor, constant: f64) -> Result<Self> {
        let n = weights.rows();
        if weights.cols() != n {
            return Err(DmpsError::Dimension {
                op: "weighted_graph",
                left: weights.shape(),
                right: (n, n),
            });
        }
        if !(constant > 0.0) {
            return Err(DmpsError::config(format!("energy constant must be positive, got {constant}")));
        }
        for i in 0..n {
            for j in 0..n {
                let w = weights[(i, j)];
                if w < 0.0 || !w.is_finite() {
                    return Err(DmpsError::config(format!("edge weight ({i}, {j}) = {w} is not a nonnegative number")));
                }
                if (w - weights[(j, i)]).abs() > 1e-12 {
                    return Err(DmpsError::config(format!("edge weights are not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { weights, constant })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows() == 0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dirichlet_energy(x: &Tensor, graph: &WeightedGraph) -> Result<f64> {
    let n = graph.len();
    if x.rows() != n {
        return Err(DmpsError::Dimension {
            op: "dirichlet_energy",
            left: x.shape(),
            right: graph.weights.shape(),
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let w = graph.weights[(i, j)];
            if w != 0.0 {
                total += w * sq_dist(x.row(i), x.row(j));
            }
        }
    }
    Ok(0.5 * graph.constant * total)
}

fn check_row_stochastic(w: &Tensor, op: &'static str) -> Result<()> {
    if w.rows() != w.cols() {
        return Err(DmpsError::Dimension {
            op,
            left: w.shape(),
            right: (w.rows(), w.rows()),
        });
    }
    for i in 0..w.rows() {
        let row = w.row(i);
        if row.iter().any(|&v| v < 0.0) {
            return Err(DmpsError::contract(format!("{op}: row {i} has a negative weight")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(DmpsError::contract(format!("{op}: row {i} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// One explicit Euler step `X' = (1 − s)X + s·W·X` with `s ∈ (0, 1]`.
pub fn diffusion_step(x: &Tensor, w: &Tensor, step_size: f64) -> Result<Tensor> {
    if !(step_size > 0.0 && step_size <= 1.0) {
        return Err(DmpsError::config(format!("step size must lie in (0, 1], got {step_size}")));
    }
    check_row_stochastic(w, "diffusion_step")?;
    let wx = w.matmul(x)?;
    x.zip_map(&wx, "diffusion_step", |a, b| (1.0 - step_size) * a + step_size * b)
}

/// Largest spread of any coordinate across the rows of `x`.
pub fn oscillation_index(x: &Tensor) -> Result<f64> {
    if x.rows() == 0 {
        return Err(DmpsError::EmptySet);
    }
    let mut worst = 0.0_f64;
    for j in 0..x.cols() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..x.rows() {
            lo = lo.min(x[(i, j)]);
            hi = hi.max(x[(i, j)]);
        }
        worst = worst.max(hi - lo);
    }
    Ok(worst)
}

fn max_pairwise_distance(x: &Tensor) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..x.rows() {
        for j in (i + 1)..x.rows() {
            worst = worst.max(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    worst
}

/// `w = (W + Wᵀ)/2` with the diagonal zeroed and `C = 1`.
pub fn symmetrize_for_energy_test(w: &Tensor) -> Result<WeightedGraph> {
    check_row_stochastic(w, "symmetrize_for_energy_test")?;
    let n = w.rows();
    let sym = Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.5 * (w[(i, j)] + w[(j, i)]) });
    WeightedGraph::new(sym, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrace {
    pub states: Vec<Tensor>,
    /// Dirichlet energy of each state on the symmetrized graph of `W`.
    pub energies: Vec<f64>,
    pub oscillations: Vec<f64>,
    pub step_size: f64,
    pub converged: bool,
}

impl DiffusionTrace {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &Tensor {
        self.states.last().expect("trace holds the initial state")
    }

    /// `step,energy,oscillation` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,energy,oscillation")?;
        for (t, (e, o)) in self.energies.iter().zip(&self.oscillations).enumerate() {
            writeln!(out, "{t},{e:.17e},{o:.17e}")?;
        }
        Ok(())
    }
}

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_STEPS: usize = 10_000;

/// Iterates [`diffusion_step`] until every pair of rows is within `tol` of
/// each other or `max_steps` is reached. Non-convergence is reported through
/// `converged`, not as an error.
pub fn simulate_to_steady_state(
    x0: &Tensor,
    w: &Tensor,
    step_size: f64,
    tol: f64,
    max_steps: usize,
) -> Result<DiffusionTrace> {
    if x0.rows() == 0 {
        return Err(DmpsError::EmptySet);
    }
    if x0.rows() != w.rows() {
        return Err(DmpsError::Dimension {
            op: "simulate_to_steady_state",
            left: w.shape(),
            right: x0.shape(),
        });
    }
    let graph = symmetrize_for_energy_test(w)?;
    let mut trace = DiffusionTrace {
        states: vec![x0.clone()],
        energies: vec![dirichlet_energy(x0, &graph)?],
        oscillations: vec![oscillation_index(x0)?],
        step_size,
        converged: max_pairwise_distance(x0) < tol,
    };
    let mut x = x0.clone();
    while !trace.converged && trace.steps() < max_steps {
        x = diffusion_step(&x, w, step_size)?;
        trace.energies.push(dirichlet_energy(&x, &graph)?);
        trace.oscillations.push(oscillation_index(&x)?);
        trace.converged = max_pairwise_distance(&x) < tol;
        trace.states.push(x.clone());
    }
    Ok(trace)
}
