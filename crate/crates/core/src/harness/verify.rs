//! Invariant suite behind `dmps verify`.
//!
//! Every check runs with fixed seeds and reports pass or fail on its own;
//! an error inside one check marks it failed and the suite moves on.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{softmax_rows, Activation, BoundParams, NodeId, OptimizerState, ParamStore, ReduceLrOnPlateau, Tape};
use crate::blocks::{
    gamma_value, message_passing_step, set_denoising_block, set_residual_block, BlockConfig, BlockKind, DmpsModel,
    GammaConfig, GraphMode, HeadConfig, ModelConfig, OutputTransform, PoolMode,
};
use crate::diffusion::{diffusion_step, dirichlet_energy, oscillation_index, simulate_to_steady_state, WeightedGraph};
use crate::error::{DmpsError, Result};
use crate::latent_graph::{KernelConfig, LatentGraphLearner};
use crate::layers::LayerSpec;
use crate::rng::{domain, stream_rng};
use crate::tasks::{build_covariance, cholesky, sample_counting_set, CountingTaskSpec, GaussianSampler, Task};
use crate::tensor::Tensor;

use super::checkpoint;
use super::config::RunConfig;
use super::export::{export_kernel, read_matrix_csv};
use super::train::{evaluate, evaluation_sets, train};
use super::write_metrics;

/// Deliberate defects used to test the suite itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Checks read the raw kernel matrix where the row-normalized weights
    /// belong.
    UnnormalizedWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub passed: bool,
    pub total: usize,
    pub failed: usize,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

struct Ctx {
    fault: Fault,
    scratch: PathBuf,
}

type Verdict = Result<(bool, String)>;
type Check = fn(&Ctx) -> Verdict;

const CHECKS: &[(&str, &str, Check)] = &[
    ("autodiff-core", "gradient-check", op_gradients),
    ("autodiff-core", "softmax-rows-stochastic", softmax_stochastic),
    ("autodiff-core", "matmul-associativity", matmul_associativity),
    ("autodiff-core", "backward-deterministic", backward_deterministic),
    ("autodiff-core", "plateau-learning-rate-non-increasing", plateau_non_increasing),
    ("latent-graph", "conjugation-equivariance", conjugation_equivariance),
    ("latent-graph", "kernel-symmetry", kernel_symmetry),
    ("latent-graph", "weights-row-stochastic", weights_row_stochastic),
    ("latent-graph", "differentiability", latent_graph_gradients),
    ("set-blocks", "block-equivariance", block_equivariance),
    ("set-blocks", "full-model-invariance", full_model_invariance),
    ("set-blocks", "deep-sets-reduction", deep_sets_reduction),
    ("set-blocks", "oscillation-contraction", oscillation_contraction),
    ("set-blocks", "gamma-in-unit-interval", gamma_in_unit_interval),
    ("diffusion-lab", "energy-descent", energy_descent),
    ("diffusion-lab", "oscillation-non-expansion", oscillation_non_expansion),
    ("diffusion-lab", "mass-conservation", mass_conservation),
    ("diffusion-lab", "steady-state-oracle", steady_state_oracle),
    ("synthetic-tasks", "covariance-positive-definite", covariance_positive_definite),
    ("synthetic-tasks", "counting-label-range", counting_label_range),
    ("synthetic-tasks", "generator-determinism", generator_determinism),
    ("cli-harness", "end-to-end-determinism", end_to_end_determinism),
    ("cli-harness", "emitted-ranges", emitted_ranges),
    ("cli-harness", "checkpoint-read-only", checkpoint_read_only),
];

/// Names of every check, in report order.
pub fn check_names() -> Vec<String> {
    CHECKS.iter().map(|(m, n, _)| format!("{m}/{n}")).collect()
}

/// Runs every check. `scratch` receives temporary training artifacts and is
/// removed afterwards.
pub fn run_invariant_suite(fault: Fault, scratch: &Path) -> SuiteReport {
    let ctx = Ctx {
        fault,
        scratch: scratch.to_path_buf(),
    };
    let checks: Vec<CheckResult> = CHECKS
        .iter()
        .map(|(module, name, check)| {
            let (passed, detail) = match check(&ctx) {
                Ok(v) => v,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                module,
                name,
                passed,
                detail,
            }
        })
        .collect();
    let _ = fs::remove_dir_all(scratch);
    let failed = checks.iter().filter(|c| !c.passed).count();
    SuiteReport {
        passed: failed == 0,
        total: checks.len(),
        failed,
        checks,
    }
}

fn rng(index: u64) -> ChaCha8Rng {
    stream_rng(0, domain::VERIFY, index)
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Row-stochastic matrix with entries bounded away from zero.
fn positive_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let raw = Tensor::from_fn(n, n, |_, _| rng.random_range(0.05..1.0));
    normalize_rows(&raw)
}

/// Row-stochastic matrix where roughly half the entries are zero.
fn sparse_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let raw = Tensor::from_fn(n, n, |i, j| {
        if i == j || rng.random_bool(0.5) {
            rng.random_range(0.05..1.0)
        } else {
            0.0
        }
    });
    normalize_rows(&raw)
}

fn normalize_rows(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let s: f64 = m.row(i).iter().sum();
        out.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Symmetric doubly stochastic matrix: a convex mix of `(P + Pᵀ)/2` terms.
fn symmetric_stochastic(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut w = Tensor::zeros(n, n);
    let terms = 4;
    let weights: Vec<f64> = (0..terms).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for a in weights {
        let p = permutation(rng, n);
        for (i, &j) in p.iter().enumerate() {
            w[(i, j)] += 0.5 * a / total;
            w[(j, i)] += 0.5 * a / total;
        }
    }
    w
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.max_abs())
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Ok((ok, detail.into()))
}

/// Reduces a matrix node to a scalar through fixed random weights and a tanh
/// so every entry gets a distinct upstream gradient.
fn scalarize(tape: &mut Tape<'_>, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = tape.constant(weights.clone());
    let y = tape.mul(x, w)?;
    let y = tape.unary(y, Activation::Tanh);
    Ok(tape.sum_all(y))
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    let err = analytic.sub(numeric)?.frobenius_norm();
    Ok(err / analytic.frobenius_norm().max(numeric.frobenius_norm()).max(1e-8))
}

/// Worst norm-wise relative error between backprop and central differences
/// over the tracked inputs of `build`.
fn input_gradcheck(inputs: &[Tensor], build: &dyn Fn(&mut Tape<'_>, &[NodeId]) -> Result<NodeId>) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0_f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
        let mut numeric = Tensor::zeros(input.rows(), input.cols());
        for e in 0..input.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[e] += delta;
                let mut t = Tape::new();
                let ids: Vec<NodeId> = shifted.iter().map(|x| t.constant(x.clone())).collect();
                let l = build(&mut t, &ids)?;
                Ok(t.value(l).item())
            };
            numeric.data_mut()[e] = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric)?);
    }
    Ok(worst)
}

/// Same comparison per parameter group of `params`; returns the worst group.
fn param_gradcheck(
    params: &ParamStore,
    build: &dyn Fn(&mut Tape<'_>, &BoundParams) -> Result<NodeId>,
) -> Result<(f64, String)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    let grads = params.collect_grads(&bound, tape.backward(loss)?);
    let mut worst = (0.0_f64, String::new());
    let mut work = params.clone();
    for slot in 0..params.len() {
        let value = params.value(slot);
        let analytic = grads.get(slot).cloned().unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols()));
        let mut numeric = Tensor::zeros(value.rows(), value.cols());
        for e in 0..value.len() {
            let base = value.data()[e];
            let mut eval = |x: f64| -> Result<f64> {
                work.value_mut(slot).data_mut()[e] = x;
                let mut t = Tape::new();
                let b = work.bind_frozen(&mut t);
                let l = build(&mut t, &b)?;
                Ok(t.value(l).item())
            };
            let plus = eval(base + FD_STEP)?;
            let minus = eval(base - FD_STEP)?;
            numeric.data_mut()[e] = (plus - minus) / (2.0 * FD_STEP);
            work.value_mut(slot).data_mut()[e] = base;
        }
        let err = relative_error(&analytic, &numeric)?;
        if err >= worst.0 {
            worst = (err, params.name(slot).to_string());
        }
    }
    Ok(worst)
}

fn op_gradients(_: &Ctx) -> Verdict {
    let mut r = rng(1);
    let a = randn(&mut r, 4, 3);
    let b = randn(&mut r, 3, 2);
    let c = randn(&mut r, 4, 3);
    let row = randn(&mut r, 1, 3);
    let w43 = randn(&mut r, 4, 3);
    let w44 = randn(&mut r, 4, 4);
    let w42 = randn(&mut r, 4, 2);
    let w13 = randn(&mut r, 1, 3);
    let scalar = Tensor::scalar(0.3);
    let logit = Tensor::scalar(0.7);
    let log_bw = Tensor::scalar(0.2);

    type Build<'b> = Box<dyn Fn(&mut Tape<'_>, &[NodeId]) -> Result<NodeId> + 'b>;
    let mut cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|t, x| {
            let y = t.matmul(x[0], x[1])?;
            scalarize(t, y, &w42)
        })),
        ("add", vec![a.clone(), c.clone()], Box::new(|t, x| {
            let y = t.add(x[0], x[1])?;
            scalarize(t, y, &w43)
        })),
        ("mul", vec![a.clone(), c.clone()], Box::new(|t, x| {
            let y = t.mul(x[0], x[1])?;
            scalarize(t, y, &w43)
        })),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|t, x| {
            let y = t.add_row(x[0], x[1])?;
            scalarize(t, y, &w43)
        })),
        ("scale", vec![a.clone()], Box::new(|t, x| {
            let y = t.scale(x[0], -1.7);
            scalarize(t, y, &w43)
        })),
        ("lerp", vec![a.clone(), c.clone(), scalar.clone()], Box::new(|t, x| {
            let y = t.lerp(x[0], x[1], x[2])?;
            scalarize(t, y, &w43)
        })),
        ("softmax_rows", vec![a.clone()], Box::new(|t, x| {
            let y = t.softmax_rows(x[0]);
            scalarize(t, y, &w43)
        })),
        ("rbf_kernel", vec![a.clone(), log_bw.clone()], Box::new(|t, x| {
            let s = t.unary(x[1], Activation::Exp);
            let y = t.rbf_kernel(x[0], s)?;
            scalarize(t, y, &w44)
        })),
        ("sparsify_rows", vec![w44.clone()], Box::new(|t, x| {
            let s = t.softmax_rows(x[0]);
            let y = t.sparsify_rows(s, 0.02)?;
            scalarize(t, y, &w44)
        })),
        ("sum_rows", vec![a.clone()], Box::new(|t, x| {
            let y = t.sum_rows(x[0])?;
            scalarize(t, y, &w13)
        })),
        ("mean_rows", vec![a.clone()], Box::new(|t, x| {
            let y = t.mean_rows(x[0])?;
            scalarize(t, y, &w13)
        })),
        ("max_rows", vec![a.clone()], Box::new(|t, x| {
            let y = t.max_rows(x[0])?;
            scalarize(t, y, &w13)
        })),
        ("bce_with_logit", vec![logit.clone()], Box::new(|t, x| t.bce_with_logit(x[0], 1.0))),
        ("poisson_nll_log_rate", vec![logit.clone()], Box::new(|t, x| t.poisson_nll_log_rate(x[0], 3))),
    ];
    for act in [Activation::Identity, Activation::Tanh, Activation::Relu, Activation::Sigmoid, Activation::Exp] {
        let w = w43.clone();
        cases.push(("unary", vec![a.clone()], Box::new(move |t, x| {
            let y = t.unary(x[0], act);
            scalarize(t, y, &w)
        })));
    }
    let mut failures = Vec::new();
    let mut worst = 0.0_f64;
    for (name, inputs, build) in &cases {
        let err = input_gradcheck(inputs, build.as_ref())?;
        worst = worst.max(err);
        if !(err < FD_TOL) {
            failures.push(format!("{name}: {err:.2e}"));
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} operations, worst relative error {worst:.2e}", cases.len())
        } else {
            failures.join("; ")
        },
    )
}

fn softmax_stochastic(_: &Ctx) -> Verdict {
    let mut r = rng(2);
    let mut worst = 0.0_f64;
    let mut positive = true;
    for _ in 0..100 {
        let n = r.random_range(1..8);
        let m = randn(&mut r, n, n + 2).scale(10.0);
        let s = softmax_rows(&m);
        for i in 0..s.rows() {
            worst = worst.max((s.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        positive &= s.data().iter().all(|&v| v > 0.0);
    }
    verdict(worst < 1e-9 && positive, format!("max row-sum error {worst:.2e}, all positive: {positive}"))
}

fn matmul_associativity(_: &Ctx) -> Verdict {
    let mut r = rng(3);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let (p, q, s, t) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..7), r.random_range(1..7));
        let a = randn(&mut r, p, q);
        let b = randn(&mut r, q, s);
        let c = randn(&mut r, s, t);
        let left = a.matmul(&b)?.matmul(&c)?;
        let right = a.matmul(&b.matmul(&c)?)?;
        worst = worst.max(left.sub(&right)?.frobenius_norm() / left.frobenius_norm().max(1e-300));
    }
    verdict(worst < 1e-8, format!("worst relative error {worst:.2e}"))
}

fn small_config(kind: BlockKind, pool: PoolMode, graph: GraphMode, activation: Activation) -> ModelConfig {
    ModelConfig {
        input_dim: 3,
        encoder: vec![LayerSpec::new(4, activation)],
        graph,
        kernel: KernelConfig {
            hidden_dim: 5,
            output_dim: 4,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Tanh,
            initial_bandwidth: 1.3,
            threshold: 0.0,
        },
        blocks: BlockConfig {
            kind,
            count: 2,
            activation,
            widths: vec![],
            gamma: GammaConfig {
                value: 0.4,
                learnable: true,
                per_block: false,
            },
        },
        pool,
        head: HeadConfig {
            hidden: vec![LayerSpec::new(3, activation)],
            output_dim: 1,
            output: OutputTransform::Identity,
        },
    }
}

const KINDS: [BlockKind; 3] = [BlockKind::Vanilla, BlockKind::Denoising, BlockKind::Residual];
const POOLS: [PoolMode; 3] = [PoolMode::Sum, PoolMode::Mean, PoolMode::Max];

fn backward_deterministic(_: &Ctx) -> Verdict {
    let mut r = rng(4);
    let config = small_config(BlockKind::Denoising, PoolMode::Mean, GraphMode::Learned, Activation::Tanh);
    let (model, params) = DmpsModel::init(&config, &mut r)?;
    let set = randn(&mut r, 5, 3);
    let run = || -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let nodes = model.forward(&mut tape, &bound, &set)?;
        let grads = params.collect_grads(&bound, tape.backward(nodes.raw)?);
        Ok((0..params.len()).map(|s| grads.get(s).cloned().unwrap_or_else(|| Tensor::zeros(1, 1))).collect())
    };
    let a = run()?;
    let b = run()?;
    let identical = a.iter().zip(&b).all(|(x, y)| {
        x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    verdict(identical, format!("{} gradient tensors compared bitwise", a.len()))
}

fn plateau_non_increasing(_: &Ctx) -> Verdict {
    let mut r = rng(5);
    let params = ParamStore::new();
    let mut state = OptimizerState::new(&params, 1e-3)?;
    let rule = ReduceLrOnPlateau::default();
    let mut last = state.learning_rate();
    let mut ok = true;
    let mut metric = 1.0;
    for _ in 0..200 {
        metric *= r.random_range(0.97..1.04);
        rule.observe(&mut state, metric);
        let lr = state.learning_rate();
        ok &= lr > 0.0 && lr <= last;
        last = lr;
    }
    verdict(ok, format!("final learning rate {last:.3e} after 200 observations"))
}

fn learner_fixture(seed: u64) -> Result<(LatentGraphLearner, ParamStore, ChaCha8Rng)> {
    let mut r = rng(seed);
    let mut params = ParamStore::new();
    let config = KernelConfig {
        hidden_dim: 6,
        output_dim: 5,
        hidden_activation: Activation::Tanh,
        output_activation: Activation::Tanh,
        initial_bandwidth: 0.8,
        threshold: 0.0,
    };
    let learner = LatentGraphLearner::init(&mut params, &mut r, "kernel", 3, &config)?;
    Ok((learner, params, r))
}

fn conjugation_equivariance(_: &Ctx) -> Verdict {
    let (learner, params, mut r) = learner_fixture(6)?;
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n = r.random_range(2..9);
        let x = randn(&mut r, n, 3);
        let p = permutation(&mut r, n);
        let g = learner.build(&x, &params)?;
        let gp = learner.build(&x.permute_rows(&p), &params)?;
        worst = worst
            .max(max_abs_diff(&gp.kernel, &g.kernel.conjugate_by_permutation(&p))?)
            .max(max_abs_diff(&gp.weights, &g.weights.conjugate_by_permutation(&p))?);
    }
    verdict(worst <= 1e-12, format!("max deviation {worst:.2e} over 100 sets"))
}

fn kernel_symmetry(_: &Ctx) -> Verdict {
    let (learner, params, mut r) = learner_fixture(7)?;
    let mut asym = 0.0_f64;
    let mut in_range = true;
    let mut diag = 0.0_f64;
    for _ in 0..100 {
        let n = r.random_range(1..9);
        let k = learner.build(&randn(&mut r, n, 3), &params)?.kernel;
        asym = asym.max(max_abs_diff(&k, &k.transpose())?);
        in_range &= k.data().iter().all(|&v| v > 0.0 && v <= 1.0);
        diag = diag.max((0..n).map(|i| (k[(i, i)] - 1.0).abs()).fold(0.0, f64::max));
    }
    verdict(
        asym < 1e-12 && in_range && diag == 0.0,
        format!("max |K - K^T| {asym:.2e}, entries in (0, 1]: {in_range}, max |diag - 1| {diag:.2e}"),
    )
}

fn weights_row_stochastic(ctx: &Ctx) -> Verdict {
    let (learner, params, mut r) = learner_fixture(8)?;
    let mut worst = 0.0_f64;
    let mut nonneg = true;
    for _ in 0..100 {
        let n = r.random_range(1..9);
        let g = learner.build(&randn(&mut r, n, 3), &params)?;
        let w = match ctx.fault {
            Fault::None => g.weights,
            Fault::UnnormalizedWeights => g.kernel,
        };
        for i in 0..n {
            worst = worst.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        nonneg &= w.data().iter().all(|&v| v >= 0.0);
    }
    verdict(worst < 1e-9 && nonneg, format!("max row-sum error {worst:.2e}, nonnegative: {nonneg}"))
}

fn latent_graph_gradients(_: &Ctx) -> Verdict {
    let (learner, params, mut r) = learner_fixture(9)?;
    let x = randn(&mut r, 5, 3);
    let weights = randn(&mut r, 5, 5);
    let (err, group) = param_gradcheck(&params, &|t, b| {
        let xn = t.constant(x.clone());
        let g = learner.build_on_tape(t, b, xn)?;
        scalarize(t, g.weights, &weights)
    })?;
    verdict(err < FD_TOL, format!("worst relative error {err:.2e} ({group})"))
}

fn apply_block(kind: BlockKind, w: &Tensor, x: &Tensor, h: &Tensor, gamma: f64) -> Result<Tensor> {
    let tau = Activation::Tanh;
    match kind {
        BlockKind::Vanilla => Ok(message_passing_step(w, x)?.matmul(h)?.map(|v| tau.apply(v))),
        BlockKind::Denoising => set_denoising_block(w, x, gamma, h, tau),
        BlockKind::Residual => set_residual_block(w, x, h, tau),
    }
}

fn block_equivariance(_: &Ctx) -> Verdict {
    let mut r = rng(10);
    let mut worst = 0.0_f64;
    for kind in KINDS {
        for _ in 0..100 {
            let n = r.random_range(1..9);
            let d = r.random_range(1..5);
            let x = randn(&mut r, n, d);
            let w = positive_stochastic(&mut r, n);
            let h = randn(&mut r, d, d);
            let gamma = r.random_range(0.05..0.95);
            let p = permutation(&mut r, n);
            let lhs = apply_block(kind, &w.conjugate_by_permutation(&p), &x.permute_rows(&p), &h, gamma)?;
            let rhs = apply_block(kind, &w, &x, &h, gamma)?.permute_rows(&p);
            worst = worst.max(max_abs_diff(&lhs, &rhs)?);
        }
    }
    verdict(worst <= 1e-12, format!("max deviation {worst:.2e} over 300 instances"))
}

fn full_model_invariance(_: &Ctx) -> Verdict {
    let mut r = rng(11);
    let mut worst = 0.0_f64;
    for pool in POOLS {
        for kind in KINDS {
            let config = small_config(kind, pool, GraphMode::Learned, Activation::Tanh);
            let (model, params) = DmpsModel::init(&config, &mut r)?;
            for _ in 0..34 {
                let n = r.random_range(1..9);
                let x = randn(&mut r, n, 3);
                let p = permutation(&mut r, n);
                let f = model.predict(&params, &x)?.output.item();
                let fp = model.predict(&params, &x.permute_rows(&p))?.output.item();
                worst = worst.max((fp - f).abs() / (f.abs() + 1e-12));
            }
        }
    }
    verdict(worst < 1e-6, format!("max relative deviation {worst:.2e} over 306 (set, permutation) pairs"))
}

/// Plain-loop dense layer: `act(x·W + b)` row by row.
fn dense_reference(x: &[f64], weight: &Tensor, bias: &Tensor, act: Activation) -> Vec<f64> {
    (0..weight.cols())
        .map(|j| {
            let z: f64 = x.iter().enumerate().map(|(k, v)| v * weight[(k, j)]).sum::<f64>() + bias[(0, j)];
            act.apply(z)
        })
        .collect()
}

/// Independent per-element network followed by pooling and the head, read
/// straight from parameter names.
pub(crate) fn deep_sets_reference(config: &ModelConfig, params: &ParamStore, set: &Tensor) -> Vec<f64> {
    let get = |name: String| params.get(&name).expect("parameter present");
    let per_element: Vec<Vec<f64>> = (0..set.rows())
        .map(|i| {
            let mut h = set.row(i).to_vec();
            for (l, spec) in config.encoder.iter().enumerate() {
                h = dense_reference(&h, get(format!("encoder.{l}.weight")), get(format!("encoder.{l}.bias")), spec.activation);
            }
            for t in 0..config.blocks.count {
                let out = dense_reference(&h, get(format!("block.{t}.weight")), get(format!("block.{t}.bias")), config.blocks.activation);
                h = match config.blocks.kind {
                    BlockKind::Residual => h.iter().zip(&out).map(|(a, b)| a + b).collect(),
                    _ => out,
                };
            }
            h
        })
        .collect();
    let d = per_element[0].len();
    let n = per_element.len() as f64;
    let mut pooled: Vec<f64> = (0..d)
        .map(|j| {
            let col = per_element.iter().map(|h| h[j]);
            match config.pool {
                PoolMode::Sum => col.sum(),
                PoolMode::Mean => col.sum::<f64>() / n,
                PoolMode::Max => col.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let mut layer = 0;
    for spec in &config.head.hidden {
        pooled = dense_reference(&pooled, get(format!("head.{layer}.weight")), get(format!("head.{layer}.bias")), spec.activation);
        layer += 1;
    }
    let out = dense_reference(&pooled, get(format!("head.{layer}.weight")), get(format!("head.{layer}.bias")), Activation::Identity);
    out.into_iter()
        .map(|v| match config.head.output {
            OutputTransform::Identity => v,
            OutputTransform::Sigmoid => Activation::Sigmoid.apply(v),
            OutputTransform::Exp => v.exp(),
        })
        .collect()
}

fn deep_sets_reduction(_: &Ctx) -> Verdict {
    let mut r = rng(12);
    let mut worst = 0.0_f64;
    for kind in KINDS {
        for pool in POOLS {
            let config = small_config(kind, pool, GraphMode::Identity, Activation::Tanh);
            let (model, params) = DmpsModel::init(&config, &mut r)?;
            for _ in 0..6 {
                let n = r.random_range(1..9);
                let x = randn(&mut r, n, 3);
                let got = model.predict(&params, &x)?.output;
                let want = deep_sets_reference(&config, &params, &x);
                for (a, b) in got.data().iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    verdict(worst < 1e-10, format!("max deviation {worst:.2e} over 54 sets"))
}

fn coordinate_ranges(x: &Tensor) -> Vec<f64> {
    (0..x.cols())
        .map(|j| {
            let col = (0..x.rows()).map(|i| x[(i, j)]);
            col.clone().fold(f64::NEG_INFINITY, f64::max) - col.fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn oscillation_contraction(_: &Ctx) -> Verdict {
    let mut r = rng(13);
    let mut ok = true;
    for k in 0..100 {
        let n = r.random_range(2..9);
        let x = randn(&mut r, n, 3);
        let positive = k % 2 == 0;
        let w = if positive { positive_stochastic(&mut r, n) } else { sparse_stochastic(&mut r, n) };
        let before = coordinate_ranges(&x);
        let after = coordinate_ranges(&message_passing_step(&w, &x)?);
        for (b, a) in before.iter().zip(&after) {
            ok &= *a <= b + 1e-12;
            if positive && *b > 1e-9 {
                ok &= a < b;
            }
        }
    }
    verdict(ok, "100 instances, positive and sparse W")
}

fn gamma_in_unit_interval(_: &Ctx) -> Verdict {
    let logits_ok = (-300..=300).map(|k| gamma_value(f64::from(k) * 0.1)).all(|g| g > 0.0 && g < 1.0);
    let mut rejects = true;
    for value in [0.0, 1.0, -0.2, 1.5] {
        let mut c = small_config(BlockKind::Denoising, PoolMode::Sum, GraphMode::Learned, Activation::Tanh);
        c.blocks.gamma.value = value;
        c.blocks.gamma.learnable = false;
        rejects &= matches!(c.validate(), Err(DmpsError::Config(_)));
    }
    verdict(logits_ok && rejects, format!("sigmoid range ok: {logits_ok}, boundary values rejected: {rejects}"))
}

fn energy_descent(_: &Ctx) -> Verdict {
    let mut r = rng(14);
    let mut ok = true;
    for _ in 0..50 {
        let n = r.random_range(2..8);
        let w = symmetric_stochastic(&mut r, n);
        let graph = WeightedGraph::new(w.clone(), 1.0)?;
        let s = r.random_range(0.01..=1.0);
        let mut x = randn(&mut r, n, 2);
        let mut e = dirichlet_energy(&x, &graph)?;
        for _ in 0..30 {
            x = diffusion_step(&x, &w, s)?;
            let next = dirichlet_energy(&x, &graph)?;
            ok &= next <= e * (1.0 + 1e-12) + 1e-15;
            e = next;
        }
    }
    verdict(ok, "50 symmetric instances, 30 steps each")
}

fn oscillation_non_expansion(_: &Ctx) -> Verdict {
    let mut r = rng(15);
    let mut ok = true;
    for k in 0..50 {
        let n = r.random_range(2..8);
        let positive = k % 2 == 0;
        let w = if positive { positive_stochastic(&mut r, n) } else { sparse_stochastic(&mut r, n) };
        let s = r.random_range(0.01..=1.0);
        let mut x = randn(&mut r, n, 2);
        let mut o = oscillation_index(&x)?;
        for _ in 0..20 {
            x = diffusion_step(&x, &w, s)?;
            let next = oscillation_index(&x)?;
            ok &= next <= o + 1e-12;
            if positive && o > 1e-9 {
                ok &= next < o;
            }
            o = next;
        }
    }
    verdict(ok, "50 instances, 20 steps each")
}

fn mass_conservation(_: &Ctx) -> Verdict {
    let mut r = rng(16);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let n = r.random_range(2..8);
        let w = symmetric_stochastic(&mut r, n);
        let x = randn(&mut r, n, 3);
        let s = r.random_range(0.01..=1.0);
        let y = diffusion_step(&x, &w, s)?;
        worst = worst.max(max_abs_diff(&x.sum_rows(), &y.sum_rows())?);
    }
    verdict(worst < 1e-10, format!("max column-sum drift {worst:.2e}"))
}

/// Left Perron vector of a positive stochastic matrix by power iteration.
fn stationary_distribution(w: &Tensor) -> Result<Tensor> {
    let n = w.rows();
    let mut pi = Tensor::filled(1, n, 1.0 / n as f64);
    for _ in 0..100_000 {
        let next = pi.matmul(w)?;
        let delta = max_abs_diff(&next, &pi)?;
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    Ok(pi)
}

fn steady_state_oracle(_: &Ctx) -> Verdict {
    let mut r = rng(17);
    let mut worst = 0.0_f64;
    let mut converged = true;
    for k in 0..20 {
        let w = positive_stochastic(&mut r, 5);
        let x0 = randn(&mut r, 5, 3);
        let s = if k % 2 == 0 { 1.0 } else { 0.5 };
        let trace = simulate_to_steady_state(&x0, &w, s, 1e-12, 100_000)?;
        converged &= trace.converged;
        let target = stationary_distribution(&w)?.matmul(&x0)?;
        let last = trace.final_state();
        for i in 0..5 {
            for j in 0..3 {
                worst = worst.max((last[(i, j)] - target[(0, j)]).abs());
            }
        }
    }
    verdict(converged && worst < 1e-6, format!("max deviation from the power-iteration limit {worst:.2e}"))
}

fn covariance_positive_definite(_: &Ctx) -> Verdict {
    let valid = (0..100).map(|k| f64::from(k) / 100.0).chain([0.999, 0.999_999]).all(|rho| {
        build_covariance(rho).and_then(|s| cholesky(&s)).is_ok()
    });
    let mut at_one = Tensor::identity(5);
    at_one[(1, 3)] = 1.0;
    at_one[(3, 1)] = 1.0;
    let boundary = cholesky(&at_one).is_err() && build_covariance(1.0).is_err();
    verdict(valid && boundary, format!("valid range factorizes: {valid}, rho = 1 rejected: {boundary}"))
}

fn counting_label_range(_: &Ctx) -> Verdict {
    let spec = CountingTaskSpec::default();
    let mut r = rng(18);
    let mut ok = true;
    for _ in 0..2_000 {
        let ex = sample_counting_set(&spec, &mut r);
        let n = ex.elements.rows();
        let c = ex.label as usize;
        ok &= (1..=n).contains(&c) && (spec.min_size..=spec.max_size).contains(&n) && n <= 10;
    }
    verdict(ok, "2000 sets")
}

fn generator_determinism(_: &Ctx) -> Verdict {
    let spec = CountingTaskSpec::default();
    let gauss = GaussianSampler::new(0.95)?;
    let draw = |seed: u64| {
        let mut r = stream_rng(seed, domain::TRAIN, 0);
        let a = gauss.batch(16, &mut r);
        let b: Vec<_> = (0..16).map(|_| sample_counting_set(&spec, &mut r)).collect();
        (a, b)
    };
    let same = draw(1) == draw(1);
    let distinct = draw(1) != draw(2);
    let mut ra = stream_rng(1, domain::TRAIN, 0);
    let mut rb = stream_rng(2, domain::TRAIN, 0);
    let n = 20_000;
    let xs: Vec<f64> = (0..n).map(|_| ra.random::<f64>() - 0.5).collect();
    let ys: Vec<f64> = (0..n).map(|_| rb.random::<f64>() - 0.5).collect();
    let corr = xs.iter().zip(&ys).map(|(a, b)| a * b).sum::<f64>()
        / (xs.iter().map(|a| a * a).sum::<f64>() * ys.iter().map(|b| b * b).sum::<f64>()).sqrt();
    // |r| under independence has sd 1/sqrt(n) ≈ 0.007.
    let independent = corr.abs() < 0.04;
    verdict(
        same && distinct && independent,
        format!("repeatable: {same}, seeds differ: {distinct}, cross-seed correlation {corr:.4}"),
    )
}

fn tiny_run(task: Task) -> RunConfig {
    let mut c = RunConfig::defaults(task);
    c.training.batches = 4;
    c.training.batch_size = 8;
    c.training.log_interval = 2;
    c.training.monitor_sets = 8;
    c.training.eval_sets = 16;
    c.optimizer.scheduler_interval = 2;
    c
}

/// Trains a tiny model and writes its metrics and kernel CSVs to `dir`.
fn tiny_artifacts(task: Task, dir: &Path) -> Result<(RunConfig, super::train::TrainOutcome)> {
    fs::create_dir_all(dir)?;
    let config = tiny_run(task);
    let outcome = train(&config, &mut |_| {})?;
    write_metrics(&dir.join("metrics.jsonl"), &outcome.metrics)?;
    let sets: Vec<Tensor> = evaluation_sets(&config)?.into_iter().take(4).map(|e| e.elements).collect();
    export_kernel(&outcome.model, &outcome.params, &sets, dir, "test", 4)?;
    Ok((config, outcome))
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)?
        .map(|e| {
            let e = e?;
            Ok((e.file_name().to_string_lossy().into_owned(), fs::read(e.path())?))
        })
        .collect::<Result<_>>()?;
    files.sort();
    Ok(files)
}

fn end_to_end_determinism(ctx: &Ctx) -> Verdict {
    let mut ok = true;
    let mut compared = 0;
    for task in [Task::Gaussian, Task::Counting] {
        let a = ctx.scratch.join(format!("determinism_{task}_a"));
        let b = ctx.scratch.join(format!("determinism_{task}_b"));
        tiny_artifacts(task, &a)?;
        tiny_artifacts(task, &b)?;
        let (fa, fb) = (dir_bytes(&a)?, dir_bytes(&b)?);
        compared += fa.len();
        ok &= fa == fb;
    }
    verdict(ok, format!("{compared} files compared byte for byte"))
}

fn emitted_ranges(ctx: &Ctx) -> Verdict {
    let mut acc_ok = true;
    let mut worst = 0.0_f64;
    for task in [Task::Gaussian, Task::Counting] {
        let dir = ctx.scratch.join(format!("ranges_{task}"));
        let (_, outcome) = tiny_artifacts(task, &dir)?;
        acc_ok &= (0.0..=1.0).contains(&outcome.evaluation.accuracy);
        acc_ok &= outcome.metrics.iter().all(|m| (0.0..=1.0).contains(&m.monitor_accuracy));
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.to_string_lossy().ends_with("_W.csv") {
                let w = read_matrix_csv(&path)?;
                for i in 0..w.rows() {
                    worst = worst.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    verdict(acc_ok && worst < 1e-9, format!("accuracies in [0, 1]: {acc_ok}, max W row-sum error {worst:.2e}"))
}

fn checkpoint_read_only(ctx: &Ctx) -> Verdict {
    let dir = ctx.scratch.join("checkpoint");
    let (config, outcome) = tiny_artifacts(Task::Gaussian, &dir)?;
    let path = dir.join("checkpoint.bin");
    checkpoint::save(&path, &config, &outcome.params)?;
    let before = fs::read(&path)?;
    let modified = fs::metadata(&path)?.modified()?;
    let loaded = checkpoint::load(&path)?;
    let model = loaded.model()?;
    let eval = evaluate(&model, &loaded.params, loaded.config.task, &evaluation_sets(&loaded.config)?)?;
    let unchanged = fs::read(&path)? == before && fs::metadata(&path)?.modified()? == modified;
    let same_eval = eval == outcome.evaluation;
    verdict(unchanged && same_eval, format!("file unchanged: {unchanged}, reloaded evaluation identical: {same_eval}"))
}
