//! Latent-graph estimation by deep kernel learning.
//!
//! Elements are embedded by a shared two-layer MLP, compared pairwise with an
//! RBF kernel of learnable bandwidth σ, and the kernel matrix is turned into a
//! row-stochastic weight matrix by a row softmax. σ is stored as `ln σ` so it
//! stays positive under unconstrained updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Activation, BoundParams, NodeId, ParamStore, Tape};
use crate::autodiff::tape::{rbf_from_features, sparsify_with_mask};
use crate::error::{DmpsError, Result};
use crate::layers::{LayerSpec, Mlp};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub initial_bandwidth: f64,
    /// Sparsification threshold δ ∈ [0, 1); zero disables it.
    #[serde(default)]
    pub threshold: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            output_dim: 128,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Relu,
            initial_bandwidth: 1.0,
            threshold: 0.0,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(DmpsError::config("kernel embedding dimensions must be positive"));
        }
        if !(self.initial_bandwidth > 0.0) || !self.initial_bandwidth.is_finite() {
            return Err(DmpsError::config(format!(
                "initial bandwidth must be positive, got {}",
                self.initial_bandwidth
            )));
        }
        check_threshold(self.threshold)
    }
}

fn check_threshold(delta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&delta) {
        return Err(DmpsError::config(format!(
            "sparsification threshold must lie in [0, 1), got {delta}"
        )));
    }
    Ok(())
}

/// Kernel matrix and row-stochastic weights of one set.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGraph {
    pub kernel: Tensor,
    pub weights: Tensor,
}

impl LatentGraph {
    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows() == 0
    }
}

/// `K_ij = exp(−‖φ_i − φ_j‖² / (2σ²))`.
pub fn rbf_kernel_matrix(features: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(DmpsError::contract(format!("bandwidth must be positive, got {sigma}")));
    }
    Ok(rbf_from_features(features, sigma))
}

/// Row softmax of the raw kernel matrix.
pub fn normalize_to_stochastic(kernel: &Tensor) -> Tensor {
    softmax_rows(kernel)
}

/// Zeroes entries below `delta` and renormalizes rows. A row left with no
/// entries keeps only its self-weight.
pub fn threshold_sparsify(weights: &Tensor, delta: f64) -> Result<Tensor> {
    check_threshold(delta)?;
    if weights.rows() != weights.cols() {
        return Err(DmpsError::Dimension {
            op: "threshold_sparsify",
            left: weights.shape(),
            right: (weights.rows(), weights.rows()),
        });
    }
    if delta == 0.0 {
        return Ok(weights.clone());
    }
    Ok(sparsify_with_mask(weights, delta).0)
}

/// Tape nodes of a latent graph built inside a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GraphNodes {
    pub kernel: NodeId,
    pub weights: NodeId,
}

/// Trainable deep-kernel graph estimator.
#[derive(Clone, Debug)]
pub struct LatentGraphLearner {
    config: KernelConfig,
    embed: Mlp,
    log_bandwidth: usize,
}

impl LatentGraphLearner {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        config: &KernelConfig,
    ) -> Result<Self> {
        config.validate()?;
        let specs = [
            LayerSpec::new(config.hidden_dim, config.hidden_activation),
            LayerSpec::new(config.output_dim, config.output_activation),
        ];
        let embed = Mlp::init(params, rng, &format!("{name}.embed"), input_dim, &specs)?;
        let log_bandwidth = params.insert(
            format!("{name}.log_bandwidth"),
            Tensor::scalar(config.initial_bandwidth.ln()),
        )?;
        Ok(Self {
            config: config.clone(),
            embed,
            log_bandwidth,
        })
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Mlp {
        &self.embed
    }

    pub fn bandwidth(&self, params: &ParamStore) -> f64 {
        params.value(self.log_bandwidth).item().exp()
    }

    pub fn embed_on_tape(&self, tape: &mut Tape<'_>, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
        self.embed.forward(tape, bound, x)
    }

    pub fn build_on_tape(&self, tape: &mut Tape<'_>, bound: &BoundParams, x: NodeId) -> Result<GraphNodes> {
        let phi = self.embed_on_tape(tape, bound, x)?;
        let sigma = tape.unary(bound.node(self.log_bandwidth), Activation::Exp);
        let kernel = tape.rbf_kernel(phi, sigma)?;
        let mut weights = tape.softmax_rows(kernel);
        if self.config.threshold > 0.0 {
            weights = tape.sparsify_rows(weights, self.config.threshold)?;
        }
        Ok(GraphNodes { kernel, weights })
    }

    /// Row-wise embedding of a set with a frozen parameter snapshot.
    pub fn embed_elements(&self, x: &Tensor, params: &ParamStore) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let xn = tape.constant_ref(x);
        let phi = self.embed_on_tape(&mut tape, &bound, xn)?;
        Ok(tape.value(phi).clone())
    }

    pub fn build(&self, x: &Tensor, params: &ParamStore) -> Result<LatentGraph> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let xn = tape.constant_ref(x);
        let g = self.build_on_tape(&mut tape, &bound, xn)?;
        Ok(LatentGraph {
            kernel: tape.value(g.kernel).clone(),
            weights: tape.value(g.weights).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn learner(seed: u64, input_dim: usize) -> (LatentGraphLearner, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let config = KernelConfig {
            hidden_dim: 8,
            output_dim: 6,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Tanh,
            initial_bandwidth: 0.7,
            threshold: 0.0,
        };
        let l = LatentGraphLearner::init(&mut params, &mut rng, "kernel", input_dim, &config).unwrap();
        (l, params)
    }

    fn random_set(seed: u64, n: usize, p: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn kernel_hand_value() {
        let phi = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]);
        let k = rbf_kernel_matrix(&phi, 1.0).unwrap();
        assert!((k[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k[(0, 1)] - 0.367879).abs() < 1e-6);
        assert_eq!(k[(0, 0)], 1.0);
        assert_eq!(k[(1, 1)], 1.0);
    }

    #[test]
    fn kernel_wide_bandwidth_tends_to_ones() {
        let phi = random_set(1, 4, 3);
        let k = rbf_kernel_matrix(&phi, 1e6).unwrap();
        assert!(k.data().iter().all(|&v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn kernel_rejects_non_positive_bandwidth() {
        assert!(rbf_kernel_matrix(&Tensor::zeros(2, 1), 0.0).is_err());
    }

    #[test]
    fn normalization_examples() {
        let w = normalize_to_stochastic(&Tensor::filled(3, 3, 1.0));
        assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(normalize_to_stochastic(&Tensor::scalar(0.4)), Tensor::scalar(1.0));
        let w = normalize_to_stochastic(&Tensor::from_rows(&[[1.0, 1.0 + 2f64.ln()]]));
        assert!((w[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sparsify_examples() {
        let w = Tensor::from_rows(&[[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8]]);
        assert_eq!(threshold_sparsify(&w, 0.0).unwrap(), w);
        let s = threshold_sparsify(&w, 0.2).unwrap();
        assert!((s[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s[(0, 2)], 0.0);

        let uniform = Tensor::filled(3, 3, 1.0 / 3.0);
        let s = threshold_sparsify(&uniform, 0.5).unwrap();
        assert_eq!(s, Tensor::identity(3));
    }

    #[test]
    fn sparsify_rejects_threshold_of_one() {
        let w = Tensor::identity(2);
        assert!(matches!(threshold_sparsify(&w, 1.0), Err(DmpsError::Config(_))));
        assert!(matches!(threshold_sparsify(&w, -0.1), Err(DmpsError::Config(_))));
    }

    #[test]
    fn graph_invariants() {
        let (l, params) = learner(3, 2);
        let x = random_set(4, 6, 2);
        let g = l.build(&x, &params).unwrap();
        assert_eq!(g.len(), 6);
        for i in 0..6 {
            assert_eq!(g.kernel[(i, i)], 1.0);
            let s: f64 = g.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for j in 0..6 {
                assert!(g.kernel[(i, j)] > 0.0 && g.kernel[(i, j)] <= 1.0);
                assert!((g.kernel[(i, j)] - g.kernel[(j, i)]).abs() < 1e-12);
                assert!(g.weights[(i, j)] >= 0.0);
            }
        }
    }

    #[test]
    fn embedding_is_row_wise() {
        let (l, params) = learner(5, 3);
        let x = random_set(6, 5, 3);
        let perm = [3, 1, 4, 0, 2];
        let a = l.embed_elements(&x.permute_rows(&perm), &params).unwrap();
        let b = l.embed_elements(&x, &params).unwrap().permute_rows(&perm);
        assert_eq!(a, b);
        let single = l.embed_elements(&random_set(7, 1, 3), &params).unwrap();
        assert_eq!(single.shape(), (1, 6));
    }

    #[test]
    fn embedding_rejects_wrong_width() {
        let (l, params) = learner(5, 3);
        assert!(matches!(
            l.embed_elements(&Tensor::zeros(4, 2), &params),
            Err(DmpsError::Dimension { .. })
        ));
    }

    #[test]
    fn zeroed_final_layer_gives_all_ones_kernel() {
        let (l, mut params) = learner(8, 2);
        let last = &l.embedding().layers()[1];
        let (w, b) = (last.weight_slot(), last.bias_slot());
        let shape = params.value(w).shape();
        *params.value_mut(w) = Tensor::zeros(shape.0, shape.1);
        let shape = params.value(b).shape();
        *params.value_mut(b) = Tensor::zeros(shape.0, shape.1);
        let g = l.build(&random_set(9, 4, 2), &params).unwrap();
        assert_eq!(g.kernel, Tensor::filled(4, 4, 1.0));
        assert!(g.weights.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn duplicate_elements_get_uniform_weights() {
        let (l, params) = learner(10, 2);
        let x = Tensor::from_rows(&[[0.3, -1.2], [0.3, -1.2]]);
        let g = l.build(&x, &params).unwrap();
        assert_eq!(g.weights, Tensor::filled(2, 2, 0.5));
    }

    #[test]
    fn conjugation_equivariance() {
        let (l, params) = learner(11, 2);
        let x = random_set(12, 5, 2);
        let perm = [4, 2, 0, 1, 3];
        let g = l.build(&x, &params).unwrap();
        let gp = l.build(&x.permute_rows(&perm), &params).unwrap();
        let dk = gp.kernel.sub(&g.kernel.conjugate_by_permutation(&perm)).unwrap();
        let dw = gp.weights.sub(&g.weights.conjugate_by_permutation(&perm)).unwrap();
        assert!(dk.max_abs() < 1e-12);
        assert!(dw.max_abs() < 1e-12);
    }

    #[test]
    fn thresholded_learner_keeps_rows_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ParamStore::new();
        let config = KernelConfig {
            hidden_dim: 4,
            output_dim: 4,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
            initial_bandwidth: 0.2,
            threshold: 0.15,
        };
        let l = LatentGraphLearner::init(&mut params, &mut rng, "k", 2, &config).unwrap();
        let g = l.build(&random_set(14, 6, 2), &params).unwrap();
        for i in 0..6 {
            let s: f64 = g.weights.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(g.weights.row(i).iter().all(|&v| v == 0.0 || v >= 0.15 - 1e-12));
        }
    }
}
