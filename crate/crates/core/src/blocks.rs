//! Message passing on sets: the vanilla step, set-denoising and set-residual
//! blocks, pooling, and the full model.
//!
//! A forward pass encodes each element, estimates one latent graph `W` from
//! the encoded set, runs `k` blocks that all share that `W`, pools over
//! elements and maps the pooled vector through the head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Activation, BoundParams, NodeId, ParamStore, Tape};
use crate::error::{DmpsError, Result};
use crate::latent_graph::{GraphNodes, KernelConfig, LatentGraph, LatentGraphLearner};
use crate::layers::{Dense, LayerSpec, Mlp};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// `τ((W·X)·H)`
    #[serde(alias = "mp")]
    Vanilla,
    /// `τ(((1−γ)X + γ·W·X)·H)`
    #[serde(alias = "denoise")]
    Denoising,
    /// `X + τ((W·X)·H)`
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Sum,
    Mean,
    Max,
}

/// How `W` is obtained. `Identity` and `Uniform` bypass the kernel learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    Learned,
    Identity,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputTransform {
    Identity,
    Sigmoid,
    Exp,
}

impl OutputTransform {
    fn activation(self) -> Activation {
        match self {
            OutputTransform::Identity => Activation::Identity,
            OutputTransform::Sigmoid => Activation::Sigmoid,
            OutputTransform::Exp => Activation::Exp,
        }
    }
}

/// Diffusion coefficient γ. Learnable γ is `sigmoid(g)` with `g` initialized
/// so that γ starts at `value`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaConfig {
    pub value: f64,
    pub learnable: bool,
    #[serde(default)]
    pub per_block: bool,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self {
            value: 0.5,
            learnable: true,
            per_block: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub count: usize,
    pub activation: Activation,
    /// Output width of each block; empty keeps the encoder width throughout.
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub gamma: GammaConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    #[serde(default)]
    pub hidden: Vec<LayerSpec>,
    pub output_dim: usize,
    pub output: OutputTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder: Vec<LayerSpec>,
    pub graph: GraphMode,
    pub kernel: KernelConfig,
    pub blocks: BlockConfig,
    pub pool: PoolMode,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn encoder_dim(&self) -> usize {
        self.encoder.last().map_or(self.input_dim, |l| l.width)
    }

    /// Output width of every block in order.
    pub fn block_widths(&self) -> Vec<usize> {
        if self.blocks.widths.is_empty() {
            vec![self.encoder_dim(); self.blocks.count]
        } else {
            self.blocks.widths.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(DmpsError::config("input dimension must be positive"));
        }
        if self.blocks.count == 0 {
            return Err(DmpsError::config("at least one block is required"));
        }
        if !self.blocks.widths.is_empty() && self.blocks.widths.len() != self.blocks.count {
            return Err(DmpsError::config(format!(
                "{} block widths given for {} blocks",
                self.blocks.widths.len(),
                self.blocks.count
            )));
        }
        if self.blocks.kind == BlockKind::Residual {
            let mut width = self.encoder_dim();
            for (t, &w) in self.block_widths().iter().enumerate() {
                if w != width {
                    return Err(DmpsError::config(format!(
                        "residual block {t} needs a square linear layer, got {width} -> {w}"
                    )));
                }
                width = w;
            }
        }
        if self.blocks.kind == BlockKind::Denoising {
            let g = self.blocks.gamma.value;
            if !(g > 0.0 && g < 1.0) {
                return Err(DmpsError::config(format!("gamma must lie in (0, 1), got {g}")));
            }
        }
        if self.head.output_dim == 0 {
            return Err(DmpsError::config("head output dimension must be positive"));
        }
        if self.graph == GraphMode::Learned {
            self.kernel.validate()?;
        }
        Ok(())
    }
}

/// `γ = sigmoid(g)`.
pub fn gamma_value(logit: f64) -> f64 {
    sigmoid(logit)
}

fn gamma_logit(gamma: f64) -> f64 {
    (gamma / (1.0 - gamma)).ln()
}

/// `X' = W·X`.
pub fn message_passing_step(weights: &Tensor, x: &Tensor) -> Result<Tensor> {
    if weights.rows() != weights.cols() || weights.cols() != x.rows() {
        return Err(DmpsError::Dimension {
            op: "message_passing_step",
            left: weights.shape(),
            right: x.shape(),
        });
    }
    weights.matmul(x)
}

fn dense_apply(x: &Tensor, h: &Tensor, tau: Activation) -> Result<Tensor> {
    Ok(x.matmul(h)?.map(|v| tau.apply(v)))
}

/// `τ(((1−γ)X + γ·W·X)·H)`.
pub fn set_denoising_block(weights: &Tensor, x: &Tensor, gamma: f64, h: &Tensor, tau: Activation) -> Result<Tensor> {
    let wx = message_passing_step(weights, x)?;
    let mixed = x.zip_map(&wx, "set_denoising_block", |a, b| (1.0 - gamma) * a + gamma * b)?;
    dense_apply(&mixed, h, tau)
}

/// `X + τ((W·X)·H)`; `H` must be square.
pub fn set_residual_block(weights: &Tensor, x: &Tensor, h: &Tensor, tau: Activation) -> Result<Tensor> {
    if h.rows() != h.cols() {
        return Err(DmpsError::config(format!(
            "residual block needs a square linear layer, got {:?}",
            h.shape()
        )));
    }
    let wx = message_passing_step(weights, x)?;
    x.add(&dense_apply(&wx, h, tau)?)
}

/// Column-wise reduction over the elements of a set.
pub fn pool_set(x: &Tensor, mode: PoolMode) -> Result<Tensor> {
    if x.rows() == 0 {
        return Err(DmpsError::EmptySet);
    }
    Ok(match mode {
        PoolMode::Sum => x.sum_rows(),
        PoolMode::Mean => x.sum_rows().scale(1.0 / x.rows() as f64),
        PoolMode::Max => Tensor::from_fn(1, x.cols(), |_, j| {
            (0..x.rows()).map(|i| x[(i, j)]).fold(f64::NEG_INFINITY, f64::max)
        }),
    })
}

fn pool_on_tape(tape: &mut Tape<'_>, x: NodeId, mode: PoolMode) -> Result<NodeId> {
    match mode {
        PoolMode::Sum => tape.sum_rows(x),
        PoolMode::Mean => tape.mean_rows(x),
        PoolMode::Max => tape.max_rows(x),
    }
}

#[derive(Clone, Debug)]
struct Block {
    layer: Dense,
    gamma_logit: Option<usize>,
}

#[derive(Clone, Debug)]
enum GraphSource {
    Learned(LatentGraphLearner),
    Identity,
    Uniform,
}

/// Tape nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub graph: GraphNodes,
    pub encoded: NodeId,
    pub pooled: NodeId,
    /// Head output before the transform κ (logit or log-rate).
    pub raw: NodeId,
    pub output: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub raw: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct DmpsModel {
    config: ModelConfig,
    encoder: Mlp,
    graph: GraphSource,
    blocks: Vec<Block>,
    shared_gamma: Option<usize>,
    head: Mlp,
}

impl DmpsModel {
    /// Builds the model and a freshly initialized parameter store.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut params = ParamStore::new();
        let encoder = Mlp::init(&mut params, rng, "encoder", config.input_dim, &config.encoder)?;
        let width = encoder.out_dim();
        let graph = match config.graph {
            GraphMode::Learned => GraphSource::Learned(LatentGraphLearner::init(
                &mut params,
                rng,
                "kernel",
                width,
                &config.kernel,
            )?),
            GraphMode::Identity => GraphSource::Identity,
            GraphMode::Uniform => GraphSource::Uniform,
        };

        let gamma = config.blocks.gamma;
        let denoising = config.blocks.kind == BlockKind::Denoising;
        let shared_gamma = if denoising && gamma.learnable && !gamma.per_block {
            Some(params.insert("gamma.logit", Tensor::scalar(gamma_logit(gamma.value)))?)
        } else {
            None
        };

        let mut blocks = Vec::with_capacity(config.blocks.count);
        let mut in_dim = width;
        for (t, out_dim) in config.block_widths().into_iter().enumerate() {
            let layer = Dense::init(
                &mut params,
                rng,
                &format!("block.{t}"),
                in_dim,
                out_dim,
                config.blocks.activation,
            )?;
            let gamma_logit_slot = if denoising && gamma.learnable && gamma.per_block {
                Some(params.insert(format!("block.{t}.gamma_logit"), Tensor::scalar(gamma_logit(gamma.value)))?)
            } else {
                None
            };
            blocks.push(Block {
                layer,
                gamma_logit: gamma_logit_slot,
            });
            in_dim = out_dim;
        }

        let mut head_specs = config.head.hidden.clone();
        head_specs.push(LayerSpec::new(config.head.output_dim, Activation::Identity));
        let head = Mlp::init(&mut params, rng, "head", in_dim, &head_specs)?;

        Ok((
            Self {
                config: config.clone(),
                encoder,
                graph,
                blocks,
                shared_gamma,
                head,
            },
            params,
        ))
    }

    /// Rebuilds the model layout for an existing parameter store, checking
    /// that names and shapes match the configuration.
    pub fn for_params(config: &ModelConfig, params: &ParamStore) -> Result<Self> {
        let mut rng = ChaCha8Rng::from_seed([0; 32]);
        let (model, fresh) = Self::init(config, &mut rng)?;
        if fresh.len() != params.len() {
            return Err(DmpsError::config(format!(
                "parameter count mismatch: configuration expects {}, store has {}",
                fresh.len(),
                params.len()
            )));
        }
        for ((name_a, a), (name_b, b)) in fresh.iter().zip(params.iter()) {
            if name_a != name_b || a.shape() != b.shape() {
                return Err(DmpsError::config(format!(
                    "parameter {name_b} {:?} does not match expected {name_a} {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn learner(&self) -> Option<&LatentGraphLearner> {
        match &self.graph {
            GraphSource::Learned(l) => Some(l),
            _ => None,
        }
    }

    /// Current γ of block `t`, if the blocks are denoising.
    pub fn gamma(&self, params: &ParamStore, t: usize) -> Option<f64> {
        if self.config.blocks.kind != BlockKind::Denoising {
            return None;
        }
        let slot = self.blocks[t].gamma_logit.or(self.shared_gamma);
        Some(match slot {
            Some(s) => gamma_value(params.value(s).item()),
            None => self.config.blocks.gamma.value,
        })
    }

    fn graph_on_tape(&self, tape: &mut Tape<'_>, bound: &BoundParams, x: NodeId) -> Result<GraphNodes> {
        let n = tape.value(x).rows();
        match &self.graph {
            GraphSource::Learned(l) => l.build_on_tape(tape, bound, x),
            GraphSource::Identity => {
                let w = tape.constant(Tensor::identity(n));
                Ok(GraphNodes { kernel: w, weights: w })
            }
            GraphSource::Uniform => {
                let k = tape.constant(Tensor::filled(n, n, 1.0));
                let w = tape.constant(Tensor::filled(n, n, 1.0 / n as f64));
                Ok(GraphNodes { kernel: k, weights: w })
            }
        }
    }

    /// Records the whole forward pass of one set on `tape`.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, bound: &BoundParams, set: &'a Tensor) -> Result<ForwardNodes> {
        if set.rows() == 0 {
            return Err(DmpsError::EmptySet);
        }
        if set.cols() != self.config.input_dim {
            return Err(DmpsError::Dimension {
                op: "dmps_forward",
                left: set.shape(),
                right: (set.rows(), self.config.input_dim),
            });
        }
        let x0 = tape.constant_ref(set);
        let encoded = self.encoder.forward(tape, bound, x0)?;
        let graph = self.graph_on_tape(tape, bound, encoded)?;
        let w = graph.weights;

        let fixed_gamma = match self.shared_gamma {
            Some(slot) => Some(tape.unary(bound.node(slot), Activation::Sigmoid)),
            None if self.config.blocks.kind == BlockKind::Denoising && !self.config.blocks.gamma.learnable => {
                Some(tape.constant(Tensor::scalar(self.config.blocks.gamma.value)))
            }
            None => None,
        };

        let mut x = encoded;
        for block in &self.blocks {
            let wx = tape.matmul(w, x)?;
            x = match self.config.blocks.kind {
                BlockKind::Vanilla => block.layer.forward(tape, bound, wx)?,
                BlockKind::Denoising => {
                    let gamma = match block.gamma_logit {
                        Some(slot) => tape.unary(bound.node(slot), Activation::Sigmoid),
                        None => fixed_gamma.expect("denoising blocks always carry a gamma"),
                    };
                    let mixed = tape.lerp(x, wx, gamma)?;
                    block.layer.forward(tape, bound, mixed)?
                }
                BlockKind::Residual => {
                    let update = block.layer.forward(tape, bound, wx)?;
                    tape.add(x, update)?
                }
            };
        }

        let pooled = pool_on_tape(tape, x, self.config.pool)?;
        let raw = self.head.forward(tape, bound, pooled)?;
        let output = tape.unary(raw, self.config.head.output.activation());
        Ok(ForwardNodes {
            graph,
            encoded,
            pooled,
            raw,
            output,
        })
    }

    /// Evaluates one set with a frozen parameter snapshot.
    pub fn predict(&self, params: &ParamStore, set: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let nodes = self.forward(&mut tape, &bound, set)?;
        Ok(Prediction {
            raw: tape.value(nodes.raw).clone(),
            output: tape.value(nodes.output).clone(),
        })
    }

    /// Latent graph the model estimates for `set`.
    pub fn latent_graph(&self, params: &ParamStore, set: &Tensor) -> Result<LatentGraph> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let nodes = self.forward(&mut tape, &bound, set)?;
        Ok(LatentGraph {
            kernel: tape.value(nodes.graph.kernel).clone(),
            weights: tape.value(nodes.graph.weights).clone(),
        })
    }

    /// Encoder output of `set` (the block input features).
    pub fn encode(&self, params: &ParamStore, set: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let nodes = self.forward(&mut tape, &bound, set)?;
        Ok(tape.value(nodes.encoded).clone())
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn block_layers(&self) -> impl Iterator<Item = &Dense> {
        self.blocks.iter().map(|b| &b.layer)
    }
}

/// Prediction for one set; see [`DmpsModel::predict`].
pub fn dmps_forward(model: &DmpsModel, params: &ParamStore, set: &Tensor) -> Result<Prediction> {
    model.predict(params, set)
}
