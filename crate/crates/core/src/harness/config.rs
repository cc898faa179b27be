//! Run configuration, stored as TOML.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, Adam, ReduceLrOnPlateau};
use crate::blocks::{BlockConfig, BlockKind, GammaConfig, GraphMode, HeadConfig, ModelConfig, OutputTransform, PoolMode};
use crate::error::{DmpsError, Result};
use crate::latent_graph::KernelConfig;
use crate::layers::LayerSpec;
use crate::tasks::{CountingTaskSpec, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Plateau,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub factor: f64,
    pub patience: usize,
    /// Batches per monitored metric fed to the plateau schedule.
    pub scheduler_interval: usize,
}

impl OptimizerConfig {
    pub fn adam(&self) -> Adam {
        Adam {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn plateau(&self) -> Option<ReduceLrOnPlateau> {
        match self.schedule {
            Schedule::Constant => None,
            Schedule::Plateau => Some(ReduceLrOnPlateau {
                factor: self.factor,
                patience: self.patience,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batches: usize,
    pub batch_size: usize,
    /// Batches between metrics records.
    pub log_interval: usize,
    /// Fixed held-out sets scored at every metrics record.
    pub monitor_sets: usize,
    /// Held-out sets for the final accuracy.
    pub eval_sets: usize,
    /// Sets in a validation split for the plateau schedule; zero monitors
    /// the training loss instead.
    #[serde(default)]
    pub validation_sets: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianConfig {
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub rho_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rho_grid: vec![0.0, 0.25, 0.5, 0.75, 0.95],
            gamma_grid: vec![0.02, 0.3, 0.5, 0.7, 0.98],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub gaussian: GaussianConfig,
    pub counting: CountingTaskSpec,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        match task {
            Task::Gaussian => Self::gaussian_default(),
            Task::Counting => Self::counting_default(),
        }
    }

    /// FL(1,32,ReLU), three message-passing blocks over a DKL(32,64,128)
    /// graph, max pooling, FL(32,1,Sigmoid); Adam 1e-3 with plateau(0.9, 1);
    /// 10,000 balanced batches of 128.
    pub fn gaussian_default() -> Self {
        Self {
            task: Task::Gaussian,
            seed: 0,
            output_dir: default_output_dir(),
            model: ModelConfig {
                input_dim: 1,
                encoder: vec![LayerSpec::new(32, Activation::Relu)],
                graph: GraphMode::Learned,
                kernel: KernelConfig {
                    hidden_dim: 64,
                    output_dim: 128,
                    hidden_activation: Activation::Relu,
                    output_activation: Activation::Relu,
                    initial_bandwidth: 1.0,
                    threshold: 0.0,
                },
                blocks: BlockConfig {
                    kind: BlockKind::Vanilla,
                    count: 3,
                    activation: Activation::Relu,
                    widths: vec![],
                    gamma: GammaConfig::default(),
                },
                pool: PoolMode::Max,
                head: HeadConfig {
                    hidden: vec![],
                    output_dim: 1,
                    output: OutputTransform::Sigmoid,
                },
            },
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                schedule: Schedule::Plateau,
                factor: 0.9,
                patience: 1,
                scheduler_interval: 250,
            },
            training: TrainingConfig {
                batches: 10_000,
                batch_size: 128,
                log_interval: 500,
                monitor_sets: 256,
                eval_sets: 2_000,
                validation_sets: 0,
            },
            gaussian: GaussianConfig { rho: 0.95 },
            counting: CountingTaskSpec::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Per-element MLP on 2-D points, three set-denoising blocks with a
    /// shared learnable γ, sum pooling and an exponential Poisson head;
    /// 20,000 batches of 32.
    pub fn counting_default() -> Self {
        Self {
            task: Task::Counting,
            seed: 0,
            output_dir: default_output_dir(),
            model: ModelConfig {
                input_dim: 2,
                encoder: vec![
                    LayerSpec::new(32, Activation::Tanh),
                    LayerSpec::new(32, Activation::Tanh),
                ],
                graph: GraphMode::Learned,
                kernel: KernelConfig {
                    hidden_dim: 64,
                    output_dim: 64,
                    hidden_activation: Activation::Tanh,
                    output_activation: Activation::Tanh,
                    initial_bandwidth: 1.0,
                    threshold: 0.0,
                },
                blocks: BlockConfig {
                    kind: BlockKind::Denoising,
                    count: 3,
                    activation: Activation::Tanh,
                    widths: vec![],
                    gamma: GammaConfig::default(),
                },
                pool: PoolMode::Sum,
                head: HeadConfig {
                    hidden: vec![],
                    output_dim: 1,
                    output: OutputTransform::Exp,
                },
            },
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                schedule: Schedule::Constant,
                factor: 0.9,
                patience: 1,
                scheduler_interval: 250,
            },
            training: TrainingConfig {
                batches: 20_000,
                batch_size: 32,
                log_interval: 500,
                monitor_sets: 256,
                eval_sets: 2_000,
                validation_sets: 0,
            },
            gaussian: GaussianConfig { rho: 0.95 },
            counting: CountingTaskSpec::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.head.output_dim != 1 {
            return Err(DmpsError::config("both tasks need a scalar head"));
        }
        let expected_input = match self.task {
            Task::Gaussian => 1,
            Task::Counting => self.counting.dim,
        };
        if self.model.input_dim != expected_input {
            return Err(DmpsError::config(format!(
                "{} task has {expected_input}-dimensional elements but the model expects {}",
                self.task, self.model.input_dim
            )));
        }
        match self.task {
            Task::Gaussian => {
                if !(0.0..1.0).contains(&self.gaussian.rho) {
                    return Err(DmpsError::config(format!("rho must lie in [0, 1), got {}", self.gaussian.rho)));
                }
                if self.model.head.output != OutputTransform::Sigmoid {
                    return Err(DmpsError::config("gaussian task needs a sigmoid head"));
                }
            }
            Task::Counting => {
                self.counting.validate()?;
                if self.model.head.output != OutputTransform::Exp {
                    return Err(DmpsError::config("counting task needs an exponential head"));
                }
            }
        }
        let t = &self.training;
        if t.batch_size == 0 || t.log_interval == 0 || t.eval_sets == 0 {
            return Err(DmpsError::config("batch size, log interval and eval sets must be positive"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) {
            return Err(DmpsError::config("learning rate must be positive"));
        }
        if o.schedule == Schedule::Plateau && (!(o.factor > 0.0 && o.factor < 1.0) || o.scheduler_interval == 0) {
            return Err(DmpsError::config("plateau schedule needs factor in (0, 1) and a positive interval"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| DmpsError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DmpsError::config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering of the model configuration
    /// and task, truncated to 64 bits.
    pub fn model_hash(&self) -> Result<u64> {
        #[derive(Serialize)]
        struct Key<'a> {
            task: Task,
            model: &'a ModelConfig,
        }
        let text = toml::to_string(&Key {
            task: self.task,
            model: &self.model,
        })
        .map_err(|e| DmpsError::config(e.to_string()))?;
        let digest = Sha256::digest(text.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Ok(u64::from_le_bytes(bytes))
    }
}

const ANNOTATIONS: &[(&str, &str)] = &[
    ("[model]", "# Gaussian sets: FL(1,32,ReLU) -> 3 x MP(32,64,128,ReLU,ReLU,ReLU,sigma) -> max pool -> FL(32,1,Sigmoid).\n# Counting: a 2-D point encoder replaces the convolutional image encoder; 3 x SDB blocks with Tanh, sum pool, FL(.,1) + exp."),
    ("[model.kernel]", "# Deep kernel layer DKL(d_i, d_m, d_o, f1, f2, sigma): two dense layers, RBF kernel with learnable bandwidth, row softmax.\n# threshold = 0 disables sparsification of W."),
    ("[model.blocks.gamma]", "# Diffusion coefficient; learnable gamma is sigmoid(g), shared across blocks unless per_block = true."),
    ("[optimizer]", "# Adam with initial learning rate 1e-3 and ReduceLROnPlateau(factor 0.9, patience 1) for Gaussian sets.\n# Counting used a constant rate (1e-4 over 200,000 batches); these defaults use 1e-3 over 20,000."),
    ("[training]", "# Gaussian sets: 120,000 batches of 128 (64 per distribution), scaled to 10,000 batches.\n# Counting: 200,000 batches of 32, scaled to 20,000. Final accuracy uses 2,000 held-out sets, threshold 0.5."),
    ("[gaussian]", "# Sigma is the 5x5 identity with Sigma_24 = Sigma_42 = rho, rho in [0, 1)."),
    ("[counting]", "# Set size n ~ U{6..10}, c ~ U{1..n} distinct clusters, each realized at least once.\n# Synthetic geometry: centers in [-1,1]^2, noise 0.1, minimum separation 0.5."),
];

/// Default configuration rendered as TOML with provenance comments.
pub fn annotated_defaults(task: Task) -> Result<String> {
    let body = RunConfig::defaults(task).to_toml()?;
    let mut out = String::new();
    out.push_str(&format!("# Default run configuration for the {task} task.\n"));
    for line in body.lines() {
        if let Some((_, note)) = ANNOTATIONS.iter().find(|(header, _)| *header == line.trim()) {
            out.push_str(note);
            out.push('\n');
        }
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}
