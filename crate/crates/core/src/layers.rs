//! Fully-connected layers shared by the encoder, kernel embedding, blocks and
//! head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot_uniform, Activation, BoundParams, NodeId, ParamStore, Tape};
use crate::error::{DmpsError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(width: usize, activation: Activation) -> Self {
        Self { width, activation }
    }
}

/// `f(X·H + 1bᵀ)` applied row-wise.
#[derive(Clone, Debug)]
pub struct Dense {
    weight: usize,
    bias: usize,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
}

impl Dense {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(DmpsError::config(format!("layer {name} has a zero dimension")));
        }
        let weight = params.insert(format!("{name}.weight"), glorot_uniform(rng, in_dim, out_dim))?;
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(1, out_dim))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight_slot(&self) -> usize {
        self.weight
    }

    pub fn bias_slot(&self) -> usize {
        self.bias
    }

    /// Affine part only, `X·H + 1bᵀ`.
    pub fn affine(&self, tape: &mut Tape<'_>, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
        let cols = tape.value(x).cols();
        if cols != self.in_dim {
            return Err(DmpsError::Dimension {
                op: "dense",
                left: tape.value(x).shape(),
                right: (self.in_dim, self.out_dim),
            });
        }
        let y = tape.matmul(x, bound.node(self.weight))?;
        tape.add_row(y, bound.node(self.bias))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &BoundParams, x: NodeId) -> Result<NodeId> {
        let y = self.affine(tape, bound, x)?;
        Ok(tape.unary(y, self.activation))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    in_dim: usize,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        specs: &[LayerSpec],
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut width = in_dim;
        for (i, spec) in specs.iter().enumerate() {
            layers.push(Dense::init(
                params,
                rng,
                &format!("{name}.{i}"),
                width,
                spec.width,
                spec.activation,
            )?);
            width = spec.width;
        }
        Ok(Self { layers, in_dim })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim, Dense::out_dim)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &BoundParams, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            x = layer.forward(tape, bound, x)?;
        }
        Ok(x)
    }
}
