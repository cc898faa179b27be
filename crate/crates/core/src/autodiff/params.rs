use rand::Rng;

use crate::autodiff::tape::{Gradients, NodeId, Tape};
use crate::error::{DmpsError, Result};
use crate::tensor::Tensor;

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Registers a tensor and returns its slot index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(DmpsError::config(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, value));
        Ok(self.entries.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].1
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every parameter on the tape as a borrowed tracked leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> BoundParams {
        BoundParams {
            ids: self.entries.iter().map(|(_, t)| tape.variable_ref(t)).collect(),
        }
    }

    /// Places every parameter on the tape as an untracked constant, for
    /// evaluation with a frozen snapshot.
    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a>) -> BoundParams {
        BoundParams {
            ids: self.entries.iter().map(|(_, t)| tape.constant_ref(t)).collect(),
        }
    }

    /// Gathers per-parameter gradients out of a backward sweep.
    pub fn collect_grads(&self, bound: &BoundParams, mut grads: Gradients) -> ParamGrads {
        ParamGrads {
            grads: bound.ids.iter().map(|&id| grads.take(id)).collect(),
        }
    }
}

/// Node ids of a parameter store bound to one tape, aligned with slot order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, slot: usize) -> NodeId {
        self.ids[slot]
    }
}

/// Gradients aligned with `ParamStore` slots; `None` where a parameter was
/// unreachable from the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            grads: params
                .entries
                .iter()
                .map(|(_, t)| Some(Tensor::zeros(t.rows(), t.cols())))
                .collect(),
        }
    }

    pub fn from_vec(grads: Vec<Option<Tensor>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.grads.get(slot).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`, treating missing entries as zero.
    pub fn accumulate(&mut self, other: &ParamGrads, scale: f64) -> Result<()> {
        if other.grads.len() != self.grads.len() {
            return Err(DmpsError::contract("gradient sets of different lengths"));
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            let Some(theirs) = theirs else { continue };
            match mine {
                Some(m) => m.axpy(scale, theirs)?,
                None => *mine = Some(theirs.scale(scale)),
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// Uniform Glorot initialization in `±√(6/(fan_in+fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..=limit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(1, 1)).unwrap();
        assert!(p.insert("w", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = glorot_uniform(&mut rng, 32, 64);
        let limit = (6.0f64 / 96.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(w.max_abs() > 0.9 * limit);
    }

    #[test]
    fn bound_gradients_line_up_with_slots() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_rows(&[[1.0, 2.0]])).unwrap();
        p.insert("unused", Tensor::zeros(1, 1)).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let l = tape.sum_all(bound.node(0));
        let g = tape.backward(l).unwrap();
        let g = p.collect_grads(&bound, g);
        assert_eq!(g.get(0).unwrap(), &Tensor::filled(1, 2, 1.0));
        assert!(g.get(1).is_none());
    }
}
