//! Persistent trainable parameters. Parameters live outside any tape; each forward
//! pass binds them as leaf tensors and pulls gradients back after `backward`.

use super::{numel, Tape, TensorId, TResult};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(numel(&shape), values.len(), "param shape/value mismatch");
        Self { name: name.into(), shape, values, grad: None }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::new(name, shape, vec![0.0; n])
    }

    /// Uniform init on (−scale, scale).
    pub fn uniform(name: impl Into<String>, shape: Vec<usize>, scale: f64, rng: &mut impl Rng) -> Self {
        let n = numel(&shape);
        let values = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        Self::new(name, shape, values)
    }

    /// Glorot-style init for a `[fan_in, fan_out]` weight matrix.
    pub fn glorot(name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(name, vec![fan_in, fan_out], scale, rng)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bind as a differentiable leaf on `tape`.
    pub fn leaf(&self, tape: &mut Tape) -> TResult<TensorId> {
        tape.tensor(&self.shape, self.values.clone(), true)
    }

    /// Bind as a constant (no gradient) leaf on `tape`.
    pub fn frozen_leaf(&self, tape: &mut Tape) -> TResult<TensorId> {
        tape.tensor(&self.shape, self.values.clone(), false)
    }

    /// Copy the tape gradient of `id` into this parameter, adding to any gradient
    /// already stored. A leaf the loss never reached contributes zeros.
    pub fn pull_grad(&mut self, tape: &Tape, id: TensorId) {
        let incoming = tape.grad(id);
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.values.len()]);
        if let Some(inc) = incoming {
            for (gi, &v) in g.iter_mut().zip(inc) {
                *gi += v;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
