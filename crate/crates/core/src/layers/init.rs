use rand::Rng;

use crate::numerics::{Graph, Tensor, Var};

/// Whether bound parameters take part in backpropagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Trainable,
    Frozen,
}

pub(crate) fn bind(g: &mut Graph, t: &Tensor, mode: Bind) -> Var {
    match mode {
        Bind::Trainable => g.leaf(t.clone()),
        Bind::Frozen => g.constant(t.clone()),
    }
}

/// Glorot-uniform matrix in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

pub fn zeros_vec(n: usize) -> Tensor {
    Tensor::zeros(&[n])
}

pub fn ones_vec(n: usize) -> Tensor {
    Tensor::filled(&[n], 1.0)
}
