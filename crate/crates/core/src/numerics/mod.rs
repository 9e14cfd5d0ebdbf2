//! Dense tensors, a reverse-mode autodiff tape, and the Adam optimizer.
//!
//! All arithmetic is 64-bit. A [`Graph`] is single-threaded; the [`Tensor`]s
//! that parameterize a frozen model are plain data and can be shared freely.

mod adam;
pub mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{sigmoid_scalar, Graph, Var};
pub use tensor::Tensor;


/// Convenience wrappers evaluating one recorded op on plain tensors.
pub mod ops {
    use super::{Graph, Tensor};
    use crate::error::Result;

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }

    pub fn sigmoid(t: &Tensor) -> Tensor {
        t.map(super::sigmoid_scalar)
    }

    pub fn tanh_act(t: &Tensor) -> Tensor {
        t.map(f64::tanh)
    }

    pub fn relu(t: &Tensor) -> Tensor {
        t.map(|x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(m.clone());
        let out = g.softmax_rows(v)?;
        Ok(g.value(out).clone())
    }
}
