//! Dense `f32` tensors, a dynamic differentiation tape and the Adam
//! optimizer.
//!
//! ```
//! use rcad_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let p = g.leaf(Tensor::scalar(3.0), true);
//! let sq = g.mul(p, p).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap(), &[6.0]);
//! ```

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod par;
mod param;
mod tensor;

pub use adam::Adam;
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use par::Exec;
pub use param::{Binding, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Gradient-magnitude map of a `…×H×W` tensor outside of any graph.
pub fn spatial_gradient(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 || s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
        return Err(TensorError::Dimension {
            op: "spatial_gradient",
            detail: format!("needs H, W >= 2, got {s:?}"),
        });
    }
    Ok(graph::spatial_gradient_forward(t))
}

/// Logistic function with an overflow-safe branch for negative inputs.
pub fn sigmoid(v: f32) -> f32 {
    graph::sigmoid(v)
}
