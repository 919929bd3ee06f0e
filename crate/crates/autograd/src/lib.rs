//! Minimal dense `f64` tensor engine with tape-based reverse-mode
//! differentiation.
//!
//! The op set covers what small attention/MLP/normalisation models need:
//! 2-D products, row-wise softmax and layer norm, elementwise activations,
//! L1/L2 reductions, row/column slicing and concatenation, and a few
//! spatial helpers (3×3 unfold, 2×2 pooling, nearest upsampling) for
//! feature maps stored as `[h·w × channels]`.
//!
//! ```
//! use autograd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(), true);
//! let loss = x.square().unwrap().sum().unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).data(), &[2.0, 4.0]);
//! ```

mod check;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_params};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub fn matmul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.matmul(b)
}

pub fn softmax_lastdim(x: Var<'_>) -> Result<Var<'_>> {
    x.softmax()
}

pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
    x.layer_norm(gain, bias, eps)
}

pub fn mean_abs_diff<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.mean_abs_diff(b)
}

pub fn backward(loss: Var<'_>) -> Result<()> {
    loss.tape().backward(loss)
}

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
