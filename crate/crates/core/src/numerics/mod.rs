//! Dense `f64` tensors and a tape for reverse-mode differentiation over the
//! fixed primitive set the transformer needs.

mod gemm;
mod tape;
mod tensor;

pub use tape::{log_softmax, softmax_rows, CeTarget, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

use crate::error::Result;

/// Untaped matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}
