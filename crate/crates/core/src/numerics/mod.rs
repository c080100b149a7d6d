//! Dense tensors and reverse-mode differentiation in double precision.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, sampled_gradient_check, FD_EPS};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Global L2 norm over a set of gradient tensors.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    grads.into_iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::invalid(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(grads.iter());
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    Ok(norm)
}
