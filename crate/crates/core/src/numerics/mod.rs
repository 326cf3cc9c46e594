//! Dense matrices, MLP blocks with reverse mode, AdamW and a
//! finite-difference gradient oracle.

mod adamw;
mod gradcheck;
mod matrix;
mod mlp;
mod param;

pub use adamw::{adamw_step, AdamW};
pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use matrix::Matrix;
pub use mlp::{mish, mish_grad, sigmoid, softplus, Mlp, MlpSpec, MlpTape, LAYER_NORM_EPS};
pub use param::{ParamBlock, Parameterized};

/// Row-wise softmax over contiguous groups of `width` columns.
pub fn grouped_softmax<T: crate::Scalar>(logits: &Matrix<T>, width: usize) -> Matrix<T> {
    let mut out = logits.clone();
    for group in out.as_mut_slice().chunks_exact_mut(width) {
        softmax_in_place(group);
    }
    out
}

pub fn softmax_in_place<T: crate::Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
