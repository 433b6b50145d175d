//! Dense tensor math with reverse-mode differentiation, the SGD/Adam
//! optimizers, and a finite-difference gradient-check oracle.
//!
//! All computation runs in float64; file formats elsewhere in the crate
//! store float32. Tensors are single-thread values: a recorded tape belongs
//! to the thread that built it.

pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use gradcheck::{grad_check, NumericsError};
pub use ops::{
    add, add_bias, concat_last, concat_rows, cross_entropy_loss, dropout, embedding_lookup,
    layer_norm, matmul, matmul_nt, mse_loss, mul_scalar, relu, reshaped, slice_last, slice_rows,
    softmax_last, sum_all,
};
pub use optim::{adam_step, sgd_step, zero_grads, AdamState, Parameter};
pub use tensor::{backward, is_grad_enabled, no_grad, Tensor};
