//! Dense tensors, reverse-mode differentiation, and AdamW.

pub mod checkpoint;
mod gradcheck;
mod optim;
mod param;
mod scalar;
pub(crate) mod tape;
mod tensor;

pub use gradcheck::{finite_diff_coords, finite_diff_grad, relative_error};
pub use optim::{adamw_step, AdamW, AdamWConfig, Moments, StepOutcome};
pub use param::{ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Loss of a single logit vector, `-log softmax(logits)[target]`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, target: usize) -> crate::Result<S> {
    let mut tape = Tape::new();
    let row = logits.clone().reshape(&[1, logits.numel()])?;
    let x = tape.leaf(row, false);
    let loss = tape.cross_entropy(x, &[Some(target)])?;
    Ok(tape.value(loss).item())
}
