//! Reverse-mode differentiation, optimizer and checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_store, GradCheckReport};
pub use optim::{OptimizerState, Schedule};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

/// Standardizes a kernel per output channel (last axis) outside of a tape.
pub fn weight_standardize<T: Real>(kernel: &Tensor<T>, eps: f64) -> Tensor<T> {
    let mut tape = Tape::new();
    let w = tape.input(kernel.clone());
    let y = tape
        .weight_standardize(w, eps)
        .expect("standardization of a finite kernel is finite");
    tape.value(y).clone()
}
