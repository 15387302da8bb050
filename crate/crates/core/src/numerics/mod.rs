//! Tensor arithmetic and the reverse-mode gradient engine.

mod tape;
mod tensor;

pub use tape::{gaussian_log_density, Gradients, Tape, Var};
pub use tensor::{Activation, Tensor, LAYER_NORM_EPS};
