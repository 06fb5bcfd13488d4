//! Dense-array math, reverse-mode differentiation, probability helpers,
//! Adam and the seeded random source everything else is built on.

mod adam;
mod prob;
mod rng;
pub(crate) mod tape;
mod tensor;

pub use adam::{adam_update, Adam, AdamMoments};
pub use prob::{
    categorical_kl, gaussian_log_density, log_softmax, log_softmax_rows, softmax, softmax_rows,
};
pub use rng::RngState;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
