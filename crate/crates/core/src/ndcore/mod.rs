//! Dense `f64` tensors with a reverse-mode tape.

pub mod gradcheck;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;


pub use optim::{Adam, AdamConfig};
pub use rng::{RngState, SeededRng};
pub use tape::{Boundary, Gradients, Tape, Var};
pub use tensor::Tensor;
