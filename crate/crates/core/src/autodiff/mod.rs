//! Dense `f64` tensors with a reverse-mode tape, the Adam optimizer and the
//! `AWM1` checkpoint container.

mod adam;
mod checkpoint;
mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
