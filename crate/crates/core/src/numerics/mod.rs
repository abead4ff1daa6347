//! Dense tensors, reverse-mode autodiff, Adam and the checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod fd;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use checkpoint::{Checkpoint, Payload};
pub use fd::{finite_difference_gradient, relative_error};
pub use tape::{MixtureForward, Tape, Var};
pub use tensor::{sigmoid, Tensor};
