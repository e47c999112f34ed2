//! A small reverse-mode gradient engine over the tensor primitives the
//! model needs, plus the Adam optimizer.

mod adam;
pub mod check;
mod tape;

pub use adam::{Adam, AdamStep};
pub use tape::{Gradients, NodeId, Tape, Tensor};
