//! Dense `f64` tensors with a dynamic reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck, REL_ERR_FLOOR};
pub use tape::{cost, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;
