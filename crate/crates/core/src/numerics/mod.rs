//! Dense tensors, a sparse constant matrix type, and the differentiation
//! tape the model is built on.

mod gradcheck;
mod sparse;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, DENOMINATOR_FLOOR};
pub use sparse::CsrMatrix;
pub use tape::{softmax, Tape, Var};
pub use tensor::Tensor;
