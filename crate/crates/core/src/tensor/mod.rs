//! Dense matrices and the differentiation tape used to train adapters and
//! compute gradient-based importance.

mod matrix;
mod tape;

pub(crate) use matrix::{read_exact, read_f64, read_u32, read_u64, read_u8};
pub use matrix::{Matrix, MAGIC, MATRIX_FORMAT_VERSION};
pub use tape::{gelu, gelu_derivative, Gradients, NodeId, Reduction, Tape};
