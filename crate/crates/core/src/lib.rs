#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapters;
pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod importance;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod slt;
pub mod sparsity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Matrix;
