// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod data;
pub mod encoding;
pub mod error;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
