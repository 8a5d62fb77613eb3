// `!(x > 0.0)` is used on purpose to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapt;
pub mod autograd;
pub mod checkpoint;
pub mod degradation;
pub mod error;
pub mod image;
pub mod kernel_estim;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
