// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod codec;
pub mod error;
pub mod net;
pub mod numerics;
pub mod theory;
pub mod train;
pub mod world;

pub use error::{LensError, Result};
pub use numerics::{RngState, Tensor};
