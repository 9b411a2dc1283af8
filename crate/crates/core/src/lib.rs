// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod critic;
pub mod envs;
pub mod error;
pub mod net;
pub mod props;
pub mod quantile;

pub use error::{Error, Result};
