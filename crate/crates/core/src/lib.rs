//! RadioMamba: a U-Net of hybrid selective-scan / depthwise-separable
//! convolution blocks for radio pathloss map construction, together with the
//! autodiff engine, losses, synthetic data and training loop it needs.

// `!(x > 0)` style guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod init;
pub mod kv;
pub mod loss;
pub mod metrics;
pub mod real;
pub mod rng;
pub mod scan2d;
pub mod ssm;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use real::Real;
