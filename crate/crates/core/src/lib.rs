#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod dsp;
pub mod error;
pub mod eval;
pub mod fbcca;
pub mod forest;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod spectral;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
