//! Dataset files, checkpoints, reports and leave-one-subject-out runs on top
//! of `fbssvep_core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dataio;
pub mod desk;
pub mod error;
pub mod experiment;
pub mod report;

pub use error::{Error, Result};
