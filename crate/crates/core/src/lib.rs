// Validators write `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cps;
pub mod encoder;
pub mod enrollment;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod prep;
pub mod seed;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
