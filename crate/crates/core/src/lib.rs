#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;

pub mod aggregate;
pub mod baselines;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grad;
pub mod linalg;
pub mod losses;
pub mod math;
pub mod model;
pub mod preprocess;
pub mod series;
pub mod synth;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
pub use series::*;
