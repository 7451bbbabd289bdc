pub mod apam;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod priors;
pub mod roi;
pub mod training;

pub use error::{Error, Result};
