//! Hierarchical random-effects logistic models for hospital outcome rates.

pub mod data;
pub mod design;
pub mod error;
pub mod gibbs;
pub mod hash;
pub mod inference;
pub mod linalg;
pub mod matching;
pub mod model;
pub mod pg;
pub mod rng;
pub mod smooth;
pub mod spline;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use rng::RngStream;
