//! Semi-supervised text classification with a `(k+1)`-class adversarial
//! classifier and a reward-driven text generator.

pub mod checkpoint;
pub mod classifier;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod nn;
pub mod parallel;
pub mod reward;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
