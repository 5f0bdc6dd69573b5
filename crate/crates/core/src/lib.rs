//! Learned-optimization laboratory.
//!
//! Contains the Optimus learned optimizer (a per-parameter MLP step
//! preconditioned by a matrix that a transformer stack updates with rank-one
//! terms), its Adafactor-MLP predecessor, classical baselines, persistent
//! evolution strategies meta-training, and the benchmark metrics used to
//! compare them.

pub mod archive;
pub mod baselines;
pub mod bench;
pub mod error;
pub mod features;
pub mod metatrain;
pub mod nnet;
pub mod optimus;
pub mod rng;
pub mod testfuncs;
pub mod trajectory;

pub use error::{Error, Result};
pub use testfuncs::{FunctionId, ObjectiveInstance};
