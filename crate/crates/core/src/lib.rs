//! Simulator for sequential rank-one edits of a linear key-value memory.
//!
//! The crate applies closed-form Locate-and-Edit updates to a weight matrix,
//! optionally rescales target values with Norm-Anchor Scaling, records the
//! weight-norm trajectory and checks it against the exact norm recursion and
//! its closed-form predictions.

pub mod dynamics;
pub mod editor;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod nas;
pub mod streams;

pub use error::{Error, Result};
