//! Dense convolutional networks trained with weighted and multi-label binary
//! cross-entropy, class activation maps for localization, and a multi-rater
//! F1 evaluation protocol with bootstrap confidence intervals.

pub mod cam;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, ParseErrorKind, Result};
