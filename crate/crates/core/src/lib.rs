//! Layer-tapped transformer forecaster.
//!
//! A univariate window is instance-normalized, cut into overlapping patches
//! and run through a small pre-norm transformer. A shallow hidden state feeds
//! a local mixer, the deepest one a global mixer, and their sum is projected
//! to the forecast horizon. Every gradient is derived by hand.

pub mod backbone;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod mixers;
pub mod model;
pub mod numerics;
pub mod preprocess;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorKind, Result};
