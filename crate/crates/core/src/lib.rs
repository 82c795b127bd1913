//! Partial video domain adaptation on frame-feature sequences: a small
//! reverse-mode autodiff core, the temporal attentive network heads, class
//! filtration, the training objectives and an experiment harness.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod filtration;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use error::{Error, Result};
