//! Metric learning with a contrastive self-supervised auxiliary loss for
//! music similarity retrieval and auto-tagging.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod inference;
pub mod losses;
pub mod training;

pub use audio::AudioBuffer;
pub use error::{Error, Result};
