//! Prompt-ensemble context optimization for a frozen transformer text encoder.
//!
//! `D` learnable prompts of `N` context vectors each are fed, together with
//! every class name, through a frozen text encoder. Per-class features are
//! averaged over prompts and compared with image features through a
//! temperature-scaled cosine softmax. Only the context vectors train.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod numerics;
pub mod prompt;
pub mod trainer;

pub use error::{Error, Result};
