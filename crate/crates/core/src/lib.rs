//! Hierarchical transformer encoders for dialog response generation.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autograd`] provide
//! 64-bit dense math with reverse-mode gradients, [`masking`] derives the
//! utterance and context attention masks from a dialog layout, [`encoder`]
//! runs a transformer encoder under that mask schedule, and [`models`]
//! builds the full encoder-decoder variants. [`corpus`], [`decoding`] and
//! [`metrics`] cover data, generation and evaluation; [`cli`] ties them
//! together.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod decoding;
pub mod encoder;
pub mod equiv;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
