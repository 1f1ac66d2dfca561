//! Unsourced random access over a block-fading multi-antenna channel with
//! index-modulated ALOHA.
pub mod analysis;
pub mod channel;
pub mod codebook;
pub mod config;
pub mod decoder;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod scd;

pub use error::{Error, Result};
