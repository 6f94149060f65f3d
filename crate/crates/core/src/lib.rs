//! Next-scale autoregressive image super-resolution at desk scale.
//!
//! A residual multi-scale VQ tokenizer turns images into token pyramids, a
//! block-causal transformer predicts each scale from the coarser ones with the
//! encoded LR image as a prefix, and a small diffusion MLP restores the
//! continuous residual the codebook cannot represent.

pub mod arm;
pub mod data;
pub mod error;
pub mod guidance;
pub mod pipeline;
pub mod refiner;
pub mod sarope;
pub mod schedule;
pub mod tokenizer;

pub use error::{Result, VarsrError};
