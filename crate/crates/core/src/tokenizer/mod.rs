//! Image tokenizer: conv autoencoder plus multi-scale residual quantizer.

pub mod codebook;
pub mod model;
pub mod quantize;
pub mod resample;
pub mod vae;

pub use codebook::{Codebook, EmaConfig};
pub use model::{Tokenizer, TokenizerConfig, TokenizerStepStats, TokenizerTrainer};
pub use quantize::{
    interpolate_tokens, quantize_pyramid, scale_dropout, Quantized, Quantizer, ScaleMask,
    TokenPyramid,
};
pub use vae::{stack_images, Vae, VaeConfig};
