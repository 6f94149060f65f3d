//! Procedural corpus, LR synthesis, preprocessing, image I/O and metrics.

pub mod corpus;
pub mod degrade;
pub mod image;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod preprocess;

pub use corpus::generate_corpus;
pub use degrade::{degrade, label_quality, make_pair, DegradationParams, PairedSample, QualityLabel};
pub use image::{bicubic_upscale, gaussian_blur, resize_bicubic, ImageBuffer};
pub use io::{read_image, write_image};
pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use metrics::{psnr, ssim_y};
pub use preprocess::preprocess;
