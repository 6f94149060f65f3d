use log::warn;

use super::image::{resize_bicubic, ImageBuffer};
use crate::error::{Result, VarsrError};

/// Ratio between the resized short side and the crop size.
pub const RESIZE_RATIO: f64 = 1.25;

/// Bicubic resize so the short side is `1.25 · target`, then a centred
/// `target × target` crop.
///
/// Images whose short side is below `target / 1.25` would need more than a
/// 1.5625× enlargement and are rejected.
pub fn preprocess(img: &ImageBuffer, target: usize) -> Result<ImageBuffer> {
    let (h, w) = img.dims();
    let short = h.min(w) as f64;
    if target == 0 || short < target as f64 / RESIZE_RATIO {
        warn!("rejecting {h}x{w} image for target {target}");
        return Err(VarsrError::ImageTooSmall {
            height: h,
            width: w,
            target,
        });
    }
    let side = (target as f64 * RESIZE_RATIO).round() as usize;
    let (nh, nw) = if h <= w {
        (side, ((w as f64 * side as f64 / h as f64).round() as usize).max(side))
    } else {
        (((h as f64 * side as f64 / w as f64).round() as usize).max(side), side)
    };
    let mut resized = if (nh, nw) == (h, w) {
        img.clone()
    } else {
        resize_bicubic(img, nh, nw)?
    };
    resized.clamp01();
    resized.crop((nh - target) / 2, (nw - target) / 2, target, target)
}
