//! Segmentation masks, the colored segmentation map and the multi-scale
//! modulation pyramid derived from it.

mod guidance;
mod masks;
mod naive;

pub use guidance::{Sgft, SegGuidance, SegPyramid};
pub use masks::{decode_rle, encode_rle, MaskSet, MaskSource, RleMask};
pub use naive::{label_components, merge_small, naive_segment, MIN_COMPONENT};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `alpha * img + (1 - alpha) * colors`, where each mask paints its region
/// with the per-channel mean of `img` under it. Pixels covered by several
/// masks take the average of their colors; uncovered pixels get none.
pub fn compose_seg_map(img: &Tensor<f32>, masks: &MaskSet, alpha: f64) -> Result<Tensor<f32>> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::shape("compose_seg_map", format!("expected [3,H,W], got {:?}", img.shape())));
    };
    if (masks.height, masks.width) != (h, w) {
        return Err(Error::shape(
            "compose_seg_map",
            format!("masks are {}x{}, image is {}x{}", masks.height, masks.width, h, w),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("compose_seg_map", format!("alpha {} outside [0, 1]", alpha)));
    }
    if alpha == 1.0 {
        return Ok(img.clone());
    }
    let hw = h * w;
    let d = img.data();
    let mut color_sum = vec![0.0f64; 3 * hw];
    let mut cover = vec![0u32; hw];
    for m in &masks.masks {
        let md = m.data();
        let area = md.iter().filter(|&&v| v != 0.0).count();
        if area == 0 {
            continue;
        }
        let mut mean = [0.0f64; 3];
        for (c, mc) in mean.iter_mut().enumerate() {
            let s: f64 = (0..hw).filter(|&p| md[p] != 0.0).map(|p| d[c * hw + p] as f64).sum();
            *mc = s / area as f64;
        }
        for p in (0..hw).filter(|&p| md[p] != 0.0) {
            cover[p] += 1;
            for c in 0..3 {
                color_sum[c * hw + p] += mean[c];
            }
        }
    }
    let out = Tensor::from_fn([3, h, w], |i| {
        let p = i % hw;
        let color = if cover[p] > 0 { color_sum[i] / cover[p] as f64 } else { 0.0 };
        (alpha * d[i] as f64 + (1.0 - alpha) * color).clamp(0.0, 1.0) as f32
    });
    Ok(out)
}
