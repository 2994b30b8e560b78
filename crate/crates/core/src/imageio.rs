//! 8-bit RGB PNG import and export for `[3,H,W]` tensors in `[0,1]`.

use std::path::Path;

use image::{ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;

pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Quantizes with rounding after clamping to `[0,1]`.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[3, h, w] = t.shape() else {
        return Err(Error::shape("png", format!("expected [3,H,W], got {:?}", t.shape())));
    };
    let d = t.data();
    let mut raw = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for c in 0..3 {
            raw[p * 3 + c] = (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"))
}

pub fn save_png(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let img = tensor_to_rgb(t)?;
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image { path: path.display().to_string(), detail: e.to_string() })?;
    fsutil::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_on_the_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = Tensor::from_fn([3, 5, 4], |i| ((i * 37) % 256) as f32 / 255.0);
        save_png(&p, &t).unwrap();
        assert_eq!(load_png(&p).unwrap(), t);
    }
}
