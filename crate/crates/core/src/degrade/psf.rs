use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsfKind {
    Gaussian,
    AiryLike,
    TwoLobe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsfParams {
    /// Width of the central core, in pixels.
    pub sigma: f64,
    /// Radius of the diffraction ring for the red channel; green and blue
    /// rings shrink with wavelength.
    pub ring_radius: f64,
    /// Peak of the ring (or of each side lobe) relative to the core peak.
    pub side_weight: f64,
    /// Horizontal offset of the two side lobes.
    pub lobe_offset: f64,
}

impl Default for PsfParams {
    fn default() -> Self {
        PsfParams { sigma: 1.0, ring_radius: 3.0, side_weight: 0.15, lobe_offset: 3.0 }
    }
}

/// Relative wavelength of the R, G and B channels.
const WAVELENGTH: [f64; 3] = [1.0, 0.85, 0.72];

/// A normalized blur kernel per color channel, shape `[3, size, size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Psf {
    kernel: Tensor<f32>,
}

impl Psf {
    pub fn from_kernel(kernel: Tensor<f32>) -> Result<Self> {
        let &[3, kh, kw] = kernel.shape() else {
            return Err(Error::shape("psf", format!("kernel must be [3,k,k], got {:?}", kernel.shape())));
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid("psf", format!("kernel {}x{} must be square and odd", kh, kw)));
        }
        if kernel.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("psf", "entries must be finite and non-negative"));
        }
        for ch in kernel.data().chunks(kh * kw) {
            let s: f64 = ch.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::invalid("psf", format!("channel sums to {}, expected 1", s)));
            }
        }
        Ok(Psf { kernel })
    }

    /// Identity blur.
    pub fn delta(size: usize) -> Result<Self> {
        check_size(size)?;
        let c = size / 2;
        let kernel = Tensor::from_fn([3, size, size], |i| if i % (size * size) == c * size + c { 1.0 } else { 0.0 });
        Ok(Psf { kernel })
    }

    pub fn kernel(&self) -> &Tensor<f32> {
        &self.kernel
    }

    pub fn size(&self) -> usize {
        self.kernel.shape()[1]
    }

    /// Kernel laid out as depth-wise convolution weights `[3,1,k,k]`.
    pub fn conv_weight(&self) -> Tensor<f32> {
        let k = self.size();
        self.kernel.reshape([3, 1, k, k]).expect("psf layout")
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 3 || size % 2 == 0 {
        return Err(Error::invalid("synth_psf", format!("size {} must be odd and >= 3", size)));
    }
    Ok(())
}

fn gauss(r2: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return if r2 == 0.0 { 1.0 } else { 0.0 };
    }
    (-r2 / (2.0 * sigma * sigma)).exp()
}

/// Synthesizes a kernel; every channel is normalized to unit sum.
pub fn synth_psf(kind: PsfKind, size: usize, params: &PsfParams) -> Result<Psf> {
    check_size(size)?;
    if !(params.sigma >= 0.0) || params.side_weight < 0.0 {
        return Err(Error::invalid("synth_psf", "sigma and side_weight must be non-negative"));
    }
    let c = (size / 2) as f64;
    let mut data = Vec::with_capacity(3 * size * size);
    for lambda in WAVELENGTH {
        let mut ch = vec![0.0f64; size * size];
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 - c, x as f64 - c);
                let r2 = dx * dx + dy * dy;
                let core = gauss(r2, params.sigma);
                let side = match kind {
                    PsfKind::Gaussian => 0.0,
                    PsfKind::AiryLike => {
                        let ring = params.ring_radius * lambda;
                        let d = r2.sqrt() - ring;
                        params.side_weight * (-d * d / (2.0 * 0.5 * 0.5)).exp()
                    }
                    PsfKind::TwoLobe => {
                        let off = params.lobe_offset * lambda;
                        let lobe = |cx: f64| {
                            let ex = dx - cx;
                            (-(ex * ex + dy * dy) / (2.0 * 0.7 * 0.7)).exp()
                        };
                        params.side_weight * (lobe(off) + lobe(-off))
                    }
                };
                ch[y * size + x] = core + side;
            }
        }
        let s: f64 = ch.iter().sum();
        data.extend(ch.iter().map(|v| (v / s) as f32));
    }
    Ok(Psf { kernel: Tensor::from_vec([3, size, size], data) })
}
