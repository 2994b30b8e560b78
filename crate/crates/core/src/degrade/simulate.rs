use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::psf::{Psf, PsfKind, PsfParams};
use crate::autograd::{conv2d_forward, PadMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradeModel {
    /// Scaled blur plus noise, clipped to `[0,1]`.
    #[default]
    Simple,
    /// Blur plus noise on a high-dynamic-range scene, clipped and tone mapped.
    Hdr,
}

/// Point spread function used when generating datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsfSpec {
    pub kind: PsfKind,
    pub size: usize,
    pub params: PsfParams,
}

impl Default for PsfSpec {
    fn default() -> Self {
        PsfSpec { kind: PsfKind::AiryLike, size: 9, params: PsfParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeParams {
    pub gamma: f64,
    pub noise_sigma_read: f64,
    pub noise_sigma_shot: f64,
    pub model: DegradeModel,
    pub tone_c: f64,
    pub clip_max: f64,
    pub seed: u64,
    pub psf: PsfSpec,
    /// Quantization threshold of the built-in segmenter used for dataset masks.
    pub seg_threshold: f64,
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            gamma: 0.8,
            noise_sigma_read: 0.01,
            noise_sigma_shot: 0.02,
            model: DegradeModel::Simple,
            tone_c: 4.0,
            clip_max: 4.0,
            seed: 0,
            psf: PsfSpec::default(),
            seg_threshold: 0.25,
        }
    }
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("degrade.gamma = {} must lie in (0, 1]", self.gamma)));
        }
        if !(self.noise_sigma_read >= 0.0 && self.noise_sigma_shot >= 0.0) {
            return Err(Error::Config("degrade noise sigmas must be non-negative".into()));
        }
        if !(self.tone_c > 0.0) || !(self.clip_max > 0.0) {
            return Err(Error::Config("degrade.tone_c and degrade.clip_max must be positive".into()));
        }
        if !(self.seg_threshold > 0.0 && self.seg_threshold <= 1.0) {
            return Err(Error::Config(format!("degrade.seg_threshold = {} must lie in (0, 1]", self.seg_threshold)));
        }
        Ok(())
    }

    /// Same parameters with no noise.
    pub fn noiseless(&self) -> Self {
        DegradeParams { noise_sigma_read: 0.0, noise_sigma_shot: 0.0, ..self.clone() }
    }
}

/// Extended Reinhard curve `x (1 + x / c^2) / (1 + x)`.
pub fn tone_map(x: f64, c: f64) -> f64 {
    x * (1.0 + x / (c * c)) / (1.0 + x)
}

fn check_image(op: &'static str, x: &Tensor<f32>) -> Result<(usize, usize)> {
    match x.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(Error::shape(op, format!("expected [3,H,W], got {:?}", s))),
    }
}

/// Per-channel circular convolution of a `[3,H,W]` image.
pub fn blur_circular(x: &Tensor<f32>, psf: &Psf) -> Result<Tensor<f32>> {
    let (h, w) = check_image("blur", x)?;
    let input = x.reshape([1, 3, h, w])?;
    let out = conv2d_forward(&input, &psf.conv_weight(), None, PadMode::Circular, 3)?;
    out.reshape([3, h, w])
}

/// Adds `N(0, read^2 + shot^2 * signal)` per pixel. The noise field is a
/// pure function of `seed` and the image size.
fn add_noise(signal: &mut Tensor<f32>, p: &DegradeParams, seed: u64) {
    if p.noise_sigma_read == 0.0 && p.noise_sigma_shot == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r2, s2) = (p.noise_sigma_read.powi(2), p.noise_sigma_shot.powi(2));
    for v in signal.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        let sd = (r2 + s2 * (*v as f64).max(0.0)).sqrt();
        *v = (*v as f64 + sd * z) as f32;
    }
}

/// `clip((gamma X) * k + n, 0, 1)` with circular convolution.
pub fn degrade_simple(clean: &Tensor<f32>, psf: &Psf, p: &DegradeParams) -> Result<Tensor<f32>> {
    check_image("degrade_simple", clean)?;
    let gamma = p.gamma as f32;
    let scaled = if gamma == 1.0 { clean.clone() } else { clean.map(|v| gamma * v) };
    let mut y = blur_circular(&scaled, psf)?;
    add_noise(&mut y, p, p.seed);
    Ok(y.map(|v| v.clamp(0.0, 1.0)))
}

/// `tone(clip(X * k + n, 0, clip_max))`, then clamped to `[0,1]`; the tone
/// curve only stays below 1 up to `x = tone_c`.
pub fn degrade_hdr(clean_hdr: &Tensor<f32>, psf: &Psf, p: &DegradeParams) -> Result<Tensor<f32>> {
    check_image("degrade_hdr", clean_hdr)?;
    if clean_hdr.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("degrade_hdr", "scene radiance must be non-negative"));
    }
    let mut y = blur_circular(clean_hdr, psf)?;
    add_noise(&mut y, p, p.seed);
    Ok(y.map(|v| {
        let x = (v as f64).clamp(0.0, p.clip_max);
        tone_map(x, p.tone_c).clamp(0.0, 1.0) as f32
    }))
}

/// Ground truth for an HDR scene: the same clip and tone curve without
/// blur or noise.
pub fn hdr_reference(clean_hdr: &Tensor<f32>, p: &DegradeParams) -> Tensor<f32> {
    clean_hdr.map(|v| tone_map((v as f64).clamp(0.0, p.clip_max), p.tone_c).clamp(0.0, 1.0) as f32)
}
