//! Composite restoration loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, PadMode, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::train::metrics::{ssim_var, MSE_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Early,
    Late,
}

/// Weights of the L1, PSNR, SSIM and perceptual terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub stage: Stage,
}

impl LossWeights {
    pub const EARLY: LossWeights = LossWeights { l1: 1.0, psnr: 0.2, ssim: 0.2, perceptual: 1.0, stage: Stage::Early };
    pub const LATE: LossWeights = LossWeights { l1: 0.0, psnr: 0.2, ssim: 0.1, perceptual: 1.0, stage: Stage::Late };

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Early => Self::EARLY,
            Stage::Late => Self::LATE,
        }
    }

    /// Early weights before `switch * total_steps`, late weights from there on.
    pub fn at_step(step: u64, total_steps: u64, switch: f64) -> Self {
        let boundary = (switch * total_steps as f64).round() as u64;
        Self::for_stage(if step < boundary { Stage::Early } else { Stage::Late })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l1, self.psnr, self.ssim, self.perceptual]
    }
}

pub const PERCEPTUAL_SEED: u64 = 0x5eed_f00d;
pub const PERCEPTUAL_WIDTHS: [usize; 4] = [3, 8, 16, 32];

/// Frozen random 3x3 conv pyramid: each stage is conv, ReLU, and the next
/// stage starts after a 2x average pool.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    weights: Vec<Tensor<f32>>,
}

impl Default for PerceptualNet {
    fn default() -> Self {
        PerceptualNet::new(PERCEPTUAL_SEED)
    }
}

impl PerceptualNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = PERCEPTUAL_WIDTHS
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                Tensor::from_fn([cout, cin, 3, 3], |_| rng.gen_range(-bound..bound) as f32)
            })
            .collect();
        PerceptualNet { weights }
    }

    /// Frozen stage weights `[out, in, 3, 3]`.
    pub fn weights(&self) -> &[Tensor<f32>] {
        &self.weights
    }

    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    pub fn features<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let mut out = Vec::with_capacity(self.weights.len());
        let mut cur = x.clone();
        for (i, w) in self.weights.iter().enumerate() {
            if i > 0 {
                let &[_, _, h, w] = cur.shape() else { unreachable!("conv keeps rank 4") };
                if h < 2 || w < 2 {
                    break;
                }
                cur = cur.crop(0, 0, h - h % 2, w - w % 2)?.avg_pool2()?;
            }
            cur = ctx.relu(&cur.conv2d(&Var::constant(w.cast()), None, PadMode::Reflect, 1)?);
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Mean over stages of the mean absolute feature difference.
    pub fn distance<T: Real>(&self, ctx: &Ctx<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let fa = self.features(ctx, a)?;
        let fb = self.features(ctx, b)?;
        let n = T::lit(fa.len() as f64);
        let mut acc: Option<Var<T>> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = ctx.abs(&x.sub(y)?).mean();
            acc = Some(match acc {
                None => d,
                Some(s) => s.add(&d)?,
            });
        }
        Ok(acc.expect("at least one stage").scale(T::one() / n))
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub total: f64,
}

pub fn l1_term<T: Real>(ctx: &Ctx<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    Ok(ctx.abs(&a.sub(b)?).mean())
}

/// `-psnr / 40 = 0.25 * log10(max(mse, floor))`.
pub fn psnr_term<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let mse = a.sub(b)?.square().mean();
    Ok(mse.clamp_min(T::lit(MSE_FLOOR)).ln().scale(T::lit(0.25 / std::f64::consts::LN_10)))
}

pub fn ssim_term<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    Ok(ssim_var(a, b)?.neg().add_scalar(T::one()))
}

/// Weighted sum of the four terms for `[N,3,H,W]` restored/target pairs.
pub fn loss_total<T: Real>(
    ctx: &Ctx<T>,
    net: &PerceptualNet,
    restored: &Var<T>,
    target: &Var<T>,
    w: &LossWeights,
) -> Result<(Var<T>, LossTerms)> {
    if restored.shape() != target.shape() || restored.shape().len() != 4 {
        return Err(Error::shape("loss", format!("{:?} vs {:?}", restored.shape(), target.shape())));
    }
    let terms = [
        l1_term(ctx, restored, target)?,
        psnr_term(restored, target)?,
        ssim_term(restored, target)?,
        net.distance(ctx, restored, target)?,
    ];
    let mut total: Option<Var<T>> = None;
    for (t, &lam) in terms.iter().zip(&w.as_array()) {
        let part = t.scale(T::lit(lam));
        total = Some(match total {
            None => part,
            Some(s) => s.add(&part)?,
        });
    }
    let total = total.expect("four terms");
    let v = |t: &Var<T>| t.value().item().as_f64();
    let report = LossTerms { l1: v(&terms[0]), psnr: v(&terms[1]), ssim: v(&terms[2]), perceptual: v(&terms[3]), total: v(&total) };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;

    fn var(shape: [usize; 4], f: impl FnMut(usize) -> f64) -> Var<f64> {
        Var::constant(Tensor::from_fn(shape, f))
    }

    #[test]
    fn identical_inputs_early_total() {
        let ctx = Ctx::<f64>::bare(Mode::Train);
        let x = var([1, 3, 8, 8], |i| ((i * 7) % 11) as f64 / 10.0);
        let (_, t) = loss_total(&ctx, &PerceptualNet::default(), &x, &x, &LossWeights::EARLY).unwrap();
        assert_eq!((t.l1, t.ssim, t.perceptual), (0.0, 0.0, 0.0));
        assert!((t.psnr + 2.5).abs() < 1e-12);
        assert!((t.total + 0.5).abs() < 1e-12);
    }

    #[test]
    fn stage_switch() {
        assert_eq!(LossWeights::at_step(59, 100, 0.6).stage, Stage::Early);
        assert_eq!(LossWeights::at_step(60, 100, 0.6).stage, Stage::Late);
    }

    #[test]
    fn perceptual_is_frozen_and_seeded() {
        let a = PerceptualNet::new(3);
        let b = PerceptualNet::new(3);
        assert_eq!(a.weights, b.weights);
        assert_ne!(a.weights, PerceptualNet::new(4).weights);
    }

    #[test]
    fn odd_sizes_accepted() {
        let ctx = Ctx::<f64>::bare(Mode::Train);
        let a = var([1, 3, 5, 7], |i| (i % 5) as f64 / 5.0);
        let b = var([1, 3, 5, 7], |i| (i % 3) as f64 / 3.0);
        let d = PerceptualNet::default().distance(&ctx, &a, &b).unwrap();
        assert!(d.value().item() > 0.0);
    }
}
