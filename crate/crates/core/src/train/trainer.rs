//! Seeded, resumable training loop and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Mode, Var};
use crate::degrade::DatasetSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seg::MaskSet;
use crate::tensor::Tensor;
use crate::train::augment::augment;
use crate::train::loss::{loss_total, LossTerms, LossWeights, PerceptualNet};
use crate::train::metrics::{psnr, ssim};
use crate::train::optim::{cyclic_lr, Adam};

pub const CSV_HEADER: &str = "step,lr,l1,psnr_term,ssim_term,perc_term,total";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    /// Fraction of `steps` after which the late loss weights apply.
    pub stage_switch: f64,
    pub lr_lo: f64,
    pub lr_hi: f64,
    /// Length of one learning-rate cycle in steps.
    pub lr_period: u64,
    pub augment: bool,
    /// Write a checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 4,
            patch: 64,
            seed: 0,
            stage_switch: 0.6,
            lr_lo: 1e-5,
            lr_hi: 1e-4,
            lr_period: 500,
            augment: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if self.patch == 0 || self.patch % crate::model::ALIGN != 0 {
            return Err(Error::Config(format!("train.patch = {} must be a positive multiple of {}", self.patch, crate::model::ALIGN)));
        }
        if !(0.0..=1.0).contains(&self.stage_switch) {
            return Err(Error::Config(format!("train.stage_switch = {} outside [0, 1]", self.stage_switch)));
        }
        if !(self.lr_lo > 0.0 && self.lr_lo <= self.lr_hi && self.lr_hi.is_finite()) {
            return Err(Error::Config(format!("train learning rates need 0 < lr_lo <= lr_hi, got {} and {}", self.lr_lo, self.lr_hi)));
        }
        Ok(())
    }

    pub fn lr(&self, step: u64) -> f64 {
        cyclic_lr(step, self.lr_lo, self.lr_hi, self.lr_period)
    }

    pub fn weights(&self, step: u64) -> LossWeights {
        LossWeights::at_step(step, self.steps, self.stage_switch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub terms: LossTerms,
}

impl StepLog {
    /// Shortest round-trip formatting, so equal rows mean equal bits.
    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        format!("{},{},{},{},{},{},{}", self.step, self.lr, t.l1, t.psnr, t.ssim, t.perceptual, t.total)
    }
}

/// A stacked training batch.
pub struct Batch {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub masks: Vec<MaskSet>,
}

fn crop_chw(t: &Tensor<f32>, y: usize, x: usize, p: usize) -> Result<Tensor<f32>> {
    t.narrow(1, y, p)?.narrow(2, x, p)
}

fn crop_masks(m: &MaskSet, y: usize, x: usize, p: usize) -> Result<MaskSet> {
    let masks = m
        .masks
        .iter()
        .map(|t| t.narrow(0, y, p)?.narrow(1, x, p))
        .collect::<Result<Vec<_>>>()?;
    MaskSet::new(p, p, masks, m.source)
}

/// Batch for `step`: samples drawn with replacement, augmented, then
/// cropped, all from an RNG keyed by `(seed, step)`.
pub fn make_batch(data: &[DatasetSample], cfg: &TrainConfig, step: u64) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let p = cfg.patch;
    let (mut deg, mut cln, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch {
        let idx = rng.gen_range(0..data.len());
        let s = if cfg.augment { augment(&data[idx], &mut rng) } else { data[idx].clone() };
        let &[_, h, w] = s.clean.shape() else { unreachable!("samples are [3,H,W]") };
        if h < p || w < p {
            return Err(Error::invalid("train", format!("sample {} is {}x{}, smaller than patch {}", idx, h, w, p)));
        }
        let y = rng.gen_range(0..=h - p);
        let x = rng.gen_range(0..=w - p);
        deg.push(crop_chw(&s.degraded, y, x, p)?.reshape([1, 3, p, p])?);
        cln.push(crop_chw(&s.clean, y, x, p)?.reshape([1, 3, p, p])?);
        masks.push(crop_masks(&s.masks, y, x, p)?);
    }
    Ok(Batch {
        degraded: Tensor::concat(&deg.iter().collect::<Vec<_>>(), 0)?,
        clean: Tensor::concat(&cln.iter().collect::<Vec<_>>(), 0)?,
        masks,
    })
}

/// One optimizer step on `batch`.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    perc: &PerceptualNet,
    batch: &Batch,
    weights: &LossWeights,
    lr: f64,
) -> Result<LossTerms> {
    let grads = {
        let ctx = Ctx::<f32>::new(&model.store, Mode::Train);
        let out = model.forward(&ctx, &Var::constant(batch.degraded.clone()), &batch.masks)?;
        let (loss, terms) = loss_total(&ctx, perc, &out, &Var::constant(batch.clean.clone()), weights)?;
        if !terms.total.is_finite() {
            return Err(Error::invalid("train", format!("non-finite loss {}", terms.total)));
        }
        (loss.backward()?, terms)
    };
    adam.update(&mut model.store, &grads.0, lr)?;
    Ok(grads.1)
}

/// Runs steps `adam.step .. until` (capped at `cfg.steps`), calling
/// `on_step` after each one.
pub fn train(
    model: &mut Model,
    adam: &mut Adam,
    data: &[DatasetSample],
    cfg: &TrainConfig,
    until: Option<u64>,
    mut on_step: impl FnMut(&StepLog, &Model, &Adam) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let perc = PerceptualNet::default();
    let end = until.unwrap_or(cfg.steps).min(cfg.steps);
    while adam.step < end {
        let step = adam.step;
        let batch = make_batch(data, cfg, step)?;
        let lr = cfg.lr(step);
        let terms = train_step(model, adam, &perc, &batch, &cfg.weights(step), lr)?;
        on_step(&StepLog { step, lr, terms }, model, adam)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub n: usize,
    /// Degraded input against clean target.
    pub baseline_psnr_mean: f64,
    pub baseline_ssim_mean: f64,
    pub param_count: usize,
    pub base_width: usize,
}

/// Restores every sample at full size and averages the metrics.
pub fn evaluate(model: &Model, data: &[DatasetSample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("eval", "empty dataset"));
    }
    let mut acc = [0.0f64; 4];
    for s in data {
        let &[_, h, w] = s.degraded.shape() else { unreachable!("samples are [3,H,W]") };
        let out = model.restore(&s.degraded.reshape([1, 3, h, w])?, std::slice::from_ref(&s.masks))?.reshape([3, h, w])?;
        acc[0] += psnr(&out, &s.clean)?;
        acc[1] += ssim(&out, &s.clean)?;
        acc[2] += psnr(&s.degraded, &s.clean)?;
        acc[3] += ssim(&s.degraded, &s.clean)?;
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        psnr_mean: acc[0] / n,
        ssim_mean: acc[1] / n,
        n: data.len(),
        baseline_psnr_mean: acc[2] / n,
        baseline_ssim_mean: acc[3] / n,
        param_count: model.param_count(),
        base_width: model.cfg.base_width,
    })
}
