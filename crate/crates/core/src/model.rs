//! The asymmetric U-net, its configuration and checkpoint persistence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttnConfig;
use crate::autograd::{Ctx, Mode, Var};
use crate::blocks::{DecoderBlock, EncoderBlock, LatentBlock, Refine};
use crate::container::{Container, Entry};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::layers::{Conv2d, Downsample, Upsample};
use crate::params::{ParamInit, ParamStore};
use crate::seg::{compose_seg_map, MaskSet, SegGuidance, SegPyramid};
use crate::tensor::{Real, Tensor};

/// Spatial sizes are padded to a multiple of this (four 2x reductions).
pub const ALIGN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_width: usize,
    pub enc_caab_depths: [usize; 4],
    pub enc_transformer_depths: [usize; 4],
    pub enc_heads: [usize; 4],
    pub latent_depth: usize,
    pub latent_heads: usize,
    /// Reconstruction modules per decoder, deepest first.
    pub dec_module_counts: [usize; 4],
    /// Heads per decoder, deepest first.
    pub dec_heads: [usize; 4],
    pub sparsity_ratio: f64,
    pub alpha: f64,
    pub expansion: usize,
    pub caab_reduction: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny()
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            base_width: 8,
            enc_caab_depths: [4, 6, 7, 8],
            enc_transformer_depths: [1, 1, 1, 1],
            enc_heads: [1, 2, 4, 8],
            latent_depth: 8,
            latent_heads: 16,
            dec_module_counts: [4, 3, 3, 2],
            dec_heads: [8, 4, 2, 1],
            sparsity_ratio: 0.67,
            alpha: 0.5,
            expansion: 2,
            caab_reduction: 4,
            init_seed: 0,
        }
    }

    /// Full-size preset; its width puts the parameter count near the
    /// published budget.
    pub fn paper() -> Self {
        ModelConfig { base_width: PAPER_BASE_WIDTH, ..ModelConfig::tiny() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset '{}' (expected tiny or paper)", other))),
        }
    }

    /// Stage widths `C1 * 2^i`, finest first.
    pub fn widths(&self) -> [usize; 4] {
        let c = self.base_width;
        [c, 2 * c, 4 * c, 8 * c]
    }

    pub fn latent_width(&self) -> usize {
        16 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("model.base_width must be positive".into()));
        }
        let w = self.widths();
        for i in 0..4 {
            if self.enc_heads[i] == 0 || w[i] % self.enc_heads[i] != 0 {
                return Err(Error::Config(format!("model.enc_heads[{}] = {} does not divide width {}", i, self.enc_heads[i], w[i])));
            }
            let dh = self.dec_heads[3 - i];
            if dh == 0 || w[i] % dh != 0 {
                return Err(Error::Config(format!("model.dec_heads[{}] = {} does not divide width {}", 3 - i, dh, w[i])));
            }
            if w[i] < self.caab_reduction {
                return Err(Error::Config(format!("width {} is below the caab reduction {}", w[i], self.caab_reduction)));
            }
        }
        if self.latent_heads == 0 || self.latent_width() % self.latent_heads != 0 {
            return Err(Error::Config(format!(
                "model.latent_heads = {} does not divide width {}",
                self.latent_heads,
                self.latent_width()
            )));
        }
        if !(self.sparsity_ratio > 0.0 && self.sparsity_ratio <= 1.0) {
            return Err(Error::Config(format!("model.sparsity_ratio = {} outside (0, 1]", self.sparsity_ratio)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("model.alpha = {} outside [0, 1]", self.alpha)));
        }
        if self.expansion == 0 || self.caab_reduction == 0 {
            return Err(Error::Config("model.expansion and model.caab_reduction must be positive".into()));
        }
        Ok(())
    }
}

pub const PAPER_BASE_WIDTH: usize = 10;

/// Encoder outputs waiting for their mirrored decoder.
#[derive(Debug)]
pub struct SkipCache<T: Real> {
    slots: Vec<Option<Var<T>>>,
}

impl<T: Real> SkipCache<T> {
    fn new(levels: usize) -> Self {
        SkipCache { slots: vec![None; levels] }
    }

    fn put(&mut self, level: usize, v: Var<T>) {
        self.slots[level] = Some(v);
    }

    /// Removes the skip of `level` (0 = finest).
    pub fn remove(&mut self, level: usize) -> Option<Var<T>> {
        self.slots.get_mut(level).and_then(Option::take)
    }

    pub fn take(&mut self, level: usize) -> Result<Var<T>> {
        self.remove(level).ok_or(Error::MissingSkip(level + 1))
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub usfe: Conv2d,
    pub pyramid: SegPyramid,
    pub encoders: Vec<EncoderBlock>,
    pub downs: Vec<Downsample>,
    pub latent: LatentBlock,
    pub ups: Vec<Upsample>,
    pub fuses: Vec<Conv2d>,
    /// Finest first.
    pub decoders: Vec<DecoderBlock>,
    pub refine: Refine,
}

impl Network {
    fn new(init: &mut ParamInit<'_>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths();
        let rho = cfg.sparsity_ratio;
        let usfe = Conv2d::new(&mut init.scope("usfe"), 3, w[0], 3, 1)?;
        let pyramid = SegPyramid::new(&mut init.scope("seg"), &w)?;
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for i in 0..4 {
            encoders.push(EncoderBlock::new(
                &mut init.scope(format!("enc{}", i + 1)),
                w[i],
                cfg.enc_caab_depths[i],
                cfg.enc_transformer_depths[i],
                AttnConfig::new(cfg.enc_heads[i], rho),
                cfg.expansion,
                cfg.caab_reduction,
            )?);
            downs.push(Downsample::new(&mut init.scope(format!("down{}", i + 1)), w[i])?);
        }
        let latent = LatentBlock::new(&mut init.scope("latent"), cfg.latent_width(), cfg.latent_depth, cfg.latent_heads, cfg.expansion)?;
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut decoders = Vec::new();
        for i in 0..4 {
            let deep = 3 - i;
            ups.push(Upsample::new(&mut init.scope(format!("up{}", i + 1)), 2 * w[i])?);
            fuses.push(Conv2d::pointwise(&mut init.scope(format!("fuse{}", i + 1)), 2 * w[i], w[i])?);
            decoders.push(DecoderBlock::new(
                &mut init.scope(format!("dec{}", i + 1)),
                w[i],
                cfg.dec_module_counts[deep],
                AttnConfig::new(cfg.dec_heads[deep], rho),
                cfg.expansion,
            )?);
        }
        let refine = Refine::new(&mut init.scope("refine"), &w)?;
        Ok(Network { usfe, pyramid, encoders, downs, latent, ups, fuses, decoders, refine })
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

fn padded(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let net = Network::new(&mut ParamInit::new(&mut store, &mut rng), cfg)?;
        Ok(Model { cfg: cfg.clone(), store, net })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Zeroes every residual output projection; the model becomes the
    /// identity map.
    pub fn zero_output_projections(&mut self) {
        self.store.zero_output_projections();
    }

    /// Segmentation map for each image of a batch, `[N,3,H,W]`.
    pub fn seg_map(&self, images: &Tensor<f32>, masks: &[MaskSet]) -> Result<Tensor<f32>> {
        let &[n, 3, h, w] = images.shape() else {
            return Err(Error::shape("forward", format!("expected [N,3,H,W], got {:?}", images.shape())));
        };
        if masks.len() != n {
            return Err(Error::shape("forward", format!("{} mask sets for a batch of {}", masks.len(), n)));
        }
        let mut maps = Vec::with_capacity(n);
        for (b, m) in masks.iter().enumerate() {
            let img = images.narrow(0, b, 1)?.reshape([3, h, w])?;
            maps.push(compose_seg_map(&img, m, self.cfg.alpha)?.reshape([1, 3, h, w])?);
        }
        Tensor::concat(&maps.iter().collect::<Vec<_>>(), 0)
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>, masks: &[MaskSet]) -> Result<Var<T>> {
        self.forward_with(ctx, x, masks, |_| {})
    }

    /// Forward pass with access to the skip cache between the encoder and
    /// decoder halves.
    pub fn forward_with<T: Real>(
        &self,
        ctx: &Ctx<T>,
        x: &Var<T>,
        masks: &[MaskSet],
        hook: impl FnOnce(&mut SkipCache<T>),
    ) -> Result<Var<T>> {
        let &[_, 3, h, w] = x.shape() else {
            return Err(Error::shape("forward", format!("expected [N,3,H,W], got {:?}", x.shape())));
        };
        let seg = self.seg_map(&x.value().cast(), masks)?;
        let (hp, wp) = (padded(h), padded(w));
        let xp = x.pad_reflect(hp - h, wp - w)?;
        let seg = Var::constant(seg.cast::<T>()).pad_reflect(hp - h, wp - w)?;
        let guide: SegGuidance<T> = self.net.pyramid.forward(ctx, &seg, self.cfg.alpha)?;

        let mut skips = SkipCache::new(4);
        let mut cur = self.net.usfe.forward(ctx, &xp)?;
        for i in 0..4 {
            let e = self.net.encoders[i].forward(ctx, &cur, &guide.scales[i])?;
            cur = self.net.downs[i].forward(ctx, &e)?;
            skips.put(i, e);
        }
        cur = self.net.latent.forward(ctx, &cur)?;
        hook(&mut skips);
        let mut outs: Vec<Option<Var<T>>> = vec![None; 4];
        for i in (0..4).rev() {
            let up = self.net.ups[i].forward(ctx, &cur)?;
            let skip = skips.take(i)?;
            let fused = self.net.fuses[i].forward(ctx, &Var::concat(&[up, skip], 1)?)?;
            cur = self.net.decoders[i].forward(ctx, &fused, &guide.scales[i])?;
            outs[i] = Some(cur.clone());
        }
        let outs: Vec<Var<T>> = outs.into_iter().map(|o| o.expect("every level decoded")).collect();
        let restored = xp.add(&self.net.refine.forward(ctx, &outs)?)?.crop(0, 0, h, w)?;
        Ok(match ctx.mode() {
            Mode::Eval => ctx.clamp_unit(&restored),
            Mode::Train => restored,
        })
    }

    /// Eval-mode restoration of a batch `[N,3,H,W]`.
    pub fn restore(&self, images: &Tensor<f32>, masks: &[MaskSet]) -> Result<Tensor<f32>> {
        let ctx = Ctx::<f32>::new(&self.store, Mode::Eval);
        Ok(self.forward(&ctx, &Var::constant(images.clone()), masks)?.value().clone())
    }

    pub fn to_container(&self, optimizer: Vec<(String, Entry)>) -> Result<Container> {
        let tensors = self.store.iter().map(|(_, p)| (p.name.clone(), Entry::F32(p.tensor.clone()))).collect();
        let config = serde_json::to_string(&CheckpointConfig { model: self.cfg.clone() })?;
        Ok(Container { tensors, optimizer, config })
    }

    /// Rebuilds the model described by the container's config snapshot and
    /// loads its parameters. Returns the optimizer section untouched.
    pub fn from_container(c: Container) -> Result<(Model, Vec<(String, Entry)>)> {
        let snap: CheckpointConfig = serde_json::from_str(&c.config)
            .map_err(|e| Error::Checkpoint(format!("config snapshot: {}", e)))?;
        let mut model = Model::new(&snap.model)?;
        let mut seen = vec![false; model.store.len()];
        for (name, e) in c.tensors {
            let id = model.store.id_of(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", name)))?;
            let Entry::F32(t) = e else {
                return Err(Error::Checkpoint(format!("parameter '{}' is not f32", name)));
            };
            let slot = model.store.tensor_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("parameter '{}' has shape {:?}, model expects {:?}", name, t.shape(), slot.shape())));
            }
            *slot = t;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing parameter '{}'", model.store.get(crate::ParamId(i)).name)));
        }
        Ok((model, c.optimizer))
    }

    pub fn save(&self, path: impl AsRef<Path>, optimizer: Vec<(String, Entry)>) -> Result<()> {
        fsutil::write_atomic(path, &self.to_container(optimizer)?.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Model, Vec<(String, Entry)>)> {
        Model::from_container(Container::from_bytes(&fsutil::read(path)?)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointConfig {
    model: ModelConfig,
}

/// Exact scalar parameter count of a configuration.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::new(cfg)?.param_count())
}
