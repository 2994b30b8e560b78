//! Channel-token attention variants.
//!
//! Every variant projects the input to Q, K and V with a 1x1 convolution
//! followed by a 3x3 depth-wise convolution, splits channels into heads and
//! treats each channel's `H*W` plane as one token, so the attention matrix
//! per head is `(C/heads)^2`. Q and K are L2-normalized along the spatial
//! axis and their product is scaled by a learnable per-head temperature.

use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Var};
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{ParamId, ParamInit};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    /// K and V modulated by the guidance map, top-k masked logits.
    Sgsa,
    /// Only V modulated by the guidance map, top-k masked logits.
    LightSgsa,
    /// V modulated by `ELU(conv3x3(x))`, no masking.
    Dense,
    /// Unmodulated, unmasked attention.
    Plain,
}

impl AttnKind {
    pub fn is_sparse(self) -> bool {
        matches!(self, AttnKind::Sgsa | AttnKind::LightSgsa)
    }

    pub fn is_guided(self) -> bool {
        self.is_sparse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnConfig {
    pub heads: usize,
    pub sparsity_ratio: f64,
}

impl AttnConfig {
    pub fn new(heads: usize, sparsity_ratio: f64) -> Self {
        AttnConfig { heads, sparsity_ratio }
    }
}

/// `max(1, ceil(rho * tokens))`, capped at `tokens`.
pub fn top_k(rho: f64, tokens: usize) -> usize {
    (((rho * tokens as f64) - 1e-9).ceil() as usize).clamp(1, tokens.max(1))
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub kind: AttnKind,
    pub cfg: AttnConfig,
    pub channels: usize,
    pub qkv: Conv2d,
    pub qkv_dw: Conv2d,
    pub temperature: ParamId,
    /// Self-derived modulation for the dense variant.
    pub self_mod: Option<Conv2d>,
    pub proj: Conv2d,
}

impl Attention {
    pub fn new(init: &mut ParamInit<'_>, kind: AttnKind, channels: usize, cfg: AttnConfig) -> Result<Self> {
        if cfg.heads == 0 || channels % cfg.heads != 0 {
            return Err(Error::Config(format!("{} channels are not divisible into {} heads", channels, cfg.heads)));
        }
        if !(cfg.sparsity_ratio > 0.0 && cfg.sparsity_ratio <= 1.0) {
            return Err(Error::Config(format!("sparsity ratio {} outside (0, 1]", cfg.sparsity_ratio)));
        }
        let qkv = Conv2d::pointwise(&mut init.scope("qkv"), channels, 3 * channels)?;
        let qkv_dw = Conv2d::depthwise(&mut init.scope("qkv_dw"), 3 * channels, 3)?;
        let temperature = init.constant("temp", &[cfg.heads], 1.0)?;
        let self_mod = match kind {
            AttnKind::Dense => Some(Conv2d::new(&mut init.scope("smod"), channels, channels, 3, 1)?),
            _ => None,
        };
        let proj = Conv2d::pointwise(&mut init.scope("proj").output_projection(), channels, channels)?;
        Ok(Attention { kind, cfg, channels, qkv, qkv_dw, temperature, self_mod, proj })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.cfg.heads
    }

    pub fn k_th(&self) -> usize {
        if self.kind.is_sparse() {
            top_k(self.cfg.sparsity_ratio, self.head_dim())
        } else {
            self.head_dim()
        }
    }

    /// Output of the attention product, heads merged, before the output
    /// projection.
    pub fn attend<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>, s: Option<&Var<T>>) -> Result<Var<T>> {
        let &[n, c, h, w] = x.shape() else {
            return Err(Error::shape("attention", format!("expected [N,C,H,W], got {:?}", x.shape())));
        };
        if c != self.channels {
            return Err(Error::shape("attention", format!("input has {} channels, layer expects {}", c, self.channels)));
        }
        let guide = match (self.kind.is_guided(), s) {
            (true, Some(s)) if s.shape() == x.shape() => Some(s),
            (true, Some(s)) => {
                return Err(Error::shape("attention", format!("guidance {:?} vs input {:?}", s.shape(), x.shape())))
            }
            (true, None) => return Err(Error::invalid("attention", "guided attention needs a guidance map")),
            (false, _) => None,
        };
        let qkv = self.qkv_dw.forward(ctx, &self.qkv.forward(ctx, x)?)?;
        let q = qkv.narrow(1, 0, c)?;
        let mut k = qkv.narrow(1, c, c)?;
        let mut v = qkv.narrow(1, 2 * c, c)?;
        match self.kind {
            AttnKind::Sgsa => {
                let s = guide.expect("checked above");
                k = k.mul(s)?;
                v = v.mul(s)?;
            }
            AttnKind::LightSgsa => v = v.mul(guide.expect("checked above"))?,
            AttnKind::Dense => {
                let conv = self.self_mod.as_ref().expect("dense attention owns its modulation conv");
                v = v.mul(&conv.forward(ctx, x)?.elu())?;
            }
            AttnKind::Plain => {}
        }
        let (heads, d, hw) = (self.cfg.heads, self.head_dim(), h * w);
        let tokens = [n, heads, d, hw];
        let q = q.reshape(&tokens)?.l2_normalize_last()?;
        let k = k.reshape(&tokens)?.l2_normalize_last()?;
        let v = v.reshape(&tokens)?;
        let temp = ctx.param(self.temperature).reshape(&[1, heads, 1, 1])?;
        let mut logits = q.matmul(&k.transpose_last2()?)?.mul(&temp)?;
        if self.kind.is_sparse() {
            logits = ctx.topk_mask(&logits, self.k_th())?;
        }
        let attn = logits.softmax_rows()?;
        attn.matmul(&v)?.reshape(&[n, c, h, w])
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>, s: Option<&Var<T>>) -> Result<Var<T>> {
        self.proj.forward(ctx, &self.attend(ctx, x, s)?)
    }
}

/// Plain-tensor top-k selection with the same tie rule as the attention
/// layers, exposed for tests and tools.
pub fn topk_keep(logits: &Tensor<f32>, k: usize) -> Result<Vec<bool>> {
    let m = *logits.shape().last().ok_or_else(|| Error::shape("topk", "scalar input"))?;
    if k < 1 || k > m {
        return Err(Error::invalid("topk_mask", format!("k = {} outside 1..={}", k, m)));
    }
    Ok(crate::autograd::topk_rows(logits.data(), m, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(kind: AttnKind, c: usize, heads: usize, rho: f64, seed: u64) -> (ParamStore, Attention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Attention::new(&mut ParamInit::new(&mut store, &mut rng).scope("attn"), kind, c, AttnConfig::new(heads, rho))
            .unwrap();
        (store, a)
    }

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn k_rule() {
        assert_eq!(top_k(0.67, 8), 6);
        assert_eq!(top_k(0.5, 8), 4);
        assert_eq!(top_k(1.0, 8), 8);
        assert_eq!(top_k(0.01, 8), 1);
        assert_eq!(top_k(0.67, 1), 1);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Attention::new(&mut ParamInit::new(&mut store, &mut rng), AttnKind::Sgsa, 6, AttnConfig::new(4, 0.67));
        assert!(r.is_err());
    }

    #[test]
    fn zero_guidance_annihilates() {
        for kind in [AttnKind::Sgsa, AttnKind::LightSgsa] {
            let (store, a) = build(kind, 8, 2, 0.67, 1);
            let ctx = Ctx::<f64>::new(&store, Mode::Eval);
            let x = Var::constant(random(&[1, 8, 4, 4], 2, -1.0, 1.0));
            let s = Var::constant(Tensor::zeros([1, 8, 4, 4]));
            let y = a.attend(&ctx, &x, Some(&s)).unwrap();
            assert!(y.value().data().iter().all(|&v| v == 0.0), "{:?}", kind);
        }
    }

    #[test]
    fn light_matches_full_under_unit_guidance() {
        let (store, full) = build(AttnKind::Sgsa, 8, 2, 0.67, 4);
        let light = Attention { kind: AttnKind::LightSgsa, ..full.clone() };
        let ctx = Ctx::<f32>::new(&store, Mode::Eval);
        let x = Var::constant(random(&[2, 8, 4, 4], 5, -1.0, 1.0).cast());
        let ones = Var::constant(Tensor::ones([2, 8, 4, 4]));
        let a = full.forward(&ctx, &x, Some(&ones)).unwrap();
        let b = light.forward(&ctx, &x, Some(&ones)).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn shape_preserved_and_guidance_checked() {
        let (store, a) = build(AttnKind::Sgsa, 8, 4, 0.67, 1);
        let ctx = Ctx::<f32>::new(&store, Mode::Eval);
        let x = Var::constant(Tensor::zeros([1, 8, 2, 6]));
        let s = Var::constant(Tensor::ones([1, 8, 2, 6]));
        assert_eq!(a.forward(&ctx, &x, Some(&s)).unwrap().shape(), x.shape());
        assert!(a.forward(&ctx, &x, None).is_err());
        let bad = Var::constant(Tensor::ones([1, 8, 2, 5]));
        assert!(a.forward(&ctx, &x, Some(&bad)).is_err());
    }
}
