//! Composite blocks: gated feed-forward, channel activation, the encoder,
//! decoder and latent stages, and the multi-scale refine head.

use crate::attention::{AttnConfig, AttnKind, Attention};
use crate::autograd::{Ctx, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, LayerNorm, Upsample};
use crate::params::ParamInit;
use crate::tensor::Real;

/// Mixed gated feed-forward network with hidden width `e * C`.
///
/// `Ma = gelu(dw3(pw(x)))`, `X1`, `X2` are two more branches of the same
/// form, `Ga = pw(relu(dw3([X1, X2])) ++ relu(dw5([X2, X1])))` and the output
/// is `pw(Ma * Ga) + x`.
#[derive(Clone, Debug)]
pub struct Mgfn {
    pub ma: (Conv2d, Conv2d),
    pub x1: (Conv2d, Conv2d),
    pub x2: (Conv2d, Conv2d),
    pub gate_dw3: Conv2d,
    pub gate_dw5: Conv2d,
    pub gate_mix: Conv2d,
    pub out: Conv2d,
}

fn branch(init: &mut ParamInit<'_>, name: &str, c: usize, hidden: usize) -> Result<(Conv2d, Conv2d)> {
    let mut s = init.scope(name);
    Ok((Conv2d::pointwise(&mut s.scope("pw"), c, hidden)?, Conv2d::depthwise(&mut s.scope("dw"), hidden, 3)?))
}

impl Mgfn {
    pub fn new(init: &mut ParamInit<'_>, c: usize, expansion: usize) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::Config("mgfn expansion must be at least 1".into()));
        }
        let hidden = expansion * c;
        Ok(Mgfn {
            ma: branch(init, "ma", c, hidden)?,
            x1: branch(init, "x1", c, hidden)?,
            x2: branch(init, "x2", c, hidden)?,
            gate_dw3: Conv2d::depthwise(&mut init.scope("gate_dw3"), 2 * hidden, 3)?,
            gate_dw5: Conv2d::depthwise(&mut init.scope("gate_dw5"), 2 * hidden, 5)?,
            gate_mix: Conv2d::pointwise(&mut init.scope("gate_mix"), 4 * hidden, hidden)?,
            out: Conv2d::pointwise(&mut init.scope("out").output_projection(), hidden, c)?,
        })
    }

    fn run_branch<T: Real>(ctx: &Ctx<T>, b: &(Conv2d, Conv2d), x: &Var<T>) -> Result<Var<T>> {
        Ok(b.1.forward(ctx, &b.0.forward(ctx, x)?)?.gelu())
    }

    /// Everything but the residual.
    pub fn body<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let ma = Self::run_branch(ctx, &self.ma, x)?;
        let x1 = Self::run_branch(ctx, &self.x1, x)?;
        let x2 = Self::run_branch(ctx, &self.x2, x)?;
        let g3 = ctx.relu(&self.gate_dw3.forward(ctx, &Var::concat(&[x1.clone(), x2.clone()], 1)?)?);
        let g5 = ctx.relu(&self.gate_dw5.forward(ctx, &Var::concat(&[x2, x1], 1)?)?);
        let ga = self.gate_mix.forward(ctx, &Var::concat(&[g3, g5], 1)?)?;
        self.out.forward(ctx, &ma.mul(&ga)?)
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        self.body(ctx, x)?.add(x)
    }
}

/// Channel attention activate block:
/// `x + sigmoid(pw(relu(pw(mean_hw(x))))) * conv3(x)`.
#[derive(Clone, Debug)]
pub struct Caab {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
    pub conv: Conv2d,
}

impl Caab {
    pub fn new(init: &mut ParamInit<'_>, c: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || c < reduction {
            return Err(Error::Config(format!("caab needs at least {} channels, got {}", reduction, c)));
        }
        Ok(Caab {
            squeeze: Conv2d::pointwise(&mut init.scope("squeeze"), c, c / reduction)?,
            excite: Conv2d::pointwise(&mut init.scope("excite"), c / reduction, c)?,
            conv: Conv2d::new(&mut init.scope("conv").output_projection(), c, c, 3, 1)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let pooled = x.mean_hw()?;
        let scale = self.excite.forward(ctx, &ctx.relu(&self.squeeze.forward(ctx, &pooled)?))?.sigmoid();
        x.add(&scale.mul(&self.conv.forward(ctx, x)?)?)
    }
}

/// Pre-norm transformer unit: `x + attn(LN x)` then `x + ffn(LN x)`.
#[derive(Clone, Debug)]
pub struct TransformerUnit {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Mgfn,
}

impl TransformerUnit {
    pub fn new(init: &mut ParamInit<'_>, kind: AttnKind, c: usize, cfg: AttnConfig, expansion: usize) -> Result<Self> {
        let name = match kind {
            AttnKind::Sgsa => "sgsa",
            AttnKind::LightSgsa => "lsgsa",
            AttnKind::Dense => "dense",
            AttnKind::Plain => "attn",
        };
        Ok(TransformerUnit {
            norm1: LayerNorm::new(&mut init.scope("norm1"), c)?,
            attn: Attention::new(&mut init.scope(name), kind, c, cfg)?,
            norm2: LayerNorm::new(&mut init.scope("norm2"), c)?,
            ffn: Mgfn::new(&mut init.scope("ffn"), c, expansion)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>, s: Option<&Var<T>>) -> Result<Var<T>> {
        let x = x.add(&self.attn.forward(ctx, &self.norm1.forward(ctx, x)?, s)?)?;
        x.add(&self.ffn.body(ctx, &self.norm2.forward(ctx, &x)?)?)
    }
}

fn check_guidance<T: Real>(op: &'static str, x: &Var<T>, s: &Var<T>) -> Result<()> {
    if x.shape() != s.shape() {
        return Err(Error::shape(op, format!("guidance {:?} vs features {:?}", s.shape(), x.shape())));
    }
    Ok(())
}

/// CAABs followed by light sparse transformer units.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub caabs: Vec<Caab>,
    pub units: Vec<TransformerUnit>,
}

impl EncoderBlock {
    pub fn new(
        init: &mut ParamInit<'_>,
        c: usize,
        depth_caab: usize,
        depth_t: usize,
        cfg: AttnConfig,
        expansion: usize,
        reduction: usize,
    ) -> Result<Self> {
        let caabs = (0..depth_caab).map(|i| Caab::new(&mut init.scope(format!("caab{}", i + 1)), c, reduction)).collect::<Result<_>>()?;
        let units = (0..depth_t)
            .map(|i| TransformerUnit::new(&mut init.scope(format!("t{}", i + 1)), AttnKind::LightSgsa, c, cfg, expansion))
            .collect::<Result<_>>()?;
        Ok(EncoderBlock { caabs, units })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        check_guidance("encoder_block", x, s)?;
        let mut x = x.clone();
        for c in &self.caabs {
            x = c.forward(ctx, &x)?;
        }
        for u in &self.units {
            x = u.forward(ctx, &x, Some(s))?;
        }
        Ok(x)
    }
}

/// Reconstruction module: a guided sparse transformer unit followed by a
/// dense-attention unit, each with pre-norm residuals.
#[derive(Clone, Debug)]
pub struct ReconModule {
    pub sparse: TransformerUnit,
    pub dense: TransformerUnit,
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub modules: Vec<ReconModule>,
}

impl DecoderBlock {
    pub fn new(init: &mut ParamInit<'_>, c: usize, n_modules: usize, cfg: AttnConfig, expansion: usize) -> Result<Self> {
        let modules = (0..n_modules)
            .map(|i| {
                let mut m = init.scope(format!("mod{}", i + 1));
                Ok(ReconModule {
                    sparse: TransformerUnit::new(&mut m.scope("sgs"), AttnKind::Sgsa, c, cfg, expansion)?,
                    dense: TransformerUnit::new(&mut m.scope("dense"), AttnKind::Dense, c, cfg, expansion)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DecoderBlock { modules })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        check_guidance("decoder_block", x, s)?;
        let mut x = x.clone();
        for m in &self.modules {
            x = m.sparse.forward(ctx, &x, Some(s))?;
            x = m.dense.forward(ctx, &x, None)?;
        }
        Ok(x)
    }
}

/// Standard transformer units with unmodulated dense channel attention.
#[derive(Clone, Debug)]
pub struct LatentBlock {
    pub units: Vec<TransformerUnit>,
}

impl LatentBlock {
    pub fn new(init: &mut ParamInit<'_>, c: usize, n: usize, heads: usize, expansion: usize) -> Result<Self> {
        let cfg = AttnConfig::new(heads, 1.0);
        let units = (0..n)
            .map(|i| TransformerUnit::new(&mut init.scope(format!("t{}", i + 1)), AttnKind::Plain, c, cfg, expansion))
            .collect::<Result<_>>()?;
        Ok(LatentBlock { units })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut x = x.clone();
        for u in &self.units {
            x = u.forward(ctx, &x, None)?;
        }
        Ok(x)
    }
}

/// Brings every decoder output to full resolution and the first stage
/// width by repeated upsampling, concatenates them and maps to RGB with
/// `conv3 -> gelu -> conv3`.
#[derive(Clone, Debug)]
pub struct Refine {
    pub ups: Vec<Vec<Upsample>>,
    pub fuse: Conv2d,
    pub out: Conv2d,
}

impl Refine {
    /// `widths` lists the decoder widths finest first; each must be the
    /// first width times a power of two matching its level.
    pub fn new(init: &mut ParamInit<'_>, widths: &[usize]) -> Result<Self> {
        let c1 = *widths.first().ok_or_else(|| Error::Config("refine needs at least one scale".into()))?;
        let mut ups = Vec::with_capacity(widths.len());
        for (level, &c) in widths.iter().enumerate() {
            if c != c1 << level {
                return Err(Error::Config(format!("refine width {} at level {} breaks the doubling rule", c, level + 1)));
            }
            let chain = (0..level)
                .map(|j| Upsample::new(&mut init.scope(format!("up{}_{}", level + 1, j + 1)), c >> j))
                .collect::<Result<Vec<_>>>()?;
            ups.push(chain);
        }
        let n = widths.len();
        Ok(Refine {
            ups,
            fuse: Conv2d::new(&mut init.scope("fuse"), n * c1, c1, 3, 1)?,
            out: Conv2d::new(&mut init.scope("out").output_projection(), c1, 3, 3, 1)?,
        })
    }

    /// `features` are the decoder outputs, finest first.
    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, features: &[Var<T>]) -> Result<Var<T>> {
        if features.len() != self.ups.len() {
            return Err(Error::shape("refine", format!("{} scales given, {} expected", features.len(), self.ups.len())));
        }
        let mut full = Vec::with_capacity(features.len());
        for (f, chain) in features.iter().zip(&self.ups) {
            let mut x = f.clone();
            for up in chain {
                x = up.forward(ctx, &x)?;
            }
            full.push(x);
        }
        let x = Var::concat(&full, 1)?;
        self.out.forward(ctx, &self.fuse.forward(ctx, &x)?.gelu())
    }
}
