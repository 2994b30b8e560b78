//! Parameterized layers shared by every block: convolution, channel
//! layer normalization and the 2x resampling pair.

use crate::autograd::{Ctx, PadMode, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamInit};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub groups: usize,
    pub padding: PadMode,
}

impl Conv2d {
    pub fn new(init: &mut ParamInit<'_>, in_ch: usize, out_ch: usize, kernel: usize, groups: usize) -> Result<Self> {
        let fan_in = in_ch / groups * kernel * kernel;
        let weight = init.uniform_fan_in("w", &[out_ch, in_ch / groups, kernel, kernel], fan_in)?;
        let bias = Some(init.uniform_fan_in("b", &[out_ch], fan_in)?);
        Ok(Conv2d { weight, bias, in_ch, out_ch, kernel, groups, padding: PadMode::Zeros })
    }

    pub fn pointwise(init: &mut ParamInit<'_>, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(init, in_ch, out_ch, 1, 1)
    }

    pub fn depthwise(init: &mut ParamInit<'_>, ch: usize, kernel: usize) -> Result<Self> {
        Self::new(init, ch, ch, kernel, ch)
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        x.conv2d(&w, b.as_ref(), self.padding, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit<'_>, ch: usize) -> Result<Self> {
        Ok(LayerNorm { gamma: init.constant("g", &[ch], 1.0)?, beta: init.constant("b", &[ch], 0.0)?, eps: 1e-5 })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        x.layernorm_channels(&ctx.param(self.gamma), &ctx.param(self.beta), self.eps)
    }
}

/// `[N,C,H,W] -> [N,2C,H/2,W/2]`: pixel-unshuffle then a 1x1 conv 4C -> 2C.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new(init: &mut ParamInit<'_>, ch: usize) -> Result<Self> {
        Ok(Downsample { conv: Conv2d::pointwise(&mut init.scope("conv"), 4 * ch, 2 * ch)? })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        self.conv.forward(ctx, &x.pixel_unshuffle()?)
    }
}

/// `[N,C,H,W] -> [N,C/2,2H,2W]`: a 1x1 conv C -> 2C then pixel-shuffle.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv2d,
}

impl Upsample {
    pub fn new(init: &mut ParamInit<'_>, ch: usize) -> Result<Self> {
        Ok(Upsample { conv: Conv2d::pointwise(&mut init.scope("conv"), ch, 2 * ch)? })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        self.conv.forward(ctx, x)?.pixel_shuffle()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn resample_shape_contract() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut init = ParamInit::new(&mut store, &mut rng);
        let down = Downsample::new(&mut init.scope("down"), 8).unwrap();
        let up = Upsample::new(&mut init.scope("up"), 16).unwrap();
        let ctx = Ctx::<f32>::new(&store, Mode::Eval);
        let x = Var::constant(Tensor::zeros([1, 8, 16, 16]));
        let d = down.forward(&ctx, &x).unwrap();
        assert_eq!(d.shape(), &[1, 16, 8, 8]);
        let u = up.forward(&ctx, &d).unwrap();
        assert_eq!(u.shape(), &[1, 8, 16, 16]);
    }

    #[test]
    fn single_pointwise_param_count() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        Conv2d::pointwise(&mut ParamInit::new(&mut store, &mut rng), 3, 8).unwrap();
        assert_eq!(store.num_scalars(), 3 * 8 + 8);
    }
}
