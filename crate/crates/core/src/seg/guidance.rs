use crate::autograd::{Ctx, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Downsample};
use crate::params::ParamInit;
use crate::tensor::Real;

/// Gated residual transform `sigmoid(g(t)) * b(a(t)) + t` with three 1x1
/// convolutions.
#[derive(Clone, Debug)]
pub struct Sgft {
    pub gate: Conv2d,
    pub a: Conv2d,
    pub b: Conv2d,
}

impl Sgft {
    pub fn new(init: &mut ParamInit<'_>, ch: usize) -> Result<Self> {
        Ok(Sgft {
            gate: Conv2d::pointwise(&mut init.scope("gate"), ch, ch)?,
            a: Conv2d::pointwise(&mut init.scope("a"), ch, ch)?,
            b: Conv2d::pointwise(&mut init.scope("b").output_projection(), ch, ch)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, t: &Var<T>) -> Result<Var<T>> {
        let g = self.gate.forward(ctx, t)?.sigmoid();
        let v = self.b.forward(ctx, &self.a.forward(ctx, t)?)?;
        g.mul(&v)?.add(t)
    }
}

/// Modulation maps at the four encoder/decoder scales, finest first.
#[derive(Clone, Debug)]
pub struct SegGuidance<T: Real = f32> {
    pub scales: Vec<Var<T>>,
    pub alpha: f64,
}

/// Shallow extractor (1x1 conv to the first stage width), three
/// downsampling steps and one transform per scale.
#[derive(Clone, Debug)]
pub struct SegPyramid {
    pub ssfe: Conv2d,
    pub downs: Vec<Downsample>,
    pub sgft: Vec<Sgft>,
    pub widths: Vec<usize>,
}

impl SegPyramid {
    pub fn new(init: &mut ParamInit<'_>, widths: &[usize]) -> Result<Self> {
        if widths.len() != 4 || widths.windows(2).any(|p| p[1] != 2 * p[0]) {
            return Err(Error::Config(format!("pyramid widths {:?} must be four doubling stages", widths)));
        }
        let ssfe = Conv2d::pointwise(&mut init.scope("ssfe"), 3, widths[0])?;
        let downs = (0..3)
            .map(|i| Downsample::new(&mut init.scope(format!("down{}", i + 1)), widths[i]))
            .collect::<Result<_>>()?;
        let sgft = (0..4).map(|i| Sgft::new(&mut init.scope(format!("sgft{}", i + 1)), widths[i])).collect::<Result<_>>()?;
        Ok(SegPyramid { ssfe, downs, sgft, widths: widths.to_vec() })
    }

    /// `i_seg` is `[N,3,H,W]` with `H` and `W` multiples of 16.
    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, i_seg: &Var<T>, alpha: f64) -> Result<SegGuidance<T>> {
        let &[_, 3, h, w] = i_seg.shape() else {
            return Err(Error::shape("build_pyramid", format!("expected [N,3,H,W], got {:?}", i_seg.shape())));
        };
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape("build_pyramid", format!("spatial size {}x{} is not a multiple of 16", h, w)));
        }
        let mut t = self.ssfe.forward(ctx, i_seg)?;
        let mut scales = Vec::with_capacity(4);
        for i in 0..4 {
            if i > 0 {
                t = self.downs[i - 1].forward(ctx, &t)?;
            }
            scales.push(self.sgft[i].forward(ctx, &t)?);
        }
        Ok(SegGuidance { scales, alpha })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Mode;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn build(ch: usize) -> (ParamStore, Sgft) {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = Sgft::new(&mut ParamInit::new(&mut store, &mut rng).scope("s"), ch).unwrap();
        (store, s)
    }

    #[test]
    fn zero_params_pass_through() {
        let (mut store, s) = build(3);
        for id in store.ids().collect::<Vec<_>>() {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ctx = Ctx::<f32>::new(&store, Mode::Eval);
        let t = Var::constant(Tensor::from_fn([1, 3, 2, 2], |i| i as f32 - 4.0));
        assert_eq!(s.forward(&ctx, &t).unwrap().value(), t.value());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let (mut store, s) = build(2);
        for id in [s.gate.bias, s.a.bias, s.b.bias].into_iter().flatten() {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ctx = Ctx::<f32>::new(&store, Mode::Eval);
        let t = Var::constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(s.forward(&ctx, &t).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_hand_evaluation() {
        let (mut store, s) = build(1);
        for conv in [&s.gate, &s.a, &s.b] {
            store.tensor_mut(conv.weight).data_mut()[0] = 1.0;
            store.tensor_mut(conv.bias.unwrap()).data_mut()[0] = 0.0;
        }
        let ctx = Ctx::<f64>::new(&store, Mode::Eval);
        let y = s.forward(&ctx, &Var::constant(Tensor::full([1, 1, 1, 1], 2.0))).unwrap();
        let expected = 2.0 / (1.0 + (-2.0f64).exp()) + 2.0;
        assert!((y.value().item() - expected).abs() < 1e-12);
        assert!((expected - 3.7616).abs() < 1e-4);
    }

    #[test]
    fn pyramid_scales_halve() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = SegPyramid::new(&mut ParamInit::new(&mut store, &mut rng), &[4, 8, 16, 32]).unwrap();
        let ctx = Ctx::<f32>::new(&store, Mode::Eval);
        let g = p.forward(&ctx, &Var::constant(Tensor::zeros([2, 3, 32, 16])), 0.5).unwrap();
        let shapes: Vec<_> = g.scales.iter().map(|s| s.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 4, 32, 16], vec![2, 8, 16, 8], vec![2, 16, 8, 4], vec![2, 32, 4, 2]]);
        assert!(p.forward(&ctx, &Var::constant(Tensor::zeros([1, 3, 24, 16])), 0.5).is_err());
        let mut store = ParamStore::new();
        assert!(SegPyramid::new(&mut ParamInit::new(&mut store, &mut rng), &[4, 8, 12, 32]).is_err());
    }
}
