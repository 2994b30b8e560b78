use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

/// `out[i] = in[perm[i]]` for a bijective `perm`.
fn permute<T: Real>(x: &Var<T>, out_shape: Vec<usize>, perm: Vec<usize>) -> Var<T> {
    let src = x.value().data();
    let data = perm.iter().map(|&p| src[p]).collect();
    let out = Tensor::from_vec(out_shape, data);
    Var::from_op(out, vec![x.clone()], move |g, _, ps| {
        let mut gi = vec![T::zero(); g.numel()];
        for (i, &p) in perm.iter().enumerate() {
            gi[p] = g.data()[i];
        }
        vec![Some(Tensor::from_vec(ps[0].shape().to_vec(), gi))]
    })
}

/// `out[i] = in[idx[i]]`; indices may repeat, gradients accumulate.
fn gather<T: Real>(x: &Var<T>, out_shape: Vec<usize>, idx: Vec<usize>) -> Var<T> {
    let src = x.value().data();
    let data = idx.iter().map(|&p| src[p]).collect();
    let out = Tensor::from_vec(out_shape, data);
    Var::from_op(out, vec![x.clone()], move |g, _, ps| {
        let mut gi = vec![T::zero(); ps[0].value().numel()];
        for (i, &p) in idx.iter().enumerate() {
            gi[p] += g.data()[i];
        }
        vec![Some(Tensor::from_vec(ps[0].shape().to_vec(), gi))]
    })
}

fn nchw(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match s {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expected [N,C,H,W], got {:?}", s))),
    }
}

impl<T: Real> Var<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = self.value().reshape(shape.to_vec())?;
        Ok(Var::from_op(out, vec![self.clone()], |g, _, ps| {
            vec![Some(g.reshape(ps[0].shape().to_vec()).expect("same element count"))]
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = self.value().narrow(axis, start, len)?;
        Ok(Var::from_op(out, vec![self.clone()], move |g, _, ps| {
            let shape = ps[0].shape();
            let outer = numel(&shape[..axis]);
            let inner = numel(&shape[axis + 1..]);
            let extent = shape[axis];
            let mut gi = vec![T::zero(); numel(shape)];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                gi[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![Some(Tensor::from_vec(shape.to_vec(), gi))]
        }))
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat(&values, axis)?;
        Ok(Var::from_op(out, parts.to_vec(), move |g, _, ps| {
            let mut start = 0;
            ps.iter()
                .map(|p| {
                    let len = p.shape()[axis];
                    let piece = g.narrow(axis, start, len).expect("concat extents");
                    start += len;
                    p.requires_grad().then_some(piece)
                })
                .collect()
        }))
    }

    /// Spatial crop of an `[N,C,H,W]` tensor.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Var<T>> {
        nchw("crop", self.shape())?;
        self.narrow(2, top, height)?.narrow(3, left, width)
    }

    /// Extends `[N,C,H,W]` by `bottom` rows and `right` columns of mirror
    /// padding (edge not repeated).
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Result<Var<T>> {
        let [n, c, h, w] = nchw("pad_reflect", self.shape())?;
        if bottom == 0 && right == 0 {
            return Ok(self.clone());
        }
        let (ho, wo) = (h + bottom, w + right);
        let src = |i: usize, len: usize| super::conv::pad_source(i as isize, len, super::PadMode::Reflect).expect("reflect");
        let mut idx = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for y in 0..ho {
                let sy = src(y, h);
                for x in 0..wo {
                    idx.push((plane * h + sy) * w + src(x, w));
                }
            }
        }
        Ok(gather(self, vec![n, c, ho, wo], idx))
    }

    /// Space-to-depth by 2: `[N,C,H,W] -> [N,4C,H/2,W/2]`; output channel
    /// `4c + 2dy + dx` holds input pixel `(2y+dy, 2x+dx)` of channel `c`.
    pub fn pixel_unshuffle(&self) -> Result<Var<T>> {
        let [n, c, h, w] = nchw("pixel_unshuffle", self.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("pixel_unshuffle", format!("spatial extent {}x{} must be even", h, w)));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut perm = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    for y in 0..ho {
                        for x in 0..wo {
                            perm.push(((b * c + ch) * h + 2 * y + dy) * w + 2 * x + dx);
                        }
                    }
                }
            }
        }
        Ok(permute(self, vec![n, 4 * c, ho, wo], perm))
    }

    /// Depth-to-space by 2, the inverse of [`Var::pixel_unshuffle`].
    pub fn pixel_shuffle(&self) -> Result<Var<T>> {
        let [n, c4, h, w] = nchw("pixel_shuffle", self.shape())?;
        if c4 % 4 != 0 {
            return Err(Error::shape("pixel_shuffle", format!("channels {} not divisible by 4", c4)));
        }
        let c = c4 / 4;
        let (ho, wo) = (2 * h, 2 * w);
        let mut perm = Vec::with_capacity(n * c4 * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        let d = (y % 2) * 2 + x % 2;
                        perm.push(((b * c4 + 4 * ch + d) * h + y / 2) * w + x / 2);
                    }
                }
            }
        }
        Ok(permute(self, vec![n, c, ho, wo], perm))
    }

    /// Mean over the spatial axes: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn mean_hw(&self) -> Result<Var<T>> {
        let [n, c, h, w] = nchw("mean_hw", self.shape())?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let data = self.value().data().chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec([n, c, 1, 1], data);
        Ok(Var::from_op(out, vec![self.clone()], move |g, _, ps| {
            let gi = g.data().iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(hw)).collect();
            vec![Some(Tensor::from_vec(ps[0].shape().to_vec(), gi))]
        }))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&self) -> Result<Var<T>> {
        let [n, c, h, w] = nchw("avg_pool2", self.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("spatial extent {}x{} must be even", h, w)));
        }
        let (ho, wo) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let src = self.value().data();
        let mut data = Vec::with_capacity(n * c * ho * wo);
        for plane in src.chunks(h * w) {
            for y in 0..ho {
                for x in 0..wo {
                    let i = 2 * y * w + 2 * x;
                    data.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * q);
                }
            }
        }
        let out = Tensor::from_vec([n, c, ho, wo], data);
        Ok(Var::from_op(out, vec![self.clone()], move |g, _, ps| {
            let mut gi = vec![T::zero(); n * c * h * w];
            for (p, gp) in gi.chunks_mut(h * w).zip(g.data().chunks(ho * wo)) {
                for y in 0..h {
                    for x in 0..w {
                        p[y * w + x] = gp[(y / 2) * wo + x / 2] * q;
                    }
                }
            }
            vec![Some(Tensor::from_vec(ps[0].shape().to_vec(), gi))]
        }))
    }
}
