//! Same-size 2-D cross-correlation with zero, reflect or circular padding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Zeros,
    Reflect,
    Circular,
}

/// Source index for padded coordinate `i` (may be negative or >= n), or
/// `None` when the position reads a zero.
pub(crate) fn pad_source(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n_i = n as isize;
    if (0..n_i).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zeros => None,
        PadMode::Circular => Some(i.rem_euclid(n_i) as usize),
        PadMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            // Reflection without edge repetition, folded for any pad width.
            let period = 2 * (n_i - 1);
            let m = i.rem_euclid(period);
            Some(if m < n_i { m } else { period - m } as usize)
        }
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    cig: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn hp(&self) -> usize {
        self.h + 2 * self.ph
    }
    fn wp(&self) -> usize {
        self.w + 2 * self.pw
    }
    fn cog(&self) -> usize {
        self.co / self.groups
    }
}

fn geometry(input: &[usize], weight: &[usize], bias: Option<&[usize]>, groups: usize) -> Result<Geometry> {
    let &[n, c, h, w] = input else {
        return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {:?}", input)));
    };
    let &[co, cig, kh, kw] = weight else {
        return Err(Error::shape("conv2d", format!("weight must be [Co,Ci,kh,kw], got {:?}", weight)));
    };
    if groups == 0 || c % groups != 0 || co % groups != 0 {
        return Err(Error::shape("conv2d", format!("groups {} must divide C={} and Co={}", groups, c, co)));
    }
    if cig * groups != c {
        return Err(Error::shape(
            "conv2d",
            format!("weight in-channels {} x groups {} != input channels {}", cig, groups, c),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel {}x{} must be odd", kh, kw)));
    }
    if let Some(b) = bias {
        if b != [co] {
            return Err(Error::shape("conv2d", format!("bias must be [{}], got {:?}", co, b)));
        }
    }
    Ok(Geometry { n, c, h, w, co, cig, groups, kh, kw, ph: kh / 2, pw: kw / 2 })
}

fn pad_input<T: Real>(x: &[T], g: &Geometry, mode: PadMode) -> Vec<T> {
    if g.ph == 0 && g.pw == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (g.hp(), g.wp());
    let rows: Vec<Option<usize>> = (0..hp).map(|y| pad_source(y as isize - g.ph as isize, g.h, mode)).collect();
    let cols: Vec<Option<usize>> = (0..wp).map(|x| pad_source(x as isize - g.pw as isize, g.w, mode)).collect();
    let mut out = vec![T::zero(); g.n * g.c * hp * wp];
    out.par_chunks_mut(hp * wp).zip(x.par_chunks(g.h * g.w)).for_each(|(dst, src)| {
        for (y, ry) in rows.iter().enumerate() {
            let Some(sy) = ry else { continue };
            for (xx, cx) in cols.iter().enumerate() {
                if let Some(sx) = cx {
                    dst[y * wp + xx] = src[sy * g.w + sx];
                }
            }
        }
    });
    out
}

/// Folds a gradient w.r.t. the padded input back onto the unpadded input.
fn unpad_grad<T: Real>(gp: &[T], g: &Geometry, mode: PadMode) -> Vec<T> {
    let (hp, wp) = (g.hp(), g.wp());
    let rows: Vec<Option<usize>> = (0..hp).map(|y| pad_source(y as isize - g.ph as isize, g.h, mode)).collect();
    let cols: Vec<Option<usize>> = (0..wp).map(|x| pad_source(x as isize - g.pw as isize, g.w, mode)).collect();
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    out.par_chunks_mut(g.h * g.w).zip(gp.par_chunks(hp * wp)).for_each(|(dst, src)| {
        for (y, ry) in rows.iter().enumerate() {
            let Some(sy) = ry else { continue };
            for (xx, cx) in cols.iter().enumerate() {
                if let Some(sx) = cx {
                    dst[sy * g.w + sx] += src[y * wp + xx];
                }
            }
        }
    });
    out
}

/// Plain forward pass on tensors, without graph recording.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    mode: PadMode,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), weight.shape(), bias.map(|b| b.shape()), groups)?;
    let padded = pad_input(input.data(), &g, mode);
    Ok(forward_padded(&padded, weight.data(), bias.map(|b| b.data()), &g))
}

fn forward_padded<T: Real>(padded: &[T], w: &[T], bias: Option<&[T]>, g: &Geometry) -> Tensor<T> {
    let (hp, wp, hw) = (g.hp(), g.wp(), g.h * g.w);
    let cog = g.cog();
    let mut out = vec![T::zero(); g.n * g.co * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(idx, o)| {
        let (b, oc) = (idx / g.co, idx % g.co);
        if let Some(bias) = bias {
            o.iter_mut().for_each(|v| *v = bias[oc]);
        }
        let grp = oc / cog;
        for ci in 0..g.cig {
            let ic = grp * g.cig + ci;
            let plane = &padded[(b * g.c + ic) * hp * wp..(b * g.c + ic + 1) * hp * wp];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((oc * g.cig + ci) * g.kh + ky) * g.kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for y in 0..g.h {
                        let src = &plane[(y + ky) * wp + kx..(y + ky) * wp + kx + g.w];
                        for (ov, &sv) in o[y * g.w..(y + 1) * g.w].iter_mut().zip(src) {
                            *ov += wv * sv;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec([g.n, g.co, g.h, g.w], out)
}

impl<T: Real> Var<T> {
    /// Same-size convolution. `groups == C` gives a depth-wise convolution.
    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, mode: PadMode, groups: usize) -> Result<Var<T>> {
        let g = geometry(self.shape(), weight.shape(), bias.map(|b| b.shape()), groups)?;
        let padded = pad_input(self.value().data(), &g, mode);
        let out = forward_padded(&padded, weight.value().data(), bias.map(|b| b.value().data()), &g);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Var::from_op(out, parents, move |gout, _, ps| {
            let (hp, wp, hw) = (g.hp(), g.wp(), g.h * g.w);
            let cog = g.cog();
            let go = gout.data();
            let w = ps[1].value().data();

            let gx = ps[0].requires_grad().then(|| {
                let mut gpad = vec![T::zero(); g.n * g.c * hp * wp];
                gpad.par_chunks_mut(hp * wp).enumerate().for_each(|(idx, gp)| {
                    let (b, ic) = (idx / g.c, idx % g.c);
                    let grp = ic / g.cig;
                    let ci = ic % g.cig;
                    for oc in grp * cog..(grp + 1) * cog {
                        let gplane = &go[(b * g.co + oc) * hw..(b * g.co + oc + 1) * hw];
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let wv = w[((oc * g.cig + ci) * g.kh + ky) * g.kw + kx];
                                for y in 0..g.h {
                                    let dst = &mut gp[(y + ky) * wp + kx..(y + ky) * wp + kx + g.w];
                                    for (d, &s) in dst.iter_mut().zip(&gplane[y * g.w..(y + 1) * g.w]) {
                                        *d += wv * s;
                                    }
                                }
                            }
                        }
                    }
                });
                Tensor::from_vec(ps[0].shape().to_vec(), unpad_grad(&gpad, &g, mode))
            });

            let gw = ps[1].requires_grad().then(|| {
                let k2 = g.kh * g.kw;
                let mut gw = vec![T::zero(); g.co * g.cig * k2];
                gw.par_chunks_mut(g.cig * k2).enumerate().for_each(|(oc, gwo)| {
                    let grp = oc / cog;
                    for b in 0..g.n {
                        let gplane = &go[(b * g.co + oc) * hw..(b * g.co + oc + 1) * hw];
                        for ci in 0..g.cig {
                            let ic = grp * g.cig + ci;
                            let plane = &padded[(b * g.c + ic) * hp * wp..(b * g.c + ic + 1) * hp * wp];
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let mut acc = T::zero();
                                    for y in 0..g.h {
                                        let src = &plane[(y + ky) * wp + kx..(y + ky) * wp + kx + g.w];
                                        for (&s, &gv) in src.iter().zip(&gplane[y * g.w..(y + 1) * g.w]) {
                                            acc += s * gv;
                                        }
                                    }
                                    gwo[(ci * g.kh + ky) * g.kw + kx] += acc;
                                }
                            }
                        }
                    }
                });
                Tensor::from_vec(ps[1].shape().to_vec(), gw)
            });

            let mut grads = vec![gx, gw];
            if ps.len() == 3 {
                grads.push(ps[2].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); g.co];
                    for (idx, plane) in go.chunks(hw).enumerate() {
                        gb[idx % g.co] += plane.iter().copied().sum::<T>();
                    }
                    Tensor::from_vec([g.co], gb)
                }));
            }
            grads
        }))
    }
}
