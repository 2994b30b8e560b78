use super::{Ctx, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn last_axis(op: &'static str, s: &[usize]) -> Result<usize> {
    s.last().copied().filter(|&m| m > 0).ok_or_else(|| Error::shape(op, format!("bad shape {:?}", s)))
}

/// Per-row keep set: the `k` largest entries, ties broken towards the lower
/// column index.
pub(crate) fn topk_rows<T: Real>(data: &[T], m: usize, k: usize) -> Vec<bool> {
    let mut keep = vec![false; data.len()];
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for (r, row) in data.chunks(m).enumerate() {
        order.clear();
        order.extend(0..m);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        for &j in &order[..k] {
            keep[r * m + j] = true;
        }
    }
    keep
}

impl<T: Real> Var<T> {
    /// Row softmax over the last axis with max subtraction. Entries equal to
    /// `-inf` get exactly zero weight.
    pub fn softmax_rows(&self) -> Result<Var<T>> {
        let m = last_axis("softmax_rows", self.shape())?;
        let mut out = self.value().data().to_vec();
        for (r, row) in out.chunks_mut(m).enumerate() {
            let mx = row.iter().copied().filter(|v| v.is_finite()).fold(T::neg_infinity(), T::max);
            if !mx.is_finite() {
                return Err(Error::EmptySoftmaxRow { row: r });
            }
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = if *v == T::neg_infinity() { T::zero() } else { (*v - mx).exp() };
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let out = Tensor::from_vec(self.shape().to_vec(), out);
        Ok(Var::from_op(out, vec![self.clone()], move |g, y, ps| {
            let mut gi = vec![T::zero(); g.numel()];
            for ((gr, yr), dst) in g.data().chunks(m).zip(y.data().chunks(m)).zip(gi.chunks_mut(m)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_vec(ps[0].shape().to_vec(), gi))]
        }))
    }

    /// `x / max(||x||_2, 1e-12)` along the last axis.
    pub fn l2_normalize_last(&self) -> Result<Var<T>> {
        let m = last_axis("l2_normalize", self.shape())?;
        let eps = T::lit(1e-12);
        let norms: Vec<T> = self
            .value()
            .data()
            .chunks(m)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let data = self
            .value()
            .data()
            .chunks(m)
            .zip(&norms)
            .flat_map(|(r, &n)| r.iter().map(move |&v| v / n))
            .collect();
        let out = Tensor::from_vec(self.shape().to_vec(), data);
        Ok(Var::from_op(out, vec![self.clone()], move |g, y, ps| {
            let mut gi = vec![T::zero(); g.numel()];
            for (((gr, yr), dst), &n) in g.data().chunks(m).zip(y.data().chunks(m)).zip(gi.chunks_mut(m)).zip(&norms) {
                if n > eps {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = (gv - yv * dot) / n;
                    }
                } else {
                    for (d, &gv) in dst.iter_mut().zip(gr) {
                        *d = gv / n;
                    }
                }
            }
            vec![Some(Tensor::from_vec(ps[0].shape().to_vec(), gi))]
        }))
    }

    /// Layer normalization across the channel axis of `[N,C,H,W]`, one
    /// statistic per pixel, followed by a per-channel affine map.
    pub fn layernorm_channels(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let &[n, c, h, w] = self.shape() else {
            return Err(Error::shape("layernorm", format!("expected [N,C,H,W], got {:?}", self.shape())));
        };
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "layernorm",
                format!("affine shapes {:?}/{:?} must be [{}]", gamma.shape(), beta.shape(), c),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layernorm", "eps must be positive"));
        }
        let hw = h * w;
        let eps = T::lit(eps);
        let inv_c = T::one() / T::lit(c as f64);
        let x = self.value().data();
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); n * hw];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut mean = T::zero();
                for ch in 0..c {
                    mean += x[base + ch * hw + p];
                }
                mean = mean * inv_c;
                let mut var = T::zero();
                for ch in 0..c {
                    let d = x[base + ch * hw + p] - mean;
                    var += d * d;
                }
                let r = T::one() / (var * inv_c + eps).sqrt();
                rstd[b * hw + p] = r;
                for ch in 0..c {
                    let i = base + ch * hw + p;
                    xhat[i] = (x[i] - mean) * r;
                    out[i] = xhat[i] * gm[ch] + bt[ch];
                }
            }
        }
        let out = Tensor::from_vec(self.shape().to_vec(), out);
        Ok(Var::from_op(out, vec![self.clone(), gamma.clone(), beta.clone()], move |g, _, ps| {
            let g = g.data();
            let gm = ps[1].value().data();
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for b in 0..n {
                let base = b * c * hw;
                for p in 0..hw {
                    let (mut m1, mut m2) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        let gh = g[i] * gm[ch];
                        m1 += gh;
                        m2 += gh * xhat[i];
                        gg[ch] += g[i] * xhat[i];
                        gb[ch] += g[i];
                    }
                    m1 = m1 * inv_c;
                    m2 = m2 * inv_c;
                    let r = rstd[b * hw + p];
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        gx[i] = r * (g[i] * gm[ch] - m1 - xhat[i] * m2);
                    }
                }
            }
            vec![
                ps[0].requires_grad().then(|| Tensor::from_vec(ps[0].shape().to_vec(), gx)),
                ps[1].requires_grad().then(|| Tensor::from_vec([c], gg)),
                ps[2].requires_grad().then(|| Tensor::from_vec([c], gb)),
            ]
        }))
    }
}

impl<T: Real> Ctx<T> {
    /// Keeps the `k` largest entries of every row verbatim and sets the rest
    /// to `-inf`, so a following softmax gives them exactly zero weight. The
    /// selection is a constant of the backward pass.
    pub fn topk_mask(&self, logits: &Var<T>, k: usize) -> Result<Var<T>> {
        let m = last_axis("topk_mask", logits.shape())?;
        if k < 1 || k > m {
            return Err(Error::invalid("topk_mask", format!("k = {} outside 1..={}", k, m)));
        }
        let x = logits.value().data();
        let keep = self.decide(x.len(), || topk_rows(x, m, k));
        let data = x.iter().zip(&keep).map(|(&v, &kp)| if kp { v } else { T::neg_infinity() }).collect();
        let out = Tensor::from_vec(logits.shape().to_vec(), data);
        Ok(Var::from_op(out, vec![logits.clone()], move |g, _, ps| {
            let gi = g.data().iter().zip(&keep).map(|(&gv, &kp)| if kp { gv } else { T::zero() }).collect();
            vec![Some(Tensor::from_vec(ps[0].shape().to_vec(), gi))]
        }))
    }
}
