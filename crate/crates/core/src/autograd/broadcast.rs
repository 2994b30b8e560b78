//! Same-rank broadcasting where an extent of 1 stretches to match.

use crate::error::{Error, Result};
use crate::tensor::{numel, strides_of, Real, Tensor};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {:?} vs {:?}", a, b)));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(d, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("dimension {} differs: {:?} vs {:?}", d, a, b))),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero on broadcast axes.
fn bstrides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides_of(shape);
    shape.iter().zip(out).zip(s).map(|((&e, &o), st)| if e == 1 && o != 1 { 0 } else { st }).collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element in
/// row-major order.
pub(crate) fn for_each2(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = bstrides(a, out);
    let sb = bstrides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn zip_with<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let mut data = vec![T::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each2(&out, a.shape(), b.shape(), |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// Sums `grad` (shaped like the broadcast output) down to `shape`, with each
/// element weighted by `w(i)`.
pub(crate) fn reduce_to<T: Real>(
    grad: &Tensor<T>,
    shape: &[usize],
    other: &[usize],
    weight: impl Fn(usize, usize) -> T,
) -> Tensor<T> {
    let mut acc = vec![T::zero(); numel(shape)];
    let g = grad.data();
    for_each2(grad.shape(), shape, other, |i, ia, ib| acc[ia] += g[i] * weight(i, ib));
    Tensor::from_vec(shape.to_vec(), acc)
}
