use rayon::prelude::*;

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};

struct MatmulDims {
    batch: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || a.len() != b.len() {
        return Err(Error::shape("matmul", format!("ranks of {:?} and {:?} must agree and be >= 2", a, b)));
    }
    let r = a.len();
    let (m, k, k2, n) = (a[r - 2], a[r - 1], b[r - 2], b[r - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dimension {} vs {} ({:?} x {:?})", k, k2, a, b)));
    }
    let mut batch = Vec::with_capacity(r - 2);
    for d in 0..r - 2 {
        let (x, y) = (a[d], b[d]);
        batch.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return Err(Error::shape("matmul", format!("batch dimension {} differs: {} vs {}", d, x, y))),
        });
    }
    Ok(MatmulDims { batch, a_batch: a[..r - 2].to_vec(), b_batch: b[..r - 2].to_vec(), m, k, n })
}

/// Flat batch offsets of each broadcast batch index into the operand.
fn batch_offsets(batch: &[usize], operand: &[usize]) -> Vec<usize> {
    let total = numel(batch);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; batch.len()];
    for _ in 0..total {
        let mut off = 0;
        for d in 0..batch.len() {
            let i = if operand[d] == 1 { 0 } else { idx[d] };
            off = off * operand[d] + i;
        }
        out.push(off);
        for d in (0..batch.len()).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// `c[i, j] = sum_k a[i, k] * b[k, j]`, accumulated in ascending `k`.
fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose2<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn batched<T: Real>(
    a: &[T],
    b: &[T],
    a_off: &[usize],
    b_off: &[usize],
    (m, k, n): (usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); a_off.len() * m * n];
    out.par_chunks_mut(m * n).enumerate().for_each(|(bi, c)| {
        let ao = a_off[bi] * m * k;
        let bo = b_off[bi] * k * n;
        gemm(&a[ao..ao + m * k], &b[bo..bo + k * n], c, m, k, n);
    });
    out
}

impl<T: Real> Var<T> {
    /// Batched matrix product over the last two axes; batch axes broadcast.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let dims = matmul_dims(self.shape(), other.shape())?;
        let a_off = batch_offsets(&dims.batch, &dims.a_batch);
        let b_off = batch_offsets(&dims.batch, &dims.b_batch);
        let (m, k, n) = (dims.m, dims.k, dims.n);
        let data = batched(self.value().data(), other.value().data(), &a_off, &b_off, (m, k, n));
        let mut shape = dims.batch.clone();
        shape.extend([m, n]);
        let out = Tensor::new(shape, data)?;
        Ok(Var::from_op(out, vec![self.clone(), other.clone()], move |g, _, ps| {
            let (a, b) = (ps[0].value(), ps[1].value());
            let g = g.data();
            let mut ga = None;
            if ps[0].requires_grad() {
                // dA = G B^T, summed over broadcast batches.
                let mut acc = vec![T::zero(); a.numel()];
                for (bi, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
                    let bt = transpose2(&b.data()[bo * k * n..(bo + 1) * k * n], k, n);
                    let mut tmp = vec![T::zero(); m * k];
                    gemm(&g[bi * m * n..(bi + 1) * m * n], &bt, &mut tmp, m, n, k);
                    for (d, s) in acc[ao * m * k..(ao + 1) * m * k].iter_mut().zip(tmp) {
                        *d += s;
                    }
                }
                ga = Some(Tensor::from_vec(a.shape().to_vec(), acc));
            }
            let mut gb = None;
            if ps[1].requires_grad() {
                // dB = A^T G.
                let mut acc = vec![T::zero(); b.numel()];
                for (bi, (&ao, &bo)) in a_off.iter().zip(&b_off).enumerate() {
                    let at = transpose2(&a.data()[ao * m * k..(ao + 1) * m * k], m, k);
                    let mut tmp = vec![T::zero(); k * n];
                    gemm(&at, &g[bi * m * n..(bi + 1) * m * n], &mut tmp, k, m, n);
                    for (d, s) in acc[bo * k * n..(bo + 1) * k * n].iter_mut().zip(tmp) {
                        *d += s;
                    }
                }
                gb = Some(Tensor::from_vec(b.shape().to_vec(), acc));
            }
            vec![ga, gb]
        }))
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Var<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let src = self.value().data();
        let mut data = Vec::with_capacity(src.len());
        for bi in 0..batch {
            data.extend(transpose2(&src[bi * r * c..(bi + 1) * r * c], r, c));
        }
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let out = Tensor::from_vec(shape, data);
        Ok(Var::from_op(out, vec![self.clone()], move |g, _, ps| {
            let mut data = Vec::with_capacity(g.numel());
            for bi in 0..batch {
                data.extend(transpose2(&g.data()[bi * r * c..(bi + 1) * r * c], c, r));
            }
            vec![Some(Tensor::from_vec(ps[0].shape().to_vec(), data))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn naive(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn([m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut s = 0.0f32;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            s
        })
    }

    #[test]
    fn identity_times_a() {
        let a = Tensor::<f32>::from_fn([3, 3], |i| i as f32 * 0.5 - 1.0);
        let y = Var::constant(Tensor::eye(3)).matmul(&Var::constant(a.clone())).unwrap();
        assert_eq!(y.value(), &a);
    }

    #[test]
    fn hand_product() {
        let a = Var::constant(Tensor::<f32>::from_vec([2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = Var::constant(Tensor::from_vec([2, 1], vec![1.0, 1.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matches_triple_loop_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::from_fn([5, 7], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f32>::from_fn([7, 3], |_| rng.gen_range(-1.0..1.0));
        let y = Var::constant(a.clone()).matmul(&Var::constant(b.clone())).unwrap();
        assert_eq!(y.value(), &naive(&a, &b));
    }

    #[test]
    fn inner_mismatch_errors() {
        let a = Var::constant(Tensor::<f32>::zeros([2, 3]));
        let b = Var::constant(Tensor::<f32>::zeros([2, 3]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("inner dimension"), "{err}");
    }

    #[test]
    fn batch_broadcast() {
        let a = Var::constant(Tensor::<f32>::from_fn([2, 2, 2], |i| i as f32));
        let b = Var::constant(Tensor::<f32>::eye(2).reshape([1, 2, 2]).unwrap());
        assert_eq!(a.matmul(&b).unwrap().value(), a.value());
    }
}
