#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgsformer::attention::Attention;
use sgsformer::degrade::{make_sample, DatasetSample, DegradeParams};
use sgsformer::{ParamStore, Tensor};

pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

pub fn sample(index: usize, patch: usize) -> DatasetSample {
    sample_with(index, patch, &DegradeParams::default())
}

pub fn sample_with(index: usize, patch: usize, p: &DegradeParams) -> DatasetSample {
    make_sample(index, patch, &p.psf.build().unwrap(), p, None).unwrap()
}

fn param(store: &ParamStore, id: sgsformer::ParamId) -> Vec<f64> {
    store.tensor(id).data().iter().map(|&v| v as f64).collect()
}

/// Naive same-size cross-correlation with zero padding on `[C,H,W]`.
fn conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], b: &[f64], co: usize, k: usize, groups: usize) -> Vec<f64> {
    let cig = c / groups;
    let cog = co / groups;
    let r = (k / 2) as isize;
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        let g = o / cog;
        for y in 0..h {
            for xx in 0..w {
                let mut s = b[o];
                for ci in 0..cig {
                    let ic = g * cig + ci;
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - r;
                            let sx = xx as isize + kx as isize - r;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += wt[((o * cig + ci) * k + ky) * k + kx] * x[(ic * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = s;
            }
        }
    }
    out
}

/// Unmasked, unmodulated channel attention written with plain loops,
/// reading the weights of `a`. `x` is `[C,H,W]` for one image.
pub fn dense_attention_oracle(store: &ParamStore, a: &Attention, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let c = a.channels;
    let hw = h * w;
    let qkv = conv(x, c, h, w, &param(store, a.qkv.weight), &param(store, a.qkv.bias.unwrap()), 3 * c, 1, 1);
    let qkv = conv(&qkv, 3 * c, h, w, &param(store, a.qkv_dw.weight), &param(store, a.qkv_dw.bias.unwrap()), 3 * c, 3, 3 * c);
    let temp = param(store, a.temperature);
    let heads = a.cfg.heads;
    let d = c / heads;
    let norm = |v: &[f64]| {
        let n = v.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|t| t / n).collect::<Vec<_>>()
    };
    let mut attended = vec![0.0; c * hw];
    for hd in 0..heads {
        for i in 0..d {
            let qi = norm(&qkv[(hd * d + i) * hw..(hd * d + i + 1) * hw]);
            let logits: Vec<f64> = (0..d)
                .map(|j| {
                    let kj = norm(&qkv[(c + hd * d + j) * hw..(c + hd * d + j + 1) * hw]);
                    qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() * temp[hd]
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..d {
                let v = &qkv[(2 * c + hd * d + j) * hw..(2 * c + hd * d + j + 1) * hw];
                for p in 0..hw {
                    attended[(hd * d + i) * hw + p] += e[j] / z * v[p];
                }
            }
        }
    }
    conv(&attended, c, h, w, &param(store, a.proj.weight), &param(store, a.proj.bias.unwrap()), c, 1, 1)
}

/// Brute-force top-k: sort all `(value, column)` pairs of the row
/// descending by value and ascending by column.
pub fn topk_oracle(row: &[f32], k: usize) -> Vec<bool> {
    let mut pairs: Vec<(f32, usize)> = row.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut keep = vec![false; row.len()];
    for &(_, j) in &pairs[..k] {
        keep[j] = true;
    }
    keep
}
