mod common;

use sgsformer::autograd::{Ctx, Mode, Var};
use sgsformer::params::ParamStore;
use sgsformer::train::{cyclic_lr, loss_total, psnr, ssim, Adam, LossWeights, PerceptualNet};
use sgsformer::Tensor;

/// Straightforward SSIM: Gaussian window, zero padding, mean over the
/// positions where the window fits.
fn ssim_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let &[c, h, w] = a.shape() else { panic!() };
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let at = |t: &Tensor<f32>, ch: usize, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            t.data()[(ch * h + y as usize) * w + x as usize] as f64
        }
    };
    let (c1, c2) = (1e-4, 9e-4);
    let (mut total, mut count) = (0.0, 0usize);
    for ch in 0..c {
        for y in 5..h - 5 {
            for x in 5..w - 5 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let k = g[dy] * g[dx] / (gs * gs);
                        let (yy, xx) = (y as isize + dy as isize - 5, x as isize + dx as isize - 5);
                        let (va, vb) = (at(a, ch, yy, xx), at(b, ch, yy, xx));
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (saa, sbb, sab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * sab + c2) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn pattern(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn([3, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        0.5 + 0.3 * (((x / 3 + y / 2) % 2) as f32 * 2.0 - 1.0)
    })
}

#[test]
fn ssim_matches_reference_loops() {
    let a = common::rand_tensor(&[3, 20, 17], 1, 0.0, 1.0).cast::<f32>();
    let b = common::rand_tensor(&[3, 20, 17], 2, 0.0, 1.0).cast::<f32>().map(|v| 0.5 * v);
    let mix = Tensor::from_fn([3, 20, 17], |i| 0.7 * a.data()[i] + 0.3 * b.data()[i]);
    for (x, y) in [(&a, &b), (&a, &mix)] {
        assert!((ssim(x, y).unwrap() - ssim_oracle(x, y)).abs() < 1e-9);
    }
}

#[test]
fn ssim_of_inverted_pattern_is_low() {
    let x = pattern(24, 24);
    let inv = x.map(|v| 1.0 - v);
    let s = ssim(&x, &inv).unwrap();
    assert!(s < 0.5, "{}", s);
    assert!((s - ssim_oracle(&x, &inv)).abs() < 1e-9);
}

#[test]
fn metric_symmetry_and_identity() {
    let a = pattern(16, 16);
    let b = common::rand_tensor(&[3, 16, 16], 3, 0.0, 1.0).cast::<f32>();
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    assert_eq!(ssim(&b, &b).unwrap(), 1.0);
    assert_eq!(psnr(&b, &b).unwrap(), 100.0);
}

fn constant(v: f64) -> Var<f64> {
    Var::constant(Tensor::full([1, 3, 16, 16], v))
}

/// Perceptual distance of two constant images: every stage keeps constant
/// planes, so each feature is `relu(sum(w) * input)` per output channel.
fn perceptual_constant(net: &PerceptualNet, a: f64, b: f64) -> f64 {
    let mut fa = vec![a; 3];
    let mut fb = vec![b; 3];
    let mut acc = 0.0;
    for w in net.weights() {
        let (co, ci) = (w.shape()[0], w.shape()[1]);
        let step = |f: &[f64]| -> Vec<f64> {
            (0..co)
                .map(|o| {
                    let s: f64 = (0..ci).map(|i| f[i] * w.data()[(o * ci + i) * 9..(o * ci + i + 1) * 9].iter().map(|&v| v as f64).sum::<f64>()).sum();
                    s.max(0.0)
                })
                .collect()
        };
        fa = step(&fa);
        fb = step(&fb);
        acc += fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum::<f64>() / co as f64;
    }
    acc / net.stages() as f64
}

#[test]
fn loss_terms_match_hand_sums_on_constant_images() {
    let net = PerceptualNet::default();
    let ctx = Ctx::<f64>::bare(Mode::Train);
    for (a, b) in [(0.2f64, 0.7f64), (0.9, 0.1), (0.5, 0.5)] {
        let l1 = (a - b).abs();
        let psnr_t = 0.25 * ((a - b) * (a - b)).max(1e-10).log10();
        let ssim_t = 1.0 - (2.0 * a * b + 1e-4) / (a * a + b * b + 1e-4);
        let perc = perceptual_constant(&net, a, b);
        for w in [LossWeights::EARLY, LossWeights::LATE] {
            let (_, t) = loss_total(&ctx, &net, &constant(a), &constant(b), &w).unwrap();
            assert!((t.l1 - l1).abs() < 1e-6);
            assert!((t.psnr - psnr_t).abs() < 1e-6);
            assert!((t.ssim - ssim_t).abs() < 1e-6);
            assert!((t.perceptual - perc).abs() < 1e-6);
            let hand = w.l1 * l1 + w.psnr * psnr_t + w.ssim * ssim_t + w.perceptual * perc;
            assert!((t.total - hand).abs() < 1e-6, "{} vs {}", t.total, hand);
        }
    }
}

#[test]
fn doubling_l1_weight_doubles_its_contribution() {
    let net = PerceptualNet::default();
    let ctx = Ctx::<f64>::bare(Mode::Train);
    let (x, y) = (constant(0.3), constant(0.6));
    let w2 = LossWeights { l1: 2.0, ..LossWeights::EARLY };
    let (_, t1) = loss_total(&ctx, &net, &x, &y, &LossWeights::EARLY).unwrap();
    let (_, t2) = loss_total(&ctx, &net, &x, &y, &w2).unwrap();
    assert!((t2.total - t1.total - t1.l1).abs() < 1e-12);
}

#[test]
fn late_weights_ignore_l1() {
    // With a zero L1 weight the gradient is that of the remaining terms.
    let net = PerceptualNet::default();
    let ctx = Ctx::<f64>::bare(Mode::Train);
    let a = Var::leaf(common::rand_tensor(&[1, 3, 12, 12], 4, 0.0, 1.0), true);
    let b = Var::constant(common::rand_tensor(&[1, 3, 12, 12], 5, 0.0, 1.0));
    let (l, _) = loss_total(&ctx, &net, &a, &b, &LossWeights::LATE).unwrap();
    let no_l1 = LossWeights { l1: 0.0, ..LossWeights::LATE };
    let (m, _) = loss_total(&ctx, &net, &a, &b, &no_l1).unwrap();
    assert_eq!(l.backward().unwrap().get(&a), m.backward().unwrap().get(&a));
}

#[test]
fn cyclic_schedule_values() {
    assert_eq!(cyclic_lr(0, 1e-5, 1e-4, 1000), 1e-4);
    assert_eq!(cyclic_lr(500, 1e-5, 1e-4, 1000), 1e-5);
    assert_eq!(cyclic_lr(1000, 1e-5, 1e-4, 1000), 1e-4);
    assert!((cyclic_lr(250, 1e-5, 1e-4, 1000) - 5.5e-5).abs() < 1e-15);
}

#[test]
fn adam_symmetry_and_zero_gradient() {
    let mut store = ParamStore::new();
    for n in ["a", "b", "c"] {
        store.register(n, Tensor::from_vec([2], vec![0.5, -0.5]), false).unwrap();
    }
    let ids: Vec<_> = store.ids().collect();
    let mut adam = Adam::new(&store);
    for _ in 0..3 {
        let ctx = Ctx::<f32>::new(&store, Mode::Train);
        let g = ctx.param(ids[0]).square().sum().add(&ctx.param(ids[1]).square().sum()).unwrap();
        let grads = g.backward().unwrap();
        adam.update(&mut store, &grads, 1e-2).unwrap();
    }
    assert_eq!(store.tensor(ids[0]), store.tensor(ids[1]));
    assert_eq!(store.tensor(ids[2]).data(), &[0.5, -0.5]);
    assert!(store.tensor(ids[0]).data()[0] < 0.5);
}
