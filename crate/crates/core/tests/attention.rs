mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgsformer::attention::{topk_keep, AttnConfig, AttnKind, Attention};
use sgsformer::params::ParamInit;
use sgsformer::{Ctx, Mode, ParamStore, Tensor, Var};

fn build(kind: AttnKind, c: usize, heads: usize, rho: f64, seed: u64) -> (ParamStore, Attention) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Attention::new(&mut ParamInit::new(&mut store, &mut rng), kind, c, AttnConfig::new(heads, rho)).unwrap();
    // Spread the temperatures so heads differ.
    let t = store.tensor_mut(a.temperature);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = 0.5 + i as f32;
    }
    (store, a)
}

#[test]
fn sgsa_with_full_keep_and_unit_guidance_is_dense_attention() {
    for seed in 0..5 {
        let (store, sgsa) = build(AttnKind::Sgsa, 8, 2, 1.0, seed);
        let (n, h, w) = (2, 3, 5);
        let x = common::rand_tensor(&[n, 8, h, w], 100 + seed, -1.0, 1.0);
        let ctx = Ctx::<f64>::new(&store, Mode::Eval);
        let ones = Var::constant(Tensor::ones([n, 8, h, w]));
        let got = sgsa.forward(&ctx, &Var::constant(x.clone()), Some(&ones)).unwrap();
        let plain = Attention { kind: AttnKind::Plain, ..sgsa.clone() };
        let via_plain = plain.forward(&ctx, &Var::constant(x.clone()), None).unwrap();
        assert_eq!(got.value(), via_plain.value());
        for b in 0..n {
            let xb = &x.data()[b * 8 * h * w..(b + 1) * 8 * h * w];
            let oracle = common::dense_attention_oracle(&store, &sgsa, xb, h, w);
            let gb = &got.value().data()[b * 8 * h * w..(b + 1) * 8 * h * w];
            let diff = gb.iter().zip(&oracle).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-6, "seed {} batch {}: {}", seed, b, diff);
        }
    }
}

#[test]
fn light_sgsa_equals_sgsa_under_unit_guidance() {
    for seed in 0..5 {
        let (store, sgsa) = build(AttnKind::Sgsa, 8, 4, 0.67, seed);
        let light = Attention { kind: AttnKind::LightSgsa, ..sgsa.clone() };
        let ctx = Ctx::<f32>::new(&store, Mode::Eval);
        let x = Var::constant(common::rand_tensor(&[1, 8, 4, 4], seed, -1.0, 1.0).cast());
        let ones = Var::constant(Tensor::ones([1, 8, 4, 4]));
        assert_eq!(sgsa.forward(&ctx, &x, Some(&ones)).unwrap().value(), light.forward(&ctx, &x, Some(&ones)).unwrap().value());
    }
}

#[test]
fn single_channel_hand_evaluation() {
    // One channel on a 1x1 image: the softmax has a single entry, so the
    // output is proj(dw(v) * s).
    let (mut store, a) = build(AttnKind::Sgsa, 1, 1, 0.67, 0);
    let set = |store: &mut ParamStore, id, vals: &[f32]| store.tensor_mut(id).data_mut().copy_from_slice(vals);
    set(&mut store, a.qkv.weight, &[0.5, -1.0, 2.0]);
    set(&mut store, a.qkv.bias.unwrap(), &[0.1, 0.2, 0.25]);
    let mut dw = vec![0.0f32; 27];
    dw[4] = 1.5;
    dw[9 + 4] = -0.5;
    dw[18 + 4] = 0.75;
    set(&mut store, a.qkv_dw.weight, &dw);
    set(&mut store, a.qkv_dw.bias.unwrap(), &[0.0, 0.0, 0.125]);
    set(&mut store, a.proj.weight, &[2.0]);
    set(&mut store, a.proj.bias.unwrap(), &[-0.25]);
    let ctx = Ctx::<f64>::new(&store, Mode::Eval);
    let x = 0.8;
    let s = 0.4;
    let y = a
        .forward(&ctx, &Var::constant(Tensor::full([1, 1, 1, 1], x)), Some(&Var::constant(Tensor::full([1, 1, 1, 1], s))))
        .unwrap();
    let v = (2.0 * x + 0.25) * 0.75 + 0.125;
    let expected = 2.0 * (v * s) - 0.25;
    assert!((y.value().item() - expected).abs() < 1e-12, "{} vs {}", y.value().item(), expected);
}

#[test]
fn guidance_scale_passes_through_values_only() {
    // K modulation is undone by the L2 normalization, so scaling the guidance
    // scales the attended values and nothing else.
    let (store, a) = build(AttnKind::Sgsa, 8, 2, 0.67, 3);
    let ctx = Ctx::<f64>::new(&store, Mode::Eval);
    let x = Var::constant(common::rand_tensor(&[1, 8, 4, 4], 7, -1.0, 1.0));
    let s = common::rand_tensor(&[1, 8, 4, 4], 8, 0.2, 1.0);
    let y1 = a.attend(&ctx, &x, Some(&Var::constant(s.clone()))).unwrap();
    let y3 = a.attend(&ctx, &x, Some(&Var::constant(s.map(|v| 3.0 * v)))).unwrap();
    let diff = y1.value().data().iter().zip(y3.value().data()).map(|(a, b)| (3.0 * a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{}", diff);
}

#[test]
fn topk_matches_sort_oracle_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..200 {
        let rows = rng.gen_range(1..=8);
        let cols = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=cols);
        // Half the cases draw from a handful of levels to force ties.
        let levels = if case % 2 == 0 { 3 } else { 1000 };
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(0..levels) as f32 / levels as f32 - 0.5).collect();
        let t = Tensor::from_vec([rows, cols], data.clone());
        let got = topk_keep(&t, k).unwrap();
        let want: Vec<bool> = data.chunks(cols).flat_map(|r| common::topk_oracle(r, k)).collect();
        assert_eq!(got, want, "case {}: {:?} k={}", case, data, k);

        // The masked softmax puts zero weight exactly on the dropped entries.
        let ctx = Ctx::<f32>::bare(Mode::Eval);
        let sm = ctx.topk_mask(&Var::constant(t), k).unwrap().softmax_rows().unwrap();
        for (p, &keep) in sm.value().data().iter().zip(&want) {
            assert_eq!(*p == 0.0, !keep);
        }
    }
}
