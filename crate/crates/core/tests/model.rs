mod common;

use sgsformer::blocks::{DecoderBlock, EncoderBlock, LatentBlock};
use sgsformer::attention::AttnConfig;
use sgsformer::model::{Model, ModelConfig};
use sgsformer::params::ParamInit;
use sgsformer::seg::{MaskSet, MaskSource};
use sgsformer::train::{Adam, LossWeights, PerceptualNet};
use sgsformer::{Ctx, Error, Mode, ParamStore, Tensor, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        base_width: 4,
        enc_caab_depths: [1, 1, 1, 1],
        latent_depth: 1,
        latent_heads: 4,
        dec_module_counts: [1, 1, 1, 1],
        ..ModelConfig::tiny()
    }
}

fn one_mask(h: usize, w: usize) -> MaskSet {
    MaskSet::from_labels(h, w, &vec![0; h * w], 1, MaskSource::Naive)
}

fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    common::rand_tensor(&[n, 3, h, w], seed, 0.0, 1.0).cast()
}

#[test]
fn zero_output_projections_give_identity() {
    let mut model = Model::new(&ModelConfig::tiny()).unwrap();
    model.zero_output_projections();
    for (h, w) in [(16, 16), (20, 23)] {
        let x = image(2, h, w, 1);
        let ctx = Ctx::<f32>::new(&model.store, Mode::Train);
        let y = model.forward(&ctx, &Var::constant(x.clone()), &[one_mask(h, w), one_mask(h, w)]).unwrap();
        assert_eq!(y.value(), &x);
    }
}

#[test]
fn zero_init_blocks_are_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = ParamInit::new(&mut store, &mut rng);
    let cfg = AttnConfig::new(2, 0.67);
    let enc = EncoderBlock::new(&mut init.scope("e"), 8, 2, 2, cfg, 2, 4).unwrap();
    let dec = DecoderBlock::new(&mut init.scope("d"), 8, 2, cfg, 2).unwrap();
    let lat = LatentBlock::new(&mut init.scope("l"), 8, 2, 2, 2).unwrap();
    store.zero_output_projections();
    let ctx = Ctx::<f32>::new(&store, Mode::Eval);
    let x = Var::constant(image(1, 8, 8, 2).reshape([1, 3, 8, 8]).unwrap());
    let x = Var::concat(&[x.clone(), x.clone(), x.narrow(1, 0, 2).unwrap()], 1).unwrap();
    let s = Var::constant(Tensor::full([1, 8, 8, 8], 0.7f32));
    assert_eq!(enc.forward(&ctx, &x, &s).unwrap().value(), x.value());
    assert_eq!(dec.forward(&ctx, &x, &s).unwrap().value(), x.value());
    assert_eq!(lat.forward(&ctx, &x).unwrap().value(), x.value());
}

#[test]
fn output_shape_matches_input_for_odd_sizes() {
    let model = Model::new(&small_cfg()).unwrap();
    for (h, w) in [(17, 9), (32, 16), (5, 31)] {
        let y = model.restore(&image(1, h, w, 3), &[one_mask(h, w)]).unwrap();
        assert_eq!(y.shape(), &[1, 3, h, w]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn forward_is_deterministic_and_batch_independent() {
    let model = Model::new(&small_cfg()).unwrap();
    let x = image(1, 16, 16, 4);
    let m = one_mask(16, 16);
    let a = model.restore(&x, std::slice::from_ref(&m)).unwrap();
    let b = model.restore(&x, std::slice::from_ref(&m)).unwrap();
    assert_eq!(a, b);
    let pair = Tensor::concat(&[&x, &x], 0).unwrap();
    let y = model.restore(&pair, &[m.clone(), m]).unwrap();
    assert_eq!(y.narrow(0, 0, 1).unwrap(), a);
    assert_eq!(y.narrow(0, 1, 1).unwrap(), a);
}

#[test]
fn every_parameter_receives_gradient() {
    let model = Model::new(&small_cfg()).unwrap();
    let ctx = Ctx::<f32>::new(&model.store, Mode::Train);
    let y = model.forward(&ctx, &Var::constant(image(1, 16, 16, 5)), &[one_mask(16, 16)]).unwrap();
    let grads = y.square().mean().backward().unwrap();
    for (id, p) in model.store.iter() {
        let g = grads.param(id).unwrap_or_else(|| panic!("no gradient for {}", p.name));
        assert!(g.all_finite(), "{}", p.name);
    }
}

#[test]
fn missing_skip_is_reported() {
    let model = Model::new(&small_cfg()).unwrap();
    let ctx = Ctx::<f32>::new(&model.store, Mode::Eval);
    let err = model
        .forward_with(&ctx, &Var::constant(image(1, 16, 16, 6)), &[one_mask(16, 16)], |skips| {
            skips.remove(2);
        })
        .unwrap_err();
    assert!(matches!(err, Error::MissingSkip(3)), "{}", err);
}

#[test]
fn a_few_adam_steps_reduce_the_loss() {
    let s = common::sample(0, 16);
    let mut model = Model::new(&small_cfg()).unwrap();
    model.zero_output_projections();
    let mut adam = Adam::new(&model.store);
    let perc = PerceptualNet::default();
    let batch = sgsformer::train::trainer::Batch {
        degraded: s.degraded.reshape([1, 3, 16, 16]).unwrap(),
        clean: s.clean.reshape([1, 3, 16, 16]).unwrap(),
        masks: vec![s.masks.clone()],
    };
    let mut losses = Vec::new();
    for _ in 0..6 {
        let t = sgsformer::train::train_step(&mut model, &mut adam, &perc, &batch, &LossWeights::EARLY, 1e-3).unwrap();
        losses.push(t.total);
    }
    assert!(losses[5] < losses[0], "{:?}", losses);
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&small_cfg()).unwrap();
    let adam = Adam::new(&model.store);
    let a = dir.path().join("a.sgsf");
    let b = dir.path().join("b.sgsf");
    model.save(&a, adam.to_entries(&model.store)).unwrap();
    let (loaded, opt) = Model::load(&a).unwrap();
    assert_eq!(Adam::from_entries(&loaded.store, &opt).unwrap(), adam);
    loaded.save(&b, opt).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let x = image(1, 16, 16, 7);
    let m = [one_mask(16, 16)];
    assert_eq!(model.restore(&x, &m).unwrap(), loaded.restore(&x, &m).unwrap());
}

#[test]
fn checkpoint_with_wrong_config_is_rejected() {
    let model = Model::new(&small_cfg()).unwrap();
    let mut c = model.to_container(vec![]).unwrap();
    c.tensors.pop();
    assert!(Model::from_container(c).is_err());
}

#[test]
fn paper_preset_parameter_budget() {
    let n = sgsformer::model::param_count(&ModelConfig::paper()).unwrap();
    assert!((7_000_000..=11_600_000).contains(&n), "{}", n);
}
