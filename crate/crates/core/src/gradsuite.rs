//! The finite-difference suite over every differentiable op and block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnConfig, AttnKind, Attention};
use crate::autograd::{Ctx, PadMode, Var};
use crate::blocks::{Caab, DecoderBlock, EncoderBlock, LatentBlock, Mgfn, Refine, TransformerUnit};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::layers::{Conv2d, Downsample, LayerNorm, Upsample};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamInit, ParamStore};
use crate::seg::{MaskSet, MaskSource, SegPyramid, Sgft};
use crate::tensor::Tensor;
use crate::train::loss::{l1_term, loss_total, psnr_term, ssim_term, LossWeights, PerceptualNet};

pub const DEFAULT_SEEDS: u64 = 20;

type RunFn = fn(u64, &GradCheckConfig) -> Result<GradCheckReport>;

pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub run: RunFn,
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(salt);
    r
}

fn rt(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

fn op<F>(name: &str, cfg: &GradCheckConfig, inputs: Vec<Tensor<f64>>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Ctx<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    grad_check(name, &ParamStore::new(), &inputs, cfg, f)
}

fn built<B>(seed: u64, build: impl FnOnce(&mut ParamInit<'_>) -> Result<B>) -> Result<(ParamStore, B)> {
    let mut store = ParamStore::new();
    let mut r = rng(seed, 99);
    let b = build(&mut ParamInit::new(&mut store, &mut r))?;
    Ok((store, b))
}

macro_rules! check {
    ($module:literal, $name:literal, |$seed:ident, $cfg:ident| $body:expr) => {
        Check { module: $module, name: $name, run: |$seed: u64, $cfg: &GradCheckConfig| -> Result<GradCheckReport> { $body } }
    };
}

fn unary(seed: u64, cfg: &GradCheckConfig, name: &str, lo: f64, hi: f64, f: fn(&Ctx<f64>, &Var<f64>) -> Var<f64>) -> Result<GradCheckReport> {
    let x = rt(&mut rng(seed, 1), &[2, 3, 4], lo, hi);
    op(name, cfg, vec![x], move |c, v| Ok(f(c, &v[0])))
}

fn binary(seed: u64, cfg: &GradCheckConfig, name: &str, b_shape: &[usize], lo: f64, f: fn(&Var<f64>, &Var<f64>) -> Result<Var<f64>>) -> Result<GradCheckReport> {
    let mut r = rng(seed, 2);
    let a = rt(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = rt(&mut r, b_shape, lo, 2.0);
    op(name, cfg, vec![a, b], move |_, v| f(&v[0], &v[1]))
}

fn image(seed: u64, salt: u64, shape: &[usize]) -> Tensor<f64> {
    rt(&mut rng(seed, salt), shape, -1.0, 1.0)
}

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        base_width: 4,
        enc_caab_depths: [1, 1, 1, 1],
        latent_depth: 1,
        latent_heads: 4,
        dec_module_counts: [1, 1, 1, 1],
        ..ModelConfig::tiny()
    }
}

/// All checks, grouped by module.
pub fn checks() -> Vec<Check> {
    vec![
        check!("autograd", "add", |s, c| binary(s, c, "add", &[1, 3, 1], -2.0, |a, b| a.add(b))),
        check!("autograd", "sub", |s, c| binary(s, c, "sub", &[2, 1, 4], -2.0, |a, b| a.sub(b))),
        check!("autograd", "mul", |s, c| binary(s, c, "mul", &[2, 3, 4], -2.0, |a, b| a.mul(b))),
        check!("autograd", "div", |s, c| binary(s, c, "div", &[1, 3, 4], 0.5, |a, b| a.div(b))),
        check!("autograd", "neg_scale_shift", |s, c| unary(s, c, "neg_scale_shift", -1.0, 1.0, |_, x| x.neg().scale(1.7).add_scalar(0.3))),
        check!("autograd", "square", |s, c| unary(s, c, "square", -1.0, 1.0, |_, x| x.square())),
        check!("autograd", "ln", |s, c| unary(s, c, "ln", 0.5, 2.0, |_, x| x.ln())),
        check!("autograd", "clamp_min", |s, c| unary(s, c, "clamp_min", 0.2, 1.0, |_, x| x.clamp_min(1e-3))),
        check!("autograd", "sigmoid", |s, c| unary(s, c, "sigmoid", -3.0, 3.0, |_, x| x.sigmoid())),
        check!("autograd", "gelu", |s, c| unary(s, c, "gelu", -3.0, 3.0, |_, x| x.gelu())),
        check!("autograd", "elu", |s, c| unary(s, c, "elu", -2.0, 2.0, |_, x| x.elu())),
        check!("autograd", "relu", |s, c| unary(s, c, "relu", -1.0, 1.0, |ctx, x| ctx.relu(x))),
        check!("autograd", "abs", |s, c| unary(s, c, "abs", -1.0, 1.0, |ctx, x| ctx.abs(x))),
        check!("autograd", "clamp_unit", |s, c| unary(s, c, "clamp_unit", -0.5, 1.5, |ctx, x| ctx.clamp_unit(x))),
        check!("autograd", "sum_mean", |s, c| unary(s, c, "sum_mean", -1.0, 1.0, |_, x| x.sum().add(&x.mean()).expect("scalars"))),
        check!("autograd", "matmul", |s, c| {
            let mut r = rng(s, 3);
            let (a, b) = (rt(&mut r, &[2, 3, 4], -1.0, 1.0), rt(&mut r, &[2, 4, 5], -1.0, 1.0));
            op("matmul", c, vec![a, b], |_, v| v[0].matmul(&v[1]))
        }),
        check!("autograd", "transpose_last2", |s, c| {
            op("transpose_last2", c, vec![image(s, 4, &[2, 3, 4])], |_, v| v[0].transpose_last2())
        }),
        check!("autograd", "reshape_narrow_concat", |s, c| {
            op("reshape_narrow_concat", c, vec![image(s, 5, &[2, 6, 3])], |_, v| {
                let a = v[0].narrow(1, 1, 3)?;
                let b = v[0].narrow(1, 4, 2)?.scale(2.0);
                Var::concat(&[b, a], 1)?.reshape(&[10, 3])
            })
        }),
        check!("autograd", "crop_pad_reflect", |s, c| {
            op("crop_pad_reflect", c, vec![image(s, 6, &[1, 2, 5, 6])], |_, v| v[0].crop(1, 2, 3, 3)?.pad_reflect(2, 1))
        }),
        check!("autograd", "pixel_shuffle", |s, c| {
            op("pixel_shuffle", c, vec![image(s, 7, &[1, 2, 4, 6])], |_, v| v[0].pixel_unshuffle()?.scale(0.5).pixel_shuffle())
        }),
        check!("autograd", "pool_mean_hw", |s, c| {
            op("pool_mean_hw", c, vec![image(s, 8, &[2, 2, 4, 6])], |_, v| {
                let p = v[0].avg_pool2()?;
                p.mul(&v[0].mean_hw()?)
            })
        }),
        check!("autograd", "softmax_rows", |s, c| {
            op("softmax_rows", c, vec![rt(&mut rng(s, 9), &[2, 3, 5], -2.0, 2.0)], |_, v| v[0].softmax_rows())
        }),
        check!("autograd", "topk_softmax", |s, c| {
            op("topk_softmax", c, vec![rt(&mut rng(s, 10), &[2, 4, 6], -2.0, 2.0)], |ctx, v| ctx.topk_mask(&v[0], 4)?.softmax_rows())
        }),
        check!("autograd", "l2_normalize", |s, c| {
            op("l2_normalize", c, vec![image(s, 11, &[2, 3, 5])], |_, v| v[0].l2_normalize_last())
        }),
        check!("autograd", "layernorm_channels", |s, c| {
            let mut r = rng(s, 12);
            let x = rt(&mut r, &[2, 4, 3, 2], -1.0, 1.0);
            let (g, b) = (rt(&mut r, &[4], 0.5, 1.5), rt(&mut r, &[4], -0.5, 0.5));
            op("layernorm_channels", c, vec![x, g, b], |_, v| v[0].layernorm_channels(&v[1], &v[2], 1e-5))
        }),
        check!("autograd", "conv2d_zeros", |s, c| conv_case(s, c, "conv2d_zeros", PadMode::Zeros, 1, 3)),
        check!("autograd", "conv2d_reflect", |s, c| conv_case(s, c, "conv2d_reflect", PadMode::Reflect, 1, 3)),
        check!("autograd", "conv2d_circular", |s, c| conv_case(s, c, "conv2d_circular", PadMode::Circular, 1, 5)),
        check!("autograd", "conv2d_grouped", |s, c| conv_case(s, c, "conv2d_grouped", PadMode::Zeros, 2, 3)),
        check!("autograd", "conv2d_depthwise", |s, c| conv_case(s, c, "conv2d_depthwise", PadMode::Zeros, 4, 3)),
        check!("layers", "conv_layer", |s, c| {
            let (store, l) = built(s, |i| Conv2d::new(i, 3, 4, 3, 1))?;
            grad_check("conv_layer", &store, &[image(s, 20, &[1, 3, 4, 4])], c, move |ctx, v| l.forward(ctx, &v[0]))
        }),
        check!("layers", "layernorm", |s, c| {
            let (store, l) = built(s, |i| LayerNorm::new(i, 4))?;
            grad_check("layernorm", &store, &[image(s, 21, &[1, 4, 3, 3])], c, move |ctx, v| l.forward(ctx, &v[0]))
        }),
        check!("layers", "downsample", |s, c| {
            let (store, l) = built(s, |i| Downsample::new(i, 2))?;
            grad_check("downsample", &store, &[image(s, 22, &[1, 2, 4, 4])], c, move |ctx, v| l.forward(ctx, &v[0]))
        }),
        check!("layers", "upsample", |s, c| {
            let (store, l) = built(s, |i| Upsample::new(i, 4))?;
            grad_check("upsample", &store, &[image(s, 23, &[1, 4, 2, 2])], c, move |ctx, v| l.forward(ctx, &v[0]))
        }),
        check!("attention", "sgsa", |s, c| attn_case(s, c, "sgsa", AttnKind::Sgsa)),
        check!("attention", "l_sgsa", |s, c| attn_case(s, c, "l_sgsa", AttnKind::LightSgsa)),
        check!("attention", "dense", |s, c| attn_case(s, c, "dense", AttnKind::Dense)),
        check!("attention", "plain", |s, c| attn_case(s, c, "plain", AttnKind::Plain)),
        check!("blocks", "mgfn", |s, c| {
            let (store, b) = built(s, |i| Mgfn::new(i, 4, 2))?;
            grad_check("mgfn", &store, &[image(s, 30, &[1, 4, 4, 4])], c, move |ctx, v| b.forward(ctx, &v[0]))
        }),
        check!("blocks", "caab", |s, c| {
            let (store, b) = built(s, |i| Caab::new(i, 8, 4))?;
            grad_check("caab", &store, &[image(s, 31, &[2, 8, 3, 3])], c, move |ctx, v| b.forward(ctx, &v[0]))
        }),
        check!("blocks", "transformer_unit", |s, c| {
            let (store, b) = built(s, |i| TransformerUnit::new(i, AttnKind::Sgsa, 4, AttnConfig::new(2, 0.67), 2))?;
            let ins = vec![image(s, 32, &[1, 4, 4, 4]), image(s, 33, &[1, 4, 4, 4])];
            grad_check("transformer_unit", &store, &ins, c, move |ctx, v| b.forward(ctx, &v[0], Some(&v[1])))
        }),
        check!("blocks", "encoder_block", |s, c| {
            let (store, b) = built(s, |i| EncoderBlock::new(i, 4, 2, 1, AttnConfig::new(2, 0.67), 2, 2))?;
            let ins = vec![image(s, 34, &[1, 4, 4, 4]), image(s, 35, &[1, 4, 4, 4])];
            grad_check("encoder_block", &store, &ins, c, move |ctx, v| b.forward(ctx, &v[0], &v[1]))
        }),
        check!("blocks", "decoder_block", |s, c| {
            let (store, b) = built(s, |i| DecoderBlock::new(i, 4, 1, AttnConfig::new(2, 0.67), 2))?;
            let ins = vec![image(s, 36, &[1, 4, 4, 4]), image(s, 37, &[1, 4, 4, 4])];
            grad_check("decoder_block", &store, &ins, c, move |ctx, v| b.forward(ctx, &v[0], &v[1]))
        }),
        check!("blocks", "latent_block", |s, c| {
            let (store, b) = built(s, |i| LatentBlock::new(i, 4, 1, 2, 2))?;
            grad_check("latent_block", &store, &[image(s, 38, &[1, 4, 2, 2])], c, move |ctx, v| b.forward(ctx, &v[0]))
        }),
        check!("blocks", "refine", |s, c| {
            let (store, b) = built(s, |i| Refine::new(i, &[2, 4, 8]))?;
            let ins = vec![image(s, 39, &[1, 2, 4, 4]), image(s, 40, &[1, 4, 2, 2]), image(s, 41, &[1, 8, 1, 1])];
            grad_check("refine", &store, &ins, c, move |ctx, v| b.forward(ctx, v))
        }),
        check!("seg", "sgft", |s, c| {
            let (store, b) = built(s, |i| Sgft::new(i, 3))?;
            grad_check("sgft", &store, &[image(s, 50, &[1, 3, 3, 3])], c, move |ctx, v| b.forward(ctx, &v[0]))
        }),
        check!("seg", "seg_pyramid", |s, c| {
            let (store, b) = built(s, |i| SegPyramid::new(i, &[2, 4, 8, 16]))?;
            grad_check("seg_pyramid", &store, &[image(s, 51, &[1, 3, 16, 16])], c, move |ctx, v| {
                let g = b.forward(ctx, &v[0], 0.5)?;
                let parts = g.scales.iter().map(|t| t.reshape(&[t.value().numel()])).collect::<Result<Vec<_>>>()?;
                Var::concat(&parts, 0)
            })
        }),
        check!("loss", "l1", |s, c| loss_case(s, c, "l1", |ctx, a, b| l1_term(ctx, a, b))),
        check!("loss", "psnr_term", |s, c| loss_case(s, c, "psnr_term", |_, a, b| psnr_term(a, b))),
        check!("loss", "ssim_term", |s, c| loss_case(s, c, "ssim_term", |_, a, b| ssim_term(a, b))),
        check!("loss", "perceptual", |s, c| loss_case(s, c, "perceptual", |ctx, a, b| PerceptualNet::default().distance(ctx, a, b))),
        check!("loss", "loss_total", |s, c| {
            loss_case(s, c, "loss_total", |ctx, a, b| Ok(loss_total(ctx, &PerceptualNet::default(), a, b, &LossWeights::EARLY)?.0))
        }),
        check!("model", "model", |s, c| {
            let mut cfg = tiny_model_cfg();
            cfg.init_seed = s;
            let model = Model::new(&cfg)?;
            let x = image(s, 60, &[1, 3, 16, 16]).map(|v| 0.5 + 0.4 * v);
            let masks = vec![MaskSet::from_labels(16, 16, &[0; 256], 1, MaskSource::Naive)];
            let cfg = GradCheckConfig { max_coords: 3, max_params: Some(8), ..c.clone() };
            // The input enters as a constant: the segmentation map is derived
            // from its values outside the graph.
            grad_check("model", &model.store, &[], &cfg, |ctx, _| model.forward(ctx, &Var::constant(x.clone()), &masks))
        }),
    ]
}

fn conv_case(seed: u64, cfg: &GradCheckConfig, name: &str, mode: PadMode, groups: usize, k: usize) -> Result<GradCheckReport> {
    let mut r = rng(seed, 13);
    let (cin, cout) = (4, 4);
    let x = rt(&mut r, &[2, cin, 4, 5], -1.0, 1.0);
    let w = rt(&mut r, &[cout, cin / groups, k, k], -0.5, 0.5);
    let b = rt(&mut r, &[cout], -0.5, 0.5);
    op(name, cfg, vec![x, w, b], move |_, v| v[0].conv2d(&v[1], Some(&v[2]), mode, groups))
}

fn attn_case(seed: u64, cfg: &GradCheckConfig, name: &str, kind: AttnKind) -> Result<GradCheckReport> {
    let (store, a) = built(seed, |i| Attention::new(i, kind, 4, AttnConfig::new(2, 0.67)))?;
    let ins = vec![image(seed, 14, &[1, 4, 3, 3]), image(seed, 15, &[1, 4, 3, 3])];
    grad_check(name, &store, &ins, cfg, move |ctx, v| a.forward(ctx, &v[0], kind.is_guided().then_some(&v[1])))
}

fn loss_case(
    seed: u64,
    cfg: &GradCheckConfig,
    name: &str,
    f: fn(&Ctx<f64>, &Var<f64>, &Var<f64>) -> Result<Var<f64>>,
) -> Result<GradCheckReport> {
    let mut r = rng(seed, 16);
    let a = rt(&mut r, &[1, 3, 12, 12], 0.0, 1.0);
    let b = rt(&mut r, &[1, 3, 12, 12], 0.0, 1.0);
    op(name, cfg, vec![a, b], move |ctx, v| f(ctx, &v[0], &v[1]))
}

/// Runs every check whose module or name equals `filter` for seeds
/// `0..seeds` and merges the per-seed reports.
pub fn run_suite(filter: Option<&str>, seeds: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    for chk in checks() {
        if filter.is_some_and(|f| f != chk.module && f != chk.name) {
            continue;
        }
        let reports = (0..seeds)
            .map(|s| (chk.run)(s, &GradCheckConfig { seed: s, ..GradCheckConfig::default() }))
            .collect::<Result<Vec<_>>>()?;
        out.push((chk.module, GradCheckReport::merge(chk.name, &reports)));
    }
    Ok(out)
}

pub fn modules() -> Vec<&'static str> {
    let mut m: Vec<_> = checks().iter().map(|c| c.module).collect();
    m.dedup();
    m
}
