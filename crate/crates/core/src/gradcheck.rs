//! Finite-difference verification of analytic gradients, run in `f64`.
//!
//! The function under test maps a set of input tensors (and the parameters
//! of a store) to an output tensor. The output is reduced to a scalar with a
//! fixed random projection, analytic gradients are taken with one backward
//! pass, and each checked coordinate is compared against a central
//! difference. Piecewise decisions (top-k selections, ReLU and |x| branches)
//! recorded during the analytic pass are replayed during every perturbed
//! pass, so the difference quotient differentiates the same smooth piece.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Ctx, Mode, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor when it is larger than this.
    pub max_coords: usize,
    /// Check only this many randomly chosen parameter tensors.
    pub max_params: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-4, tolerance: 1e-3, max_coords: 48, max_params: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TensorError {
    pub name: String,
    pub rel_err: f64,
    pub coords: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn coords(&self) -> usize {
        self.tensors.iter().map(|t| t.coords).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance && self.tensors.iter().all(|t| t.rel_err.is_finite())
    }

    /// Combines reports of the same check run at several seeds.
    pub fn merge(name: &str, reports: &[GradCheckReport]) -> GradCheckReport {
        GradCheckReport {
            name: name.to_string(),
            tolerance: reports.first().map_or(0.0, |r| r.tolerance),
            tensors: reports.iter().flat_map(|r| r.tensors.iter().cloned()).collect(),
        }
    }
}

/// Relative error of `analytic` against `numeric` over the checked
/// coordinates, scaled by the largest magnitude in either gradient.
fn relative_error(analytic: &[f64], numeric: &[f64], scale: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let num_scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(num_scale).max(1e-8)
}

fn coords(numel: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= max {
        (0..numel).collect()
    } else {
        let mut v = sample(rng, numel, max).into_vec();
        v.sort_unstable();
        v
    }
}

pub fn grad_check<F>(
    name: &str,
    store: &ParamStore,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Ctx<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut ctx = Ctx::<f64>::new(store, Mode::Train);

    ctx.begin_pass();
    ctx.record_decisions();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|t| Var::leaf(t.clone(), true)).collect();
    let out = f(&ctx, &leaves)?;
    let proj = Tensor::from_fn(out.shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
    let proj_var = Var::constant(proj.clone());
    let loss = out.mul(&proj_var)?.sum();
    let grads = loss.backward()?;
    ctx.replay_decisions();

    let eval = |ctx: &Ctx<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        ctx.begin_pass();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
        let out = f(ctx, &vars)?;
        Ok(out.value().data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut tensors = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(leaf).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()));
        let scale = analytic.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let picks = coords(analytic.numel(), cfg.max_coords, &mut rng);
        let mut num = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let up = eval(&ctx, &work)?;
            work[i].data_mut()[j] = orig - cfg.step;
            let down = eval(&ctx, &work)?;
            work[i].data_mut()[j] = orig;
            num.push((up - down) / (2.0 * cfg.step));
        }
        let ana: Vec<f64> = picks.iter().map(|&j| analytic.data()[j]).collect();
        tensors.push(TensorError { name: format!("input{}", i), rel_err: relative_error(&ana, &num, scale), coords: picks.len() });
    }

    let ids: Vec<ParamId> = match cfg.max_params {
        Some(m) => coords(store.len(), m, &mut rng).into_iter().map(ParamId).collect(),
        None => store.ids().collect(),
    };
    for id in ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape().to_vec()));
        let scale = analytic.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let picks = coords(analytic.numel(), cfg.max_coords, &mut rng);
        let mut num = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = ctx.param_value(id).data()[j];
            set_param(&mut ctx, id, j, orig + cfg.step);
            let up = eval(&ctx, &work)?;
            set_param(&mut ctx, id, j, orig - cfg.step);
            let down = eval(&ctx, &work)?;
            set_param(&mut ctx, id, j, orig);
            num.push((up - down) / (2.0 * cfg.step));
        }
        let ana: Vec<f64> = picks.iter().map(|&j| analytic.data()[j]).collect();
        tensors.push(TensorError {
            name: store.get(id).name.clone(),
            rel_err: relative_error(&ana, &num, scale),
            coords: picks.len(),
        });
    }
    ctx.free_decisions();

    Ok(GradCheckReport { name: name.to_string(), tolerance: cfg.tolerance, tensors })
}

fn set_param(ctx: &mut Ctx<f64>, id: ParamId, j: usize, v: f64) {
    ctx.param_value_mut(id).data_mut()[j] = v;
}
