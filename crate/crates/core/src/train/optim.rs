//! Adam and the triangular learning-rate cycle.

use crate::autograd::Gradients;
use crate::container::Entry;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Triangular wave starting at `hi`, reaching `lo` at half a period.
pub fn cyclic_lr(step: u64, lo: f64, hi: f64, period: u64) -> f64 {
    if period == 0 {
        return hi;
    }
    let t = (step % period) as f64 / period as f64;
    let tri = if t < 0.5 { 2.0 * t } else { 2.0 - 2.0 * t };
    hi * (1.0 - tri) + lo * tri
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, indexed like the parameter store.
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update. Parameters without a gradient see zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::invalid("adam", format!("state covers {} parameters, store has {}", self.m.len(), store.len())));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.step.min(i32::MAX as u64) as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.param(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.tensor_mut(id);
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i] as f64);
                let mi = b1 * m.data()[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] as f64 + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let delta = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *pv = (*pv as f64 - delta) as f32;
            }
        }
        Ok(())
    }

    pub fn to_entries(&self, store: &ParamStore) -> Vec<(String, Entry)> {
        let mut out = vec![("adam.step".to_string(), Entry::U64 { shape: vec![1], data: vec![self.step] })];
        for (id, p) in store.iter() {
            out.push((format!("adam.m.{}", p.name), Entry::F32(self.m[id.0].clone())));
            out.push((format!("adam.v.{}", p.name), Entry::F32(self.v[id.0].clone())));
        }
        out
    }

    pub fn from_entries(store: &ParamStore, entries: &[(String, Entry)]) -> Result<Self> {
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, e)| e);
        let step = match find("adam.step") {
            Some(Entry::U64 { data, .. }) if data.len() == 1 => data[0],
            _ => return Err(Error::Checkpoint("optimizer section lacks adam.step".into())),
        };
        let mut adam = Adam::new(store);
        adam.step = step;
        for (id, p) in store.iter() {
            for (kind, slot) in [("m", &mut adam.m[id.0]), ("v", &mut adam.v[id.0])] {
                let key = format!("adam.{}.{}", kind, p.name);
                match find(&key) {
                    Some(Entry::F32(t)) if t.shape() == p.tensor.shape() => *slot = t.clone(),
                    Some(_) => return Err(Error::Checkpoint(format!("optimizer entry '{}' has the wrong type or shape", key))),
                    None => return Err(Error::Checkpoint(format!("optimizer entry '{}' missing", key))),
                }
            }
        }
        if entries.len() != 1 + 2 * store.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer section has {} entries, expected {}",
                entries.len(),
                1 + 2 * store.len()
            )));
        }
        Ok(adam)
    }
}
