//! Tape-free reverse-mode differentiation.
//!
//! Every [`Var`] owns its value and, when it depends on something that
//! requires a gradient, links to its parents together with a backward
//! closure. Nodes that depend on nothing differentiable drop their parents
//! immediately, so inference keeps only live activations in memory.
//!
//! A [`Ctx`] holds one forward pass' view of the parameters (converted to the
//! pass' element type) and the decision tape used to freeze piecewise
//! choices (top-k selections, ReLU and |x| branches) while finite
//! differences perturb the inputs.

mod broadcast;
mod conv;
mod elementwise;
mod linalg;
mod nn;
mod shape;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

pub use conv::{conv2d_forward, PadMode};
pub(crate) use nn::topk_rows;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

type BackwardFn<T> = dyn Fn(&Tensor<T>, &Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>>;

struct Node<T: Real> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<Box<BackwardFn<T>>>,
    param: Option<ParamId>,
}

/// Handle to a value in the differentiation graph. Cloning is cheap.
pub struct Var<T: Real = f32>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl<T: Real> Var<T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node { id: next_id(), value, requires_grad, parents: vec![], backward: None, param: None }))
    }

    fn param_leaf(value: Tensor<T>, requires_grad: bool, id: ParamId) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents: vec![],
            backward: None,
            param: Some(id),
        }))
    }

    /// Records an op result. The backward closure receives the output
    /// gradient, the output value and the parents, and returns one optional
    /// gradient per parent.
    pub(crate) fn from_op<F>(value: Tensor<T>, parents: Vec<Var<T>>, backward: F) -> Self
    where
        F: Fn(&Tensor<T>, &Tensor<T>, &[Var<T>]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if parents.iter().any(|p| p.requires_grad()) {
            Var(Rc::new(Node {
                id: next_id(),
                value,
                requires_grad: true,
                parents,
                backward: Some(Box::new(backward)),
                param: None,
            }))
        } else {
            Self::constant(value)
        }
    }

    #[inline]
    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    #[inline]
    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn param_id(&self) -> Option<ParamId> {
        self.0.param
    }

    /// Reverse-mode sweep from a scalar. Returns gradients of every leaf
    /// that requires one.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value().numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        let mut leaves = Gradients::default();
        if !self.requires_grad() {
            return Ok(leaves);
        }
        let order = self.topo_order();
        grads.insert(self.id(), Tensor::full(self.shape().to_vec(), T::one()));
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else { continue };
            match &node.0.backward {
                Some(f) => {
                    let parent_grads = f(&g, &node.0.value, &node.0.parents);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape(), "gradient shape");
                        match grads.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                    *a += *b;
                                }
                            }
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    if let Some(pid) = node.0.param {
                        leaves.params.insert(pid, g.clone());
                    }
                    leaves.by_node.insert(node.id(), g);
                }
            }
        }
        Ok(leaves)
    }

    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !visited.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in v.0.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

/// Leaf gradients produced by [`Var::backward`].
#[derive(Default)]
pub struct Gradients<T: Real> {
    by_node: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.by_node.get(&v.id())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Parameters require gradients; output is not clamped.
    Train,
    /// No gradients; model output clamped to the valid image range.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DecisionMode {
    Free,
    Record,
    Replay,
}

struct DecisionTape {
    mode: DecisionMode,
    log: Vec<Vec<bool>>,
    cursor: usize,
}

/// One forward pass' parameter view and piecewise-decision tape.
pub struct Ctx<T: Real = f32> {
    values: Vec<Tensor<T>>,
    leaves: RefCell<Vec<Option<Var<T>>>>,
    mode: Mode,
    decisions: RefCell<DecisionTape>,
}

impl<T: Real> Ctx<T> {
    pub fn new(store: &ParamStore, mode: Mode) -> Self {
        let values: Vec<Tensor<T>> = store.iter().map(|(_, p)| p.tensor.cast()).collect();
        Self::with_values(values, mode)
    }

    /// A context without parameters, for using the ops directly.
    pub fn bare(mode: Mode) -> Self {
        Self::with_values(vec![], mode)
    }

    fn with_values(values: Vec<Tensor<T>>, mode: Mode) -> Self {
        let n = values.len();
        Ctx {
            values,
            leaves: RefCell::new(vec![None; n]),
            mode,
            decisions: RefCell::new(DecisionTape { mode: DecisionMode::Free, log: vec![], cursor: 0 }),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// The parameter as a graph leaf. Repeated calls within a pass return the
    /// same leaf, so gradients from every use accumulate in one place.
    pub fn param(&self, id: ParamId) -> Var<T> {
        let mut leaves = self.leaves.borrow_mut();
        if let Some(v) = &leaves[id.0] {
            return v.clone();
        }
        let v = Var::param_leaf(self.values[id.0].clone(), self.mode == Mode::Train, id);
        leaves[id.0] = Some(v.clone());
        v
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Mutable access to a parameter value; invalidates cached leaves.
    pub fn param_value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.leaves.get_mut().iter_mut().for_each(|l| *l = None);
        &mut self.values[id.0]
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    /// Drops cached parameter leaves and rewinds the decision tape, so the
    /// next forward starts a fresh graph.
    pub fn begin_pass(&self) {
        self.leaves.borrow_mut().iter_mut().for_each(|l| *l = None);
        self.decisions.borrow_mut().cursor = 0;
    }

    /// Subsequent piecewise decisions are computed and logged.
    pub fn record_decisions(&self) {
        let mut d = self.decisions.borrow_mut();
        d.mode = DecisionMode::Record;
        d.log.clear();
        d.cursor = 0;
    }

    /// Subsequent piecewise decisions are replayed from the log, in order.
    pub fn replay_decisions(&self) {
        let mut d = self.decisions.borrow_mut();
        d.mode = DecisionMode::Replay;
        d.cursor = 0;
    }

    pub fn free_decisions(&self) {
        let mut d = self.decisions.borrow_mut();
        d.mode = DecisionMode::Free;
        d.log.clear();
        d.cursor = 0;
    }

    pub(crate) fn decide(&self, len: usize, compute: impl FnOnce() -> Vec<bool>) -> Vec<bool> {
        let mut d = self.decisions.borrow_mut();
        match d.mode {
            DecisionMode::Free => compute(),
            DecisionMode::Record => {
                let v = compute();
                d.log.push(v.clone());
                v
            }
            DecisionMode::Replay => {
                let i = d.cursor;
                d.cursor += 1;
                let v = d.log.get(i).cloned().expect("decision replay ran past the recorded log");
                assert_eq!(v.len(), len, "replayed decision has a different extent");
                v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Var::<f32>::leaf(Tensor::ones([2]), true);
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constant_scale_gradient_is_exact() {
        let x = Var::<f32>::leaf(Tensor::from_vec([3], vec![1.0, -2.0, 0.5]), true);
        let y = x.scale(3.5).sum();
        let g = y.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[3.5, 3.5, 3.5]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Var::<f64>::leaf(Tensor::from_vec([1], vec![3.0]), true);
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
        let g = y.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn inference_graph_drops_parents() {
        let x = Var::<f32>::constant(Tensor::ones([4]));
        let y = x.scale(2.0);
        assert!(!y.requires_grad());
        assert!(y.0.parents.is_empty());
    }
}
