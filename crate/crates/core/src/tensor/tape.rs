use alloc::sync::Arc;
use alloc::vec::Vec;

use super::ops::Op;
use super::params::{Grads, ParamId, ParameterStore};
use super::{numel, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) op: Op,
    /// Whether an adjoint must flow into this node.
    pub(crate) tracked: bool,
}

/// Branch decisions of the piecewise ops (rectifier side, clamp region, max
/// index) in the order they were taken.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Branches(Vec<Vec<usize>>);

#[derive(Default)]
enum BranchMode {
    #[default]
    Free,
    Record(Vec<Vec<usize>>),
    Replay(Arc<Branches>, usize),
}

/// Append-only record of one forward computation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// computation graph; backward simply walks the vector in reverse.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    params: Vec<Option<Var>>,
    branches: BranchMode,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that remembers every branch decision; see [`Tape::take_branches`].
    pub fn recording() -> Self {
        Self {
            branches: BranchMode::Record(Vec::new()),
            ..Self::default()
        }
    }

    /// A tape whose piecewise ops follow `branches` instead of their inputs,
    /// so that the same sequence of ops evaluates one fixed smooth piece of
    /// the function. Meant for forward evaluation only: adjoints still follow
    /// the input values.
    ///
    /// Panics if the ops differ in kind or size from the recorded ones.
    pub fn replaying(branches: Arc<Branches>) -> Self {
        Self {
            branches: BranchMode::Replay(branches, 0),
            ..Self::default()
        }
    }

    /// Decisions taken so far by a [`Tape::recording`] tape (empty otherwise).
    pub fn take_branches(&mut self) -> Branches {
        match &mut self.branches {
            BranchMode::Record(b) => Branches(core::mem::take(b)),
            _ => Branches::default(),
        }
    }

    /// Decision vector of the next piecewise op: `natural` computed from the
    /// inputs, or the replayed one.
    pub(crate) fn choose(&mut self, natural: impl FnOnce(&Self) -> Vec<usize>) -> Vec<usize> {
        if let BranchMode::Replay(b, pos) = &mut self.branches {
            let d = b.0.get(*pos).expect("replayed tape ran more piecewise ops than recorded").clone();
            *pos += 1;
            return d;
        }
        let d = natural(self);
        if let BranchMode::Record(b) = &mut self.branches {
            b.push(d.clone());
        }
        d
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, t: Tensor, tracked: bool) -> Var {
        let Tensor { shape, data } = t;
        self.nodes.push(Node {
            shape,
            value: data,
            grad: None,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf; its adjoint is available after [`Tape::backward`].
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf that never receives an adjoint (data, noise draws, priors).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.push_leaf(Tensor::scalar(v), false)
    }

    /// Binds a stored parameter to this tape. Repeated calls with the same id
    /// return the same leaf, so adjoints from every use accumulate in one place.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.params.get(id.0) {
            return *v;
        }
        let v = self.push_leaf(store.tensor(id).clone(), true);
        if self.params.len() <= id.0 {
            self.params.resize(id.0 + 1, None);
        }
        self.params[id.0] = Some(v);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated adjoint of `v`, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears every adjoint on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.tracked {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    pub(crate) fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Propagates d(root)/d(node) to every tracked node reachable from `root`.
    ///
    /// Leaf adjoints accumulate across calls; intermediate adjoints are
    /// consumed as they are propagated.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        self.accumulate(root, &[1.0]);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backward_node(i, &grad);
        }
        Ok(())
    }

    /// Adjoints of every parameter bound to this tape, indexed like `store`.
    pub fn param_grads(&self, store: &ParameterStore) -> Grads {
        let mut grads = Grads::zeros_like(store);
        for (i, v) in self.params.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = &self.nodes[v.0].grad {
                    grads.get_mut(ParamId(i)).copy_from_slice(g);
                }
            }
        }
        grads
    }
}
