use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::dense::{numel, Tensor};
use super::fault;
use crate::error::{Error, Result};

/// Kind tag for every recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Mul,
    Scale,
    Sum,
    MeanAxis,
    Softmax,
    MaskedSoftmax,
    LayerNorm,
    Relu,
    Gelu,
    Tanh,
    Reshape,
    Permute,
    Narrow,
    Concat,
    GatherRows,
    GatherFlat,
    BroadcastLeading,
    CrossEntropy,
}

pub(crate) type Backward = Box<dyn FnOnce(&[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    pub(crate) op: OpKind,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<usize>,
    pub(crate) backward: Option<Backward>,
}

/// Append-only record of a forward pass.
///
/// Node ids are assigned in creation order, so walking ids downwards from the
/// loss is a reverse topological traversal. One tape supports exactly one
/// backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    tracking: bool,
    consumed: Cell<bool>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    visited: RefCell<Vec<usize>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            tracking: true,
            consumed: Cell::new(false),
            grads: RefCell::new(Vec::new()),
            visited: RefCell::new(Vec::new()),
        }
    }

    /// A tape on which no leaf requires grad; nothing is kept for backward.
    pub fn inference() -> Self {
        Self {
            tracking: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `tensor` as a leaf. It is tracked iff the tape tracks and the
    /// tensor requires grad.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push_leaf(
            tensor.shape().to_vec(),
            Rc::new(tensor.data().to_vec()),
            self.tracking && tensor.requires_grad(),
        )
    }

    /// Records an untracked leaf.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push_leaf(
            tensor.shape().to_vec(),
            Rc::new(tensor.data().to_vec()),
            false,
        )
    }

    fn push_leaf(&self, shape: Vec<usize>, data: Rc<Vec<f64>>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: OpKind::Leaf,
            shape,
            data,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Pushes an op result. `make_backward` is only invoked when some input
    /// requires grad.
    pub(crate) fn record<F>(
        &self,
        op: OpKind,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[Var<'_>],
        make_backward: impl FnOnce() -> F,
    ) -> Result<Var<'_>>
    where
        F: FnOnce(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.record_shared(op, shape, Rc::new(data), inputs, make_backward)
    }

    pub(crate) fn record_checked_shared<F>(
        &self,
        op: OpKind,
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        inputs: &[Var<'_>],
        make_backward: impl FnOnce() -> F,
    ) -> Result<Var<'_>>
    where
        F: FnOnce(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.record_shared(op, shape, data, inputs, make_backward)
    }

    pub(crate) fn record_shared<F>(
        &self,
        op: OpKind,
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        inputs: &[Var<'_>],
        make_backward: impl FnOnce() -> F,
    ) -> Result<Var<'_>>
    where
        F: FnOnce(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::ForeignVar);
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        let backward: Option<Backward> = if requires_grad {
            Some(Box::new(make_backward()))
        } else {
            None
        };
        nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
            parents: inputs.iter().map(|v| v.id).collect(),
            backward,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn data_of(&self, id: usize) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes.borrow()[id].data)
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    /// Reverse-mode sweep from a scalar `loss`. Fills gradients for every
    /// tracked leaf reachable from it.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignVar);
        }
        if self.consumed.get() {
            return Err(Error::StaleTape);
        }
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if numel(&root.shape) != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Err(Error::UntrackedLoss);
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut visited = Vec::new();
        grads[loss.id] = Some(vec![1.0]);
        let fault = fault::active();
        for id in (0..=loss.id).rev() {
            let Some(backward) = nodes[id].backward.take() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            visited.push(id);
            let op = nodes[id].op;
            let mut parent_grads = backward(&g);
            if let Some((kind, factor)) = fault {
                if kind == op {
                    for pg in parent_grads.iter_mut().flatten() {
                        pg.iter_mut().for_each(|v| *v *= factor);
                    }
                }
            }
            let parents = std::mem::take(&mut nodes[id].parents);
            for (p, pg) in parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[*p].requires_grad {
                    continue;
                }
                if pg.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op });
                }
                match &mut grads[*p] {
                    Some(acc) => super::kernels::add_assign(acc, &pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            nodes[id].parents = parents;
        }
        // only leaves keep their gradients
        for (id, node) in nodes.iter().enumerate() {
            if node.op != OpKind::Leaf {
                grads[id] = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        *self.visited.borrow_mut() = visited;
        Ok(())
    }

    /// Gradient for a tracked leaf after [`backward`](Self::backward).
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(self.shape_of(var.id), g.clone()).expect("finite gradient"))
    }

    pub(crate) fn take_grad(&self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.borrow_mut().get_mut(var.id)?.take()
    }

    /// Node ids whose backward rule ran, in visiting order.
    pub fn backward_order(&self) -> Vec<usize> {
        self.visited.borrow().clone()
    }

    /// Parent ids of a node.
    pub fn parents(&self, var: Var<'_>) -> Vec<usize> {
        self.nodes.borrow()[var.id].parents.clone()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        self.tape.data_of(self.id)
    }

    /// Copies the current value off the tape.
    pub fn value(&self) -> Tensor {
        Tensor::new(self.shape(), self.data_rc().as_ref().clone()).expect("tape values are finite")
    }

    pub fn item(&self) -> f64 {
        let d = self.data_rc();
        assert_eq!(d.len(), 1, "item() on non-scalar");
        d[0]
    }
}
