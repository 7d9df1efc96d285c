use std::cell::{Cell, RefCell};
use std::fmt;

use crate::error::{Error, Result};

use super::Tensor;

/// Maps the gradient of a node's output to gradients of each of its parents
/// (`None` for parents that need none).
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    op: &'static str,
}

/// Ordered record of executed primitives. Single-threaded: one tape per training step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Vec::new(), None, "leaf")
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Vec::new(), None, "constant")
    }

    pub fn var(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        if requires_grad {
            self.leaf(value)
        } else {
            self.constant(value)
        }
    }

    fn push(
        &self,
        value: Tensor,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        op: &'static str,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of a primitive.
    ///
    /// This is the extension point for fused operations: `backward` receives the
    /// gradient of `value` and returns one entry per parent, in order. Non-finite
    /// forward values are rejected with `op` named in the error.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        for p in parents {
            if !std::ptr::eq(p.tape, self) {
                return Err(Error::Usage(format!("{op}: operand belongs to a different tape")));
            }
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (ids, bw): (Vec<usize>, Option<BackwardFn>) = if requires_grad {
            (parents.iter().map(|p| p.id).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        Ok(self.push(value, requires_grad, ids, bw, op))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape's backward closures.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?} from {}",
                root.value.shape(),
                root.op
            )));
        }
        if !root.requires_grad {
            return Err(Error::Usage(format!(
                "loss from {} does not depend on any tensor that requires grad",
                root.op
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &mut nodes[id];
            if let Some(bw) = node.backward.take() {
                let parent_grads = bw(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                let parents = node.parents.clone();
                for (pid, pg) in parents.into_iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    match &mut grads[pid] {
                        slot @ None => *slot = Some(pg),
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += b;
                            }
                        }
                    }
                }
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !node.parents.is_empty() {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn op(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({}, {:?})", self.id, self.op(), self.shape())
    }
}

/// Gradients of a scalar loss with respect to every leaf that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when the loss did not reach it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}
