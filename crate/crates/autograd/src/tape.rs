//! Recording tape and reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::Tensor;

/// Maps the upstream gradient to one optional gradient per parent.
///
/// The flag slice says which parents need a gradient; entries for the others
/// may be `None` and are ignored.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    needs_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Records a computation so gradients can be pulled back through it.
///
/// Parameters bound with [`Tape::param`] or [`Tape::constant`] are memoised by
/// the address of the borrowed tensor, so reusing one weight tensor in several
/// places (recurrent stages sharing a unit) yields a single leaf whose gradient
/// accumulates every use. The borrowed tensors must stay in place for as long
/// as the tape is used.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<usize, usize>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn fixed(&self, value: Tensor) -> Var<'_> {
        self.leaf(Rc::new(value), false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.fixed(Tensor::scalar(value))
    }

    fn leaf(&self, value: Rc<Tensor>, needs_grad: bool) -> Var<'_> {
        self.push(Node {
            value,
            needs_grad,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Binds a trainable tensor. Repeated calls with the same tensor return the
    /// same leaf.
    pub fn param(&self, tensor: &Tensor) -> Var<'_> {
        self.bind(tensor, true)
    }

    /// Binds a frozen tensor. Gradients still flow through the operations it
    /// takes part in, but never into the tensor itself.
    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.bind(tensor, false)
    }

    fn bind(&self, tensor: &Tensor, needs_grad: bool) -> Var<'_> {
        let key = tensor as *const Tensor as usize;
        if let Some(&id) = self.bound.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let var = self.leaf(Rc::new(tensor.clone()), needs_grad);
        self.bound.borrow_mut().insert(key, var.id);
        var
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Records an operation. When no parent needs a gradient the backward
    /// closure is dropped and the result behaves like a constant.
    pub(crate) fn op(&self, value: impl Into<Rc<Tensor>>, parents: Vec<usize>, backward: BackwardFn) -> Var<'_> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        self.push(Node {
            value: value.into(),
            needs_grad,
            parents: if needs_grad { parents } else { Vec::new() },
            backward: if needs_grad { Some(backward) } else { None },
        })
    }

    /// Reverse sweep from a single-element `output`.
    ///
    /// Only leaf gradients are retained in the result.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.numel(),
            1,
            "backward() needs a single-element output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[output.id].needs_grad {
            grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape().to_vec(), 1.0));
        }
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let parent_grads = backward(&upstream, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&parent, grad), wanted) in node.parents.iter().zip(parent_grads).zip(mask) {
                let Some(grad) = grad else { continue };
                if !wanted {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Gradients {
            grads,
            bound: self.bound.borrow().clone(),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: HashMap<usize, usize>,
}

impl Gradients {
    /// Gradient with respect to a leaf variable, `None` when nothing flowed.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a tensor bound with [`Tape::param`].
    pub fn param(&self, tensor: &Tensor) -> Option<&Tensor> {
        let key = tensor as *const Tensor as usize;
        self.bound
            .get(&key)
            .and_then(|&id| self.grads.get(id))
            .and_then(Option::as_ref)
    }

    /// Like [`Gradients::param`] but yields zeros when no gradient flowed.
    pub fn param_or_zeros(&self, tensor: &Tensor) -> Tensor {
        self.param(tensor)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// Same value, cut off from the gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf(self.value(), false)
    }
}
