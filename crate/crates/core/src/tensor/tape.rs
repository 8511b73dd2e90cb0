use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::{Float, Result, Tensor, TensorError};

/// Backward rule: receives the output gradient and, per input, whether
/// that input needs a gradient. Returns one optional gradient per input.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Eager recording tape. Nodes are appended in execution order, so the
/// node list is always topologically sorted. A tape serves exactly one
/// forward/backward pass.
pub struct Tape<F: Float> {
    values: RefCell<Vec<Rc<Tensor<F>>>>,
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: RefCell::new(Vec::new()),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push_node(value, Vec::new(), requires_grad, None)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    fn push_node(
        &self,
        value: Tensor<F>,
        inputs: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<F>>,
    ) -> Var<'_, F> {
        let mut values = self.values.borrow_mut();
        let id = values.len();
        values.push(Rc::new(value));
        self.nodes.borrow_mut().push(Node {
            inputs,
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }

    /// Records an op output. The backward rule is dropped when no input
    /// requires a gradient.
    pub(crate) fn push<'t>(
        &'t self,
        value: Tensor<F>,
        inputs: &[Var<'t, F>],
        backward: impl Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var<'t, F> {
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)));
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let backward: Option<BackwardFn<F>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(
            value,
            inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward,
        )
    }

    fn value(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.values.borrow()[id])
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Runs reverse-mode accumulation from a scalar loss. Gradients of
    /// leaves used more than once are summed. The tape's backward rules
    /// are consumed.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if self.consumed.replace(true) {
            return Err(TensorError::Consumed);
        }
        let loss_value = self.value(loss.id);
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let n = self.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_value.shape().to_vec(), F::one()));

        for id in (0..=loss.id).rev() {
            let (inputs, backward) = {
                let mut nodes = self.nodes.borrow_mut();
                let node = &mut nodes[id];
                if node.inputs.is_empty() {
                    continue;
                }
                (node.inputs.clone(), node.backward.take())
            };
            let Some(backward) = backward else { continue };
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = inputs.iter().map(|&i| self.requires_grad(i)).collect();
            let input_grads = backward(&grad_out, &needs);
            debug_assert_eq!(input_grads.len(), inputs.len());
            for ((&input, g), need) in inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.values.borrow()[input].shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Only leaf gradients survive; intermediates were taken above.
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, F: Float> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Float> Clone for Var<'_, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<F: Float> Copy for Var<'_, F> {}

impl<F: Float> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, F: Float> Var<'t, F> {
    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.values.borrow()[self.id].shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }
}
