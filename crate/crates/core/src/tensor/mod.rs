//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; each op
//! pushes its output value together with a closure that routes the output
//! gradient to the op's inputs. [`Tape::backward`] walks the list in reverse
//! and returns gradients for the leaf nodes.
//!
//! Everything is `f64`. Nodes whose inputs are all constants skip gradient
//! bookkeeping entirely, so frozen-model subgraphs cost nothing extra on the
//! backward pass.

mod conv;
mod ops;

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

pub use conv::{bilinear_resize_raw, conv2d_forward, PadMode};

/// Dynamic-shape `f64` tensor, the only array type the tape works with.
pub type ArrD = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

/// Closure that receives the node's output gradient and accumulates
/// contributions into the parents' slots.
type BackFn = Box<dyn Fn(&ArrD, &mut GradStore)>;

struct Node {
    value: Rc<ArrD>,
    /// Whether any ancestor is a gradient leaf.
    needs_grad: bool,
    back: Option<BackFn>,
}

/// Gradient accumulator indexed by node id.
pub struct GradStore {
    slots: Vec<Option<ArrD>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        GradStore {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    /// Accumulate `g` into slot `id`.
    pub fn accumulate(&mut self, id: usize, g: ArrD) {
        let g = if g.is_standard_layout() {
            g
        } else {
            g.as_standard_layout().to_owned()
        };
        match &mut self.slots[id] {
            Some(acc) => acc.zip_mut_with(&g, |a, b| *a += *b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of `v`, if any was produced.
    pub fn get(&self, v: Var) -> Option<&ArrD> {
        self.slots[v.id].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when none reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrD {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrD::zeros(IxDyn(shape)),
        }
    }

    fn take(&mut self, id: usize) -> Option<ArrD> {
        self.slots[id].take()
    }
}

/// Records one forward pass and produces gradients on demand.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a gradient leaf (trainable input).
    pub fn leaf(&self, value: ArrD) -> Var {
        self.push(value, true, None)
    }

    /// Register a constant; gradients never flow into it.
    pub fn constant(&self, value: ArrD) -> Var {
        self.push(value, false, None)
    }

    /// Forward value of a node (cheap `Rc` clone).
    pub fn value(&self, v: Var) -> Rc<ArrD> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].needs_grad
    }

    pub(crate) fn push(&self, value: ArrD, needs_grad: bool, back: Option<BackFn>) -> Var {
        // Ops index into raw slices, so every stored value must be standard
        // layout.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            needs_grad,
            back,
        });
        Var { id }
    }

    /// Push an op node: `parents` carry gradient routing closures that are
    /// only installed when at least one parent needs gradients.
    pub(crate) fn push_op(&self, value: ArrD, parents: &[Var], back: BackFn) -> Var {
        let needs = parents.iter().any(|p| self.needs_grad(*p));
        self.push(value, needs, if needs { Some(back) } else { None })
    }

    /// Run the backward pass from scalar node `loss`.
    ///
    /// Returns a store holding gradients for every leaf reachable from
    /// `loss`; intermediate gradients are dropped as soon as they have been
    /// consumed. Accumulation order is fixed by node id, so results are
    /// bit-reproducible.
    pub fn backward(&self, loss: Var) -> GradStore {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward() expects a scalar loss"
        );
        let mut store = GradStore::new(loss.id + 1);
        store.accumulate(loss.id, ArrD::ones(IxDyn(&[1])));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                store.take(id);
                continue;
            }
            match &node.back {
                Some(back) => {
                    // Interior node: route gradient to parents, then free it.
                    if let Some(g) = store.take(id) {
                        back(&g, &mut store);
                    }
                }
                None => {
                    // Leaf: keep the accumulated gradient in place.
                }
            }
        }
        store
    }
}

/// Build a dynamic array from shape and data.
pub fn arr(shape: &[usize], data: Vec<f64>) -> ArrD {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length mismatch")
}

/// All-zeros array.
pub fn zeros(shape: &[usize]) -> ArrD {
    ArrD::zeros(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_and_constant_roundtrip() {
        let t = Tape::new();
        let x = t.leaf(arr(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(t.shape(x), &[2, 2]);
        assert_eq!(t.value(x)[[1, 1]], 4.0);
        let c = t.constant(zeros(&[3]));
        assert!(!t.needs_grad(c));
        assert!(t.needs_grad(x));
    }

    #[test]
    fn backward_through_add_mul() {
        // loss = sum(x * y + x), d/dx = y + 1, d/dy = x
        let t = Tape::new();
        let x = t.leaf(arr(&[2], vec![2.0, 3.0]));
        let y = t.leaf(arr(&[2], vec![5.0, 7.0]));
        let xy = t.mul(x, y);
        let s = t.add(xy, x);
        let loss = t.sum_all(s);
        assert_eq!(t.scalar(loss), 2.0 * 5.0 + 2.0 + 3.0 * 7.0 + 3.0);
        let grads = t.backward(loss);
        let gx = grads.get(x).unwrap();
        let gy = grads.get(y).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[6.0, 8.0]);
        assert_eq!(gy.as_slice().unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t = Tape::new();
        let x = t.leaf(arr(&[2], vec![1.0, 2.0]));
        let c = t.constant(arr(&[2], vec![3.0, 4.0]));
        let loss = t.sum_all(t.mul(x, c));
        let grads = t.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn diamond_graph_accumulates() {
        // loss = sum(x*x) via two separate consumers of x.
        let t = Tape::new();
        let x = t.leaf(arr(&[3], vec![1.0, -2.0, 0.5]));
        let a = t.scale(x, 2.0);
        let b = t.scale(x, 3.0);
        let loss = t.sum_all(t.add(a, b));
        let grads = t.backward(loss);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[5.0, 5.0, 5.0]);
    }
}
