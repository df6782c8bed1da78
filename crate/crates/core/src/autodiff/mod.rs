//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes, each holding its
//! value and a backward closure that maps the node's output gradient to
//! per-parent gradient contributions. [`Tape::backward`] walks the list in
//! reverse and accumulates gradients in node order, so a given graph always
//! produces bit-identical gradients.
//!
//! The engine is generic over [`Scalar`] (`f32` for training, `f64` for
//! finite-difference verification).

use std::cell::RefCell;
use std::fmt;

use ndarray::{ArrayD, IxDyn};

mod image;
pub(crate) mod ops;
mod seq;

pub use image::{im2col, BnStats};
pub use seq::{attention_forward, attention_probs, dilated_conv1d_forward};

/// Floating-point element type usable by the tape.
pub trait Scalar: ndarray::NdFloat + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackwardArgs<'a, F: Scalar> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a ArrayD<F>,
    /// This node's forward value.
    pub out: &'a ArrayD<F>,
    /// Forward values of the parents, in `parents` order.
    pub inputs: &'a [&'a ArrayD<F>],
}

type BackwardFn<F> = Box<dyn Fn(&BackwardArgs<F>) -> Vec<Option<ArrayD<F>>>>;

struct Record<F: Scalar> {
    parents: Vec<Var>,
    backward: BackwardFn<F>,
}

struct Inner<F: Scalar> {
    values: Vec<ArrayD<F>>,
    records: Vec<Option<Record<F>>>,
}

/// Records a forward computation and computes reverse-mode gradients.
pub struct Tape<F: Scalar> {
    inner: RefCell<Inner<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.inner.borrow().values.len())
    }
}

/// Force row-major contiguous storage so later reshapes are always valid.
pub(crate) fn standardize<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.raw_dim();
        let flat: Vec<F> = a.iter().cloned().collect();
        ArrayD::from_shape_vec(shape, flat).expect("standardize preserves shape")
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                records: Vec::new(),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf node (input or parameter). Leaves have no backward rule;
    /// gradients accumulate at them and are read from [`Gradients`].
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(standardize(value));
        inner.records.push(None);
        Var(inner.values.len() - 1)
    }

    /// Insert a scalar leaf.
    pub fn scalar(&self, v: F) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn push(&self, value: ArrayD<F>, parents: Vec<Var>, backward: BackwardFn<F>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(standardize(value));
        inner.records.push(Some(Record { parents, backward }));
        Var(inner.values.len() - 1)
    }

    /// Clone out a node's value.
    pub fn value(&self, v: Var) -> ArrayD<F> {
        self.inner.borrow().values[v.0].clone()
    }

    /// Read a scalar node.
    pub fn scalar_value(&self, v: Var) -> F {
        let inner = self.inner.borrow();
        let a = &inner.values[v.0];
        debug_assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        *a.iter().next().expect("empty tensor")
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().values[v.0].shape().to_vec()
    }

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// influences the root; other nodes report `None`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.values[root.0].len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; inner.values.len()];
        grads[root.0] = Some(ArrayD::from_elem(inner.values[root.0].raw_dim(), F::one()));

        for i in (0..=root.0).rev() {
            let Some(record) = &inner.records[i] else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&ArrayD<F>> =
                record.parents.iter().map(|p| &inner.values[p.0]).collect();
            let args = BackwardArgs {
                grad: &grad,
                out: &inner.values[i],
                inputs: &inputs,
            };
            let contribs = (record.backward)(&args);
            debug_assert_eq!(contribs.len(), record.parents.len());
            for (parent, contrib) in record.parents.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(
                    c.shape(),
                    inner.values[parent.0].shape(),
                    "gradient shape mismatch for parent {}",
                    parent.0
                );
                // Keep accumulated gradients row-major so backward closures
                // may reshape views of them freely.
                let c = standardize(c);
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
            // Re-establish the root seed slot if the root feeds itself (it cannot),
            // otherwise the grad for node i stays consumed: interior gradients are
            // not retained to keep memory bounded.
            if i == root.0 {
                grads[i] = Some(grad);
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward pass, indexed by [`Var`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient w.r.t. `v`, if `v` influenced the root.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Move the gradient out, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient w.r.t. `v`, zeros if unreached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_accumulates_fanout() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(arr1(&[2.0, 3.0]).into_dyn());
        // y = x * x, z = sum(y) + sum(x)  => dz/dx = 2x + 1
        let y = tape.mul(x, x);
        let sy = tape.sum(y);
        let sx = tape.sum(x);
        let z = tape.add(sy, sx);
        let grads = tape.backward(z);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.shape(), &[2]);
        assert!((gx[[0]] - 5.0).abs() < 1e-12);
        assert!((gx[[1]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn unreached_nodes_have_no_grad() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(arr1(&[1.0]).into_dyn());
        let y = tape.leaf(arr1(&[1.0]).into_dyn());
        let s = tape.sum(x);
        let grads = tape.backward(s);
        assert!(grads.get(y).is_none());
        assert!(grads.get(x).is_some());
    }
}
