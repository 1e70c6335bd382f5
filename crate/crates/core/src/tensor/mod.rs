//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Values are dense f64 buffers of rank 0, 1 or 2. Every op appends one
//! record to the tape; `backward` walks the records in reverse and
//! accumulates gradients into the designated leaves. There is no
//! broadcasting beyond scalar-times-tensor; shape mismatches are errors,
//! not implicit promotions.
//!
//! Gradients only flow into tensors created with [`Tape::leaf`]. Anything
//! created with [`Tape::constant`] is structurally outside the gradient:
//! ops whose inputs are all constants do not propagate, which is how
//! frozen encoder weights stay frozen without any masking logic.

mod check;
pub mod linalg;
mod ops;

pub use check::finite_diff_check;
pub(crate) use ops::Op;

use crate::error::{Error, Result};

/// Shape of a tape value. Rank 0 holds exactly one element.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dimension list: `[]`, `[n]`, or `[rows, cols]`.
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Scalar => vec![],
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }

    pub(crate) fn rows(&self) -> usize {
        match *self {
            Shape::Matrix(r, _) => r,
            _ => 1,
        }
    }

}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

/// Opaque handle to a value owned by a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    pub(crate) id: usize,
}

pub(crate) struct Slot {
    pub data: Vec<f64>,
    pub shape: Shape,
    pub requires_grad: bool,
}

/// Gradients of one backward pass, keyed by leaf.
///
/// Every leaf registered on the tape has an entry; leaves the loss does not
/// reach get an all-zero gradient rather than an error.
#[derive(Debug)]
pub struct Gradients {
    by_id: std::collections::HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `leaf`. Panics if `leaf` was not
    /// registered as a leaf on the tape that produced this value.
    pub fn wrt(&self, leaf: Tensor) -> &[f64] {
        self.by_id
            .get(&leaf.id)
            .map(Vec::as_slice)
            .expect("gradient queried for non-leaf tensor")
    }

    pub fn get(&self, leaf: Tensor) -> Option<&[f64]> {
        self.by_id.get(&leaf.id).map(Vec::as_slice)
    }
}

/// Records every op so the gradient can be replayed in reverse.
///
/// A tape is single-use: build a graph, call [`Tape::backward`] at most
/// once, then drop it. Adaptation loops create a fresh tape per step, which
/// is what makes every step first-order (no higher-order graph survives).
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    ops: Vec<Op>,
    leaves: Vec<usize>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_slot(&mut self, data: Vec<f64>, shape: Shape, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), shape.len());
        let id = self.slots.len();
        self.slots.push(Slot { data, shape, requires_grad });
        Tensor { id }
    }

    /// Registers a trainable leaf. Gradients accumulate here.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Shape) -> Result<Tensor> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "leaf",
                format!("data length {} does not match shape {shape}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("leaf"));
        }
        let t = self.push_slot(data, shape, true);
        self.leaves.push(t.id);
        Ok(t)
    }

    /// Registers a value that never receives gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: Shape) -> Result<Tensor> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "constant",
                format!("data length {} does not match shape {shape}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("constant"));
        }
        Ok(self.push_slot(data, shape, false))
    }

    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.constant(vec![v], Shape::Scalar)
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.slots[t.id].data
    }

    /// Value of a rank-0 tensor.
    pub fn scalar_value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.slots[t.id].shape, Shape::Scalar);
        self.slots[t.id].data[0]
    }

    pub fn shape(&self, t: Tensor) -> Shape {
        self.slots[t.id].shape
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.slots[t.id].requires_grad
    }

    pub(crate) fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub(crate) fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Records `op` producing `data`. Fails if the output holds NaN/Inf;
    /// a full scan is avoided by summing (any non-finite element makes the
    /// sum non-finite).
    pub(crate) fn emit(
        &mut self,
        op_name: &'static str,
        op: Op,
        data: Vec<f64>,
        shape: Shape,
        requires_grad: bool,
    ) -> Result<Tensor> {
        let total: f64 = data.iter().sum();
        if !total.is_finite() {
            return Err(Error::non_finite(op_name));
        }
        let out = self.push_slot(data, shape, requires_grad);
        self.ops.push(op);
        Ok(out)
    }

    pub(crate) fn any_requires_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&id| self.slots[id].requires_grad)
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient per leaf;
    /// leaves unreachable from `loss` get zeros.
    ///
    /// May be called once per tape. The pass consumes intermediate
    /// gradients as it goes, so a second traversal has nothing to read.
    pub fn backward(&mut self, loss: Tensor) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::contract("backward", "backward already ran on this tape"));
        }
        if self.slots[loss.id].shape != Shape::Scalar {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got {}", self.slots[loss.id].shape),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.slots.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        // Ops were recorded in topological order; each output is produced by
        // exactly one op, so its gradient is complete when that op is visited
        // and can be taken by value.
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            ops::backward_op(self, op, &mut grads)?;
        }

        let mut by_id = std::collections::HashMap::with_capacity(self.leaves.len());
        for &id in &self.leaves {
            let g = grads[id].take().unwrap_or_else(|| vec![0.0; self.slots[id].data.len()]);
            by_id.insert(id, g);
        }
        Ok(Gradients { by_id })
    }
}

/// Accumulate `f`'s contribution into the gradient buffer of slot `id`,
/// allocating zeros on first touch. No-op when the slot opted out of
/// gradients, which prunes whole frozen subgraphs from the reverse pass.
pub(crate) fn acc_grad<F>(slots: &[Slot], grads: &mut [Option<Vec<f64>>], id: usize, f: F)
where
    F: FnOnce(&mut [f64]),
{
    if !slots[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; slots[id].data.len()]);
    f(buf);
}
