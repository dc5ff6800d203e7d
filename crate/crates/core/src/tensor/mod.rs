//! Dense row-major tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations that take
//! at least one input with `requires_grad` record a [`DiffRecord`] holding the
//! inputs and a backward closure; [`Tensor::backward`] walks the recorded
//! graph in reverse topological order and accumulates gradients into leaves.

mod float;
mod grad_check;
pub mod macs;
pub(crate) mod ops;
mod shape;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use float::{DType, Float};
pub(crate) use float::{gemm, Mat};
pub use grad_check::{grad_check, GradCheckReport};
pub use ops::activation::Activation;
pub use ops::conv::ConvSpec;
pub use ops::norm::{normalize, NormMode, RunningStats, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use shape::{contiguous_strides, numel};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording differentiation records.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

/// Recorded operation: identifier, inputs and the rule mapping the output
/// gradient onto one optional gradient per input.
pub struct DiffRecord<T: Float> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    record: Option<DiffRecord<T>>,
}

/// N-dimensional array of `T` (default `f32`).
pub struct Tensor<T: Float = f32>(Rc<Node<T>>);

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data();
        let head: Vec<T> = d.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.record.as_ref().map(|r| r.op))
            .field("data", &head)
            .finish()
    }
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl<T: Float> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Rc<Vec<T>>, requires_grad: bool, record: Option<DiffRecord<T>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            record,
        }))
    }

    /// Builds a constant tensor, validating that `shape` matches `data`.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Config(format!(
                "tensor of shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), Rc::new(data), false, None))
    }

    /// Leaf tensor that accumulates gradients during [`backward`](Self::backward).
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), Rc::new(vec![value; numel(shape)]), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], Rc::new(vec![value]), false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    /// Fresh leaf sharing this tensor's buffer, with the given grad flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::from_parts(self.0.shape.clone(), Rc::clone(&self.0.data), requires_grad, None)
    }

    /// Leaf copy cut from the graph.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.record.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.record.as_ref().map(|r| r.op)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Builds an op output, recording `backward` when any input tracks gradients.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        Self::from_op_rc(Rc::new(data), shape, op, inputs, backward)
    }

    pub(crate) fn from_op_rc(
        data: Rc<Vec<T>>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: &[&Tensor<T>],
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        if tracking(inputs) {
            let record = DiffRecord {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                backward: Box::new(backward),
            };
            Self::from_parts(shape, data, true, Some(record))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    /// Reverse-mode pass from a scalar: accumulates d(self)/d(leaf) into every
    /// reachable leaf with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.0.id, vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.record {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(rec) => {
                    let input_grads = (rec.backward)(&g);
                    debug_assert_eq!(input_grads.len(), rec.inputs.len(), "op {}", rec.op);
                    for (input, ig) in rec.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "op {}", rec.op);
                        match grads.get_mut(&input.0.id) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(input.0.id, ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over grad-tracking nodes; each node appears once.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((node, child)) = stack.pop() {
            let inputs = node.0.record.as_ref().map(|r| r.inputs.as_slice()).unwrap_or(&[]);
            if child < inputs.len() {
                let next = inputs[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && visited.insert(next.0.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    /// Casts element type, producing a constant leaf.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::from_parts(self.0.shape.clone(), Rc::new(data), false, None)
    }
}

pub(crate) fn tracking<T: Float>(inputs: &[&Tensor<T>]) -> bool {
    GRAD_ENABLED.with(|g| g.get()) && inputs.iter().any(|t| t.requires_grad())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
        let t = Tensor::<f32>::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn backward_on_non_scalar_is_usage_error() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.5], &[3]).unwrap();
        let loss = x.square().sum();
        loss.backward().unwrap();
        assert_eq!(*x.grad().unwrap(), vec![2.0, -4.0, 7.0]);
    }

    #[test]
    fn shared_subexpression_visited_once() {
        // y = x*x used twice: loss = sum(y + y) -> grad = 4x
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap();
        let loss = y.add(&y).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 12.0);
    }

    #[test]
    fn gradients_accumulate_across_passes() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        x.mul_scalar(3.0).sum().backward().unwrap();
        x.mul_scalar(3.0).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 6.0);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_skips_records() {
        let x = Tensor::<f32>::param(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| x.mul_scalar(2.0));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }
}
