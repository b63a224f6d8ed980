//! N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations whose
//! inputs require gradients record a producer (op name, inputs and a
//! vector-Jacobian closure); [`backward`] walks those records in reverse
//! topological order. The graph lives exactly as long as the tensors that
//! reference it, so dropping the loss discards the tape.

mod elementwise;
pub mod gradcheck;
mod reduce;
pub mod rng;
pub mod scalar;
mod shape_ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use elementwise::{elementwise, BinaryOp, ElementwiseOp, UnaryOp};
pub use reduce::{reduce, ReduceOp};
pub use scalar::{DType, Scalar};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Vector-Jacobian product of one op: given the output gradient and the op's
/// inputs, return one gradient per input (`None` for inputs that do not
/// require gradients).
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Producer<T: Scalar> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    producer: Option<Producer<T>>,
}

pub struct Tensor<T: Scalar>(Arc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad);
        if let Some(p) = &self.0.producer {
            s.field("op", &p.op);
        }
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// A constant (no gradient) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), Arc::new(data), false))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        Self::from_vec(shape, vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], Arc::new(vec![value]), false)
    }

    /// A trainable leaf: gradients are reported for it by [`backward`].
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Self::from_vec(shape, data)?.requiring_grad())
    }

    /// Same values, new identity, marked as a trainable leaf.
    pub fn requiring_grad(&self) -> Self {
        Self::leaf(self.0.shape.clone(), Arc::clone(&self.0.data), true)
    }

    /// Same values, no graph link and no gradient requirement.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), Arc::clone(&self.0.data), false)
    }

    fn leaf(shape: Vec<usize>, data: Arc<Vec<T>>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            producer: None,
        }))
    }

    /// Build the result of an op. The producer record is kept only when some
    /// input requires gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: output size");
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let producer = requires_grad.then(|| Producer {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
            producer,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the op that produced this tensor, if it is part of a graph.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.producer.as_ref().map(|p| p.op)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }
}

/// Gradients of a scalar root with respect to the trainable leaves reachable
/// from it, keyed by tensor identity. A missing entry means zero gradient.
pub struct GradientMap<T: Scalar> {
    grads: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, param: &Tensor<T>) -> Option<&Tensor<T>> {
        self.grads.get(&param.id())
    }

    /// Gradient for `param`, with zeros when it is not reachable.
    pub fn get_or_zeros(&self, param: &Tensor<T>) -> Vec<T> {
        match self.get(param) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); param.numel()],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse-mode differentiation of a scalar `root`.
pub fn backward<T: Scalar>(root: &Tensor<T>) -> Result<GradientMap<T>> {
    if root.numel() != 1 {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }
    let mut out = HashMap::new();
    if !root.requires_grad() {
        return Ok(GradientMap { grads: out });
    }

    let order = topological_order(root);
    let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
    pending.insert(root.id(), vec![T::one()]);

    for node in order.iter().rev() {
        let Some(grad) = pending.remove(&node.id()) else {
            continue;
        };
        match &node.0.producer {
            None => {
                let g = Tensor::from_vec(node.shape(), grad)?;
                out.insert(node.id(), g);
            }
            Some(p) => {
                let input_grads = (p.backward)(&grad, &p.inputs);
                debug_assert_eq!(input_grads.len(), p.inputs.len(), "{}", p.op);
                for (input, g) in p.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(g.len(), input.numel(), "{} grad size", p.op);
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            pending.insert(input.id(), g);
                        }
                    }
                }
            }
        }
    }
    Ok(GradientMap { grads: out })
}

/// Nodes requiring gradients, ordered so every node precedes its consumers.
fn topological_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(p) = &node.0.producer {
            for input in &p.inputs {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}
