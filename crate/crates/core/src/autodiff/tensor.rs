use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::conv::ConvGeom;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operation on the tape.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    with_grad_mode(false, f)
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn with_grad_mode<T>(enabled: bool, f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _restore = Restore(prev);
    f()
}

/// Recorded operation. Each variant owns its inputs plus whatever auxiliary
/// data its backward rule needs; the output is passed to `backward` by the
/// graph walker so nodes never hold references to themselves.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Expand(Tensor),
    SumTo(Tensor),
    Relu(Tensor),
    LeakyRelu(Tensor, f64),
    Tanh(Tensor),
    Sigmoid(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    Sqrt(Tensor),
    Abs(Tensor),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    /// Operands plus transpose flags.
    Bmm(Tensor, Tensor, bool, bool),
    Softmax(Tensor),
    /// Softmax output and incoming gradient.
    SoftmaxGrad(Tensor, Tensor),
    Conv(Tensor, Tensor, ConvGeom),
    ConvInputGrad(Tensor, Tensor, ConvGeom),
    ConvWeightGrad(Tensor, Tensor, ConvGeom),
    Gather(Tensor, Arc<[usize]>),
    ScatterAdd(Tensor, Arc<[usize]>),
    Concat(Vec<Tensor>, usize),
    Narrow(Tensor, usize, usize),
    Embed(Tensor, usize, usize),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | SoftmaxGrad(a, b) => vec![a, b],
            Bmm(a, b, _, _) => vec![a, b],
            Conv(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![a, b],
            Scale(a, _) | AddScalar(a) | Expand(a) | SumTo(a) | Relu(a) | LeakyRelu(a, _) => {
                vec![a]
            }
            Tanh(a) | Sigmoid(a) | Exp(a) | Ln(a) | Sqrt(a) | Abs(a) | Reshape(a) => vec![a],
            Permute(a, _) | Softmax(a) | Gather(a, _) | ScatterAdd(a, _) => vec![a],
            Narrow(a, _, _) | Embed(a, _, _) => vec![a],
            Concat(ts, _) => ts.iter().collect(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
}

/// Immutable n-dimensional array of `f64` with an optional autodiff record.
///
/// Shape errors inside the engine are programming errors and panic; public
/// APIs built on top validate shapes and return `Error::Shape` instead.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        assert_eq!(
            data.len(),
            numel_of(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    /// Constant tensor (never tracked).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::make(data, shape.to_vec(), false, None)
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::make(data, shape.to_vec(), true, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![0.0; numel_of(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_vec(vec![v; numel_of(shape)], shape)
    }

    /// Builds the result of an operation, recording `op` only when grad mode
    /// is on and at least one input is tracked.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        let track = is_grad_enabled() && op.inputs().iter().any(|t| t.requires_grad());
        if track {
            Self::make(data, shape, true, Some(op))
        } else {
            Self::make(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.0.data.clone(), &self.0.shape)
    }

    /// Same values as a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor::param(self.0.data.clone(), &self.0.shape)
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }
}
