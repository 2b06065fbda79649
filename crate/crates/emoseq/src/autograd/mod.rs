//! Reverse-mode automatic differentiation on a tape of executed primitives.
//!
//! Every forward op appends a node holding its output values and enough
//! saved state for an exact analytic backward pass. Nodes are appended in
//! execution order, so the tape is already topologically sorted; backward
//! walks it in reverse, accumulating gradients additively across fan-out.
//! Everything is double precision.

pub mod adam;
pub mod conv;
mod ops;
pub mod store;

use thiserror::Error;

pub use adam::AdamState;
pub use store::{ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("batchnorm needs at least 2 elements per channel in train mode")]
    DegenerateBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("backward needs a scalar loss, got {0} elements")]
    NotScalar(usize),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

type R = TensorRef;

pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    Add(R, R),
    Mul(R, R),
    Scale(R, f64),
    Matmul(R, R),
    Linear { x: R, w: R, b: R },
    Relu(R),
    Sigmoid(R),
    Tanh(R),
    Concat { inputs: Vec<R>, axis: usize },
    Reshape(R),
    Transpose2d(R),
    SliceRows { x: R, lo: usize },
    SliceCols { x: R, lo: usize },
    LayerNorm { x: R, gamma: R, beta: R, mean: Vec<f64>, inv_std: Vec<f64> },
    Softmax(R),
    MaxReduce { x: R, argmax: Vec<usize> },
    Conv2d { x: R, w: R, b: R },
    BatchNormTrain { x: R, gamma: R, beta: R, mean: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: R, gamma: R, beta: R, mean: Vec<f64>, inv_std: Vec<f64> },
    MaxPool2d { x: R, argmax: Vec<usize> },
    CrossEntropy { logits: R, labels: Vec<usize>, probs: Vec<f64> },
}

/// Recording tape. One tape per forward/backward pass; parameters live in a
/// [`ParamStore`] and are leased onto the tape as leaf nodes.
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
    leases: Vec<(ParamId, TensorRef)>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, leases: Vec::new() }
    }

    /// A tape that records no gradient information (inference mode).
    pub fn new_inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, leases: Vec::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> TensorRef {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad: requires_grad && self.grad_enabled,
            op,
        });
        TensorRef(self.nodes.len() - 1)
    }

    /// Constant input leaf. Values must be finite.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorRef> {
        self.make_leaf(shape, values, false)
    }

    /// Leaf that participates in gradient computation (used by tests that
    /// differentiate with respect to inputs).
    pub fn leaf_grad(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorRef> {
        self.make_leaf(shape, values, true)
    }

    fn make_leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<TensorRef> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(AutogradError::ShapeMismatch(format!(
                "leaf shape {shape:?} does not match {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AutogradError::NonFiniteValue("leaf".into()));
        }
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    /// Lease a stored parameter onto the tape. Repeated leases of the same
    /// parameter return the same node so fan-out gradients accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorRef {
        if let Some(&(_, r)) = self.leases.iter().find(|(pid, _)| *pid == id) {
            return r;
        }
        let r = self.push(
            store.shape(id).to_vec(),
            store.values(id).to_vec(),
            store.is_trainable(id),
            Op::Param(id),
        );
        self.leases.push((id, r));
        r
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].shape
    }

    pub fn values(&self, r: TensorRef) -> &[f64] {
        &self.nodes[r.0].values
    }

    pub fn grad(&self, r: TensorRef) -> Option<&[f64]> {
        self.nodes[r.0].grad.as_deref()
    }

    pub fn numel(&self, r: TensorRef) -> usize {
        self.nodes[r.0].values.len()
    }

    /// Reverse pass from a scalar loss. The loss gradient seeds at 1; each
    /// node's backward contributes exact analytic gradients to its inputs.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        let n = self.numel(loss);
        if n != 1 {
            return Err(AutogradError::NotScalar(n));
        }
        if !self.nodes[loss.0].requires_grad {
            // Nothing upstream wants gradients.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            let gout = node.grad.as_deref().unwrap();
            ops::backward_step(before, node, gout);
        }
        Ok(())
    }

    /// Copy accumulated gradients of leased parameters back into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, node.grad.as_deref()) {
                store.accumulate_grad(*id, g);
            }
        }
    }

    pub(crate) fn err_shape(&self, what: &str, refs: &[TensorRef]) -> AutogradError {
        let shapes: Vec<String> = refs.iter().map(|r| format!("{:?}", self.shape(*r))).collect();
        AutogradError::ShapeMismatch(format!("{what}: {}", shapes.join(" vs ")))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Allocate-if-needed gradient buffer of node `r`, or `None` when the node
/// does not require gradients.
pub(crate) fn grad_buf(nodes: &mut [Node], r: TensorRef) -> Option<&mut [f64]> {
    let node = &mut nodes[r.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.values.len();
    Some(node.grad.get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

/// Values and gradient buffer of node `r` split-borrowed, gradient only when
/// required.
pub(crate) fn values_and_grad(nodes: &mut [Node], r: TensorRef) -> (&[f64], Option<&mut [f64]>) {
    let node = &mut nodes[r.0];
    let len = node.values.len();
    let grad = if node.requires_grad {
        Some(node.grad.get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    } else {
        None
    };
    (node.values.as_slice(), grad)
}
