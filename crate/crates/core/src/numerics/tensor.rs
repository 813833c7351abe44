//! Dense double-precision tensors with optional gradient tracking.
//!
//! A [`Tensor`] is a row-major `f64` array plus a shape. When an operand of an
//! operation is tracked on a [`Tape`](super::tape::Tape), the result is
//! recorded on that tape and becomes tracked itself; otherwise the operation
//! is evaluated eagerly with no graph overhead. Rollouts therefore run the
//! exact same forward code as the learner, just with untracked parameters.

use std::sync::Arc;

use super::tape::{NodeRef, Tape};

#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data: Arc::new(data), node: None }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(shape.to_vec(), vec![v; numel(shape)])
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::from_vec(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the underlying values (copy-on-write). Forbidden on
    /// tracked tensors, whose values are shared with a tape.
    pub fn data_mut(&mut self) -> &mut [f64] {
        assert!(self.node.is_none(), "cannot mutate a tracked tensor");
        let v: &mut Vec<f64> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node_ref(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    /// A copy that no longer participates in any graph.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// The tape this tensor is tracked on, if any.
    pub fn tape(&self) -> Option<Tape> {
        self.node.as_ref().map(|n| n.tape.clone())
    }
}
