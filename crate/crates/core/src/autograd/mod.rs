//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every executed operation as a node holding the forward
//! value and a closure that maps the node's output gradient to contributions
//! for its parents. Nodes are created in topological order, so a single
//! reverse sweep visits each node exactly once and accumulates gradients
//! additively across fan-out.
//!
//! All arithmetic is `f64`. Inner products accumulate sequentially per output
//! element, so the value of any one sample in a batch does not depend on the
//! other samples in the batch.

mod check;
mod ops;

pub use check::{grad_check, GradCheckReport};
pub use ops::{
    add, avg_pool2d, conv2d, conv2d_output_dims, dense, dropout, flatten, gaussian_noise,
    mse_loss, relu,
};

use crate::error::{CoreError, Result};

/// Dense multi-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must equal product of shape"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Same data, new shape. The element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Forward-pass mode: stochastic regularizers are active only in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

type BackwardFn = Box<dyn Fn(&[f64], &Tape) -> Vec<(TensorId, Vec<f64>)>>;

struct Node {
    tensor: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Record of executed operations, in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Registers an input tensor (parameter or data) as a leaf node.
    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            tensor,
            requires_grad,
            backward: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, tensor: Tensor, backward: BackwardFn) -> TensorId {
        self.nodes.push(Node {
            tensor,
            requires_grad: false,
            backward: Some(backward),
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients;
    /// gradients accumulate additively where a node fans out.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.tensor.is_scalar() {
            return Err(CoreError::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.tensor.shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .take(loss.0 + 1)
            .map(|n| vec![0.0; n.tensor.len()])
            .collect();
        grads[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            if let Some(bf) = &self.nodes[i].backward {
                if grads[i].iter().all(|&g| g == 0.0) {
                    continue;
                }
                let contribs = bf(&grads[i], self);
                for (pid, c) in contribs {
                    debug_assert!(pid.0 < i, "parents must precede children on the tape");
                    let parent = &self.nodes[pid.0];
                    if parent.backward.is_none() && !parent.requires_grad {
                        continue; // data leaf: gradient not wanted
                    }
                    let dst = &mut grads[pid.0];
                    debug_assert_eq!(dst.len(), c.len());
                    for (d, v) in dst.iter_mut().zip(c.iter()) {
                        *d += v;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn take(&mut self, id: TensorId) -> Vec<f64> {
        std::mem::take(&mut self.grads[id.0])
    }
}

/// c = a(m×k) · b(k×n). Accumulation over `k` is sequential per output
/// element, independent of `m`.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// c = aᵀ(m×k) · b(k×n) where `a` is stored k×m.
pub(crate) fn matmul_at(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// c = a(m×k) · bᵀ(k×n) where `b` is stored n×k.
pub(crate) fn matmul_bt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            c[i * n + j] = acc;
        }
    }
    c
}
