//! Define-by-run reverse-mode differentiation over [`Tensor2`].
//!
//! A [`Tape`] records every op as it executes. [`Tape::backward`] walks the
//! tape in reverse and returns a [`Gradients`] table. Leaves created with
//! `requires_grad = false` (frozen weights, inputs) never receive a gradient,
//! and nodes that depend only on such leaves are skipped entirely.
//!
//! Stacked parameter layouts used by the PHM ops:
//! - A-set: `(n·n) x n`, `A_i` is rows `i·n .. (i+1)·n`
//! - B-set: `(n·p) x q`, `B_i` is rows `i·p .. (i+1)·p`

pub mod check;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::linalg::{LinalgError, Tensor2};

pub use ops::{gelu_scalar, std_normal_cdf, LN_EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("loss is detached: {0}")]
    Detached(&'static str),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, GradError>;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Reshape(usize),
    AddRow(usize, usize),
    Sum(usize),
    Kron(usize, usize),
    SumKron {
        a: usize,
        b: usize,
        n: usize,
    },
    BlockMatMul {
        x: usize,
        y: usize,
        n: usize,
    },
    PhmLinear {
        x: usize,
        a: usize,
        b: usize,
        n: usize,
    },
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: Option<usize>,
        xhat: Tensor2,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Tensor2,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<Tensor2>,
    },
    MeanPool {
        x: usize,
        seq: usize,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor2,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

/// Ordered record of op nodes. Parents always precede children.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Trainable parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor2, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        self.check(v).expect("var from another tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }

    /// Scalar value of a 1x1 var.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(GradError::Detached("variable belongs to a different tape"));
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub(crate) fn node(&self, v: Var) -> Result<&Node> {
        self.check(v)?;
        Ok(&self.nodes[v.idx])
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].needs_grad)
    }

    /// Reverse pass from a scalar loss. Accumulation order is the reverse tape
    /// order, so repeated calls give bitwise-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let (rows, cols) = self.nodes[loss.idx].value.shape();
        if (rows, cols) != (1, 1) {
            return Err(GradError::NonScalarLoss { rows, cols });
        }
        if !self.nodes[loss.idx].needs_grad {
            return Err(GradError::Detached("loss does not depend on any trainable leaf"));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor2::filled(1, 1, 1.0));
        for idx in (0..=loss.idx).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            ops::backprop(self, idx, &g, &mut grads)?;
            // interior grads are dropped once propagated; only leaves keep theirs
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }
}

/// Gradients of the loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` for frozen leaves, interior nodes, and
    /// leaves the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get), but a zero tensor of the leaf's shape when the
    /// loss does not reach it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor2 {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Tensor2::zeros(r, c)
        })
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Tensor2>], idx: usize, g: Tensor2) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g).expect("gradient shape"),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests;
