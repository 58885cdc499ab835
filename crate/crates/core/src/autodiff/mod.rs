//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! Every differentiable operation appends one node to a [`Tape`]. A [`Var`]
//! is a cheap copyable handle to a node. [`Tape::backward`] walks the nodes in
//! reverse execution order exactly once and returns [`Gradients`].
//!
//! ```
//! use fourplane_core::autodiff::Tape;
//! use fourplane_core::NdTensor;
//!
//! let tape = Tape::new();
//! let p = tape.leaf(NdTensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
//! let loss = p.mul(p).unwrap().sum_all().scale(0.5);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(p).unwrap().data(), &[1.0, -2.0, 0.5]);
//! ```

mod backward;
pub(crate) mod kernels;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::NdTensor;

use kernels::ConvGeom;

use ops::Broadcast;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add {
        a: usize,
        b: usize,
        map: Broadcast,
    },
    Sub {
        a: usize,
        b: usize,
        map: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
        map: Broadcast,
    },
    Scale {
        a: usize,
        s: f32,
    },
    Offset {
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        rstd: Vec<f32>,
    },
    L2Normalize {
        a: usize,
        norms: Vec<f32>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Upsample {
        a: usize,
        factors: Vec<usize>,
    },
    Silu {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    ReduceMean {
        a: usize,
        axis: usize,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    Conv3d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
}

struct Node {
    value: Rc<NdTensor>,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// Ordered record of executed operations.
///
/// A tape created with [`Tape::no_grad`] still evaluates values but records
/// nothing for backward; it is used for inference and for gradient-free
/// passes such as self-conditioning.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_cache: RefCell<HashMap<(u64, ParamId), usize>>,
    grad_enabled: bool,
    macs: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_cache: RefCell::new(HashMap::new()),
            grad_enabled: true,
            macs: Cell::new(0),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiply-accumulates executed by matrix products and convolutions so far.
    pub fn mac_count(&self) -> u64 {
        self.macs.get()
    }

    /// Bytes held by every node value on the tape.
    pub fn value_bytes(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .map(|n| n.value.len() * std::mem::size_of::<f32>())
            .sum()
    }

    /// Bytes held by node values other than parameter leaves.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.param.is_none())
            .map(|n| n.value.len() * std::mem::size_of::<f32>())
            .sum()
    }

    /// Differentiable input.
    pub fn leaf(&self, value: NdTensor) -> Var<'_> {
        self.push_leaf(value, self.grad_enabled, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: NdTensor) -> Var<'_> {
        self.push_leaf(value, false, None)
    }

    /// Loads a parameter. Repeated loads of the same parameter on one tape
    /// share a node so gradients accumulate in one place.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let key = (store.uid(), id);
        if let Some(&node) = self.param_cache.borrow().get(&key) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let v = self.push_leaf(store.get(id).tensor.clone(), self.grad_enabled, Some(key));
        self.param_cache.borrow_mut().insert(key, v.id);
        v
    }

    fn push_leaf(
        &self,
        value: NdTensor,
        requires_grad: bool,
        param: Option<(u64, ParamId)>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: NdTensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<NdTensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn add_macs(&self, n: u64) {
        self.macs.set(self.macs.get() + n);
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Numeric(
                "tape recorded no differentiable operations for this loss".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            } else {
                backward::propagate(&nodes, &node.op, &node.value, &g, &mut grads);
            }
        }
        let mut params = Vec::new();
        for (id, node) in nodes.iter().enumerate().take(loss.id + 1) {
            if let (Some(key), Some(_)) = (node.param, grads[id].as_ref()) {
                params.push((key, id));
            }
        }
        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

/// Gradients of a scalar loss with respect to every participating node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<((u64, ParamId), usize)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<NdTensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        NdTensor::new(self.shapes[var.id].clone(), g.clone()).ok()
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<NdTensor> {
        self.params
            .iter()
            .find(|(key, _)| *key == (store.uid(), id))
            .and_then(|&(_, node)| {
                let g = self.grads[node].as_ref()?;
                NdTensor::new(self.shapes[node].clone(), g.clone()).ok()
            })
    }

    pub(crate) fn params_of<'a>(
        &'a self,
        store: &ParamStore,
    ) -> impl Iterator<Item = (ParamId, &'a [f32])> + 'a {
        let uid = store.uid();
        self.params.iter().filter_map(move |&((u, pid), node)| {
            (u == uid).then(|| (pid, self.grads[node].as_deref().unwrap_or(&[])))
        })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<NdTensor> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> NdTensor {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f32 {
        self.value().data()[0]
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_tensor())
    }
}
