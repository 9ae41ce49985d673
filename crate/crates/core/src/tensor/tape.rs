//! Reverse-mode differentiation over a dynamically recorded operation list.
//!
//! Every forward operation appends one node holding its value and the ids of
//! its inputs. `backward` walks the nodes once, from the loss towards the
//! leaves, so each recorded operation is visited exactly once in reverse
//! execution order. Parameters are bound into the tape on first use and their
//! gradients are handed back in a [`Gradients`] value, leaving the
//! [`ParamStore`] untouched until the caller applies them.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::{DenseArray, Real};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule for an operation defined outside this module.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Accumulates input gradients into `grad_inputs`, which arrive zeroed and
    /// sized like the corresponding inputs.
    fn backward(
        &self,
        inputs: &[&DenseArray<T>],
        output: &DenseArray<T>,
        grad_output: &[T],
        grad_inputs: &mut [Vec<T>],
    );
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Param,
    MatMul(super::ops::MatMulPlan, Var, Var),
    TransposeLast2(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(T, T)>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<T>),
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    MeanAxis(Var, usize),
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    SpatialConv(Var, Var, super::conv::ConvGeometry),
    TemporalConv(Var, Var, super::conv::ConvGeometry),
    L2NormalizeRows(Var, Vec<T>),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::TransposeLast2(_) => "transpose",
            Op::Permute(..) => "permute",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Dropout(..) => "dropout",
            Op::MaxAxis { .. } => "max_pool_over_axis",
            Op::MeanAxis(..) => "mean",
            Op::SumAll(_) => "sum",
            Op::GatherRows(..) => "gather_rows",
            Op::Concat(..) => "concat",
            Op::SpatialConv(..) => "spatial_conv",
            Op::TemporalConv(..) => "temporal_conv",
            Op::L2NormalizeRows(..) => "l2_normalize",
            Op::Custom(_, op) => op.name(),
        }
    }
}

pub(crate) struct Node<T: Real> {
    pub(crate) value: DenseArray<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

pub struct Tape<'s, T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    store: Option<&'s ParamStore<T>>,
    bound: HashMap<ParamId, Var>,
    bind_order: Vec<(ParamId, Var)>,
    pub(crate) rng: Option<ChaCha8Rng>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Real> Tape<'s, T> {
    /// A tape without parameters; inputs come from [`Tape::constant`] and
    /// [`Tape::input`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            bound: HashMap::new(),
            bind_order: Vec::new(),
            rng: None,
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Enables dropout, drawing masks from a generator seeded with `seed`.
    pub fn training(mut self, seed: u64) -> Self {
        self.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseArray<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: DenseArray<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::config("tape has no parameter store"))?;
        let value = store.value(id).clone();
        let v = self.push(value, Op::Param, true)?;
        self.bound.insert(id, v);
        self.bind_order.push((id, v));
        Ok(v)
    }

    pub(crate) fn push(&mut self, value: DenseArray<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an operation whose backward rule is supplied by the caller.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        output: DenseArray<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        let rg = self.needs_grad(&inputs);
        self.push(output, Op::Custom(inputs, op), rg)
    }

    /// Propagates d(loss)/d(node) for every node recorded before `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            super::ops::backward_node(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(self.nodes[i].op.name()));
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.bind_order.clone(),
            loss: self.nodes[loss.0].value.data()[0],
        })
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
    loss: T,
}

impl<T: Real> Gradients<T> {
    pub fn loss(&self) -> T {
        self.loss
    }

    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }

    /// Adds every bound parameter's gradient into the store's buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}

/// Returns (and creates if needed) the gradient buffer of `v`, or `None`
/// when `v` does not track gradients.
pub(crate) fn slot<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}
