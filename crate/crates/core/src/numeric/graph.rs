//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are bound by
//! reference into the owning [`ParamStore`], so frozen weights are never copied and
//! never receive gradient: they enter the tape as constants.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::param::{ParamId, ParamStore};
use super::tensor::numel;
use super::{Element, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Value<E> {
    Owned(Vec<E>),
    Param(ParamId),
}

pub(crate) enum Op<E> {
    Leaf,
    Conv2d { input: usize, kernel: usize, bias: Option<usize>, stride: usize, padding: usize },
    Linear { input: usize, weight: usize, bias: Option<usize> },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<E> },
    LayerNorm { input: usize, gain: usize, offset: usize, xhat: Vec<E>, rstd: Vec<E> },
    Silu(usize),
    Sigmoid(usize),
    Gelu(usize),
    Softmax { input: usize, axis: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddSuffix { input: usize, suffix: usize },
    ChannelScale { input: usize, scale: usize },
    Scale { input: usize, factor: E },
    Sum(usize),
    WeightedSum { input: usize, weights: Vec<E> },
    Upsample { input: usize, factor: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Reshape(usize),
    TokensFromMap(usize),
    MapFromTokens(usize),
    External { input: usize, grad: Vec<E> },
}

pub(crate) struct Node<E> {
    pub shape: Vec<usize>,
    pub value: Value<E>,
    pub op: Op<E>,
    pub requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<'s, E: Element = f32> {
    store: Option<&'s ParamStore<E>>,
    pub(crate) nodes: Vec<Node<E>>,
    bound: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<E = f32> {
    params: Vec<(ParamId, Vec<E>)>,
    leaves: HashMap<Var, Vec<E>>,
}

impl<E: Element> Gradients<E> {
    #[cfg(test)]
    pub(crate) fn from_params(params: Vec<(ParamId, Vec<E>)>) -> Self {
        Self { params, leaves: HashMap::new() }
    }

    /// Gradients of trainable parameters reached by the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[E])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[E]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Gradient with respect to an input leaf created with `requires_grad`.
    pub fn wrt(&self, var: Var) -> Option<&[E]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    /// Elementwise sum of two gradient sets (used to reduce per-sample passes).
    pub fn merge(&mut self, other: Gradients<E>) {
        for (id, g) in other.params {
            match self.params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, mine)) => mine.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => self.params.push((id, g)),
            }
        }
        for (v, g) in other.leaves {
            match self.leaves.get_mut(&v) {
                Some(mine) => mine.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => {
                    self.leaves.insert(v, g);
                }
            }
        }
    }
}

impl<'s, E: Element> Default for Graph<'s, E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, E: Element> Graph<'s, E> {
    /// A graph without parameter bindings (inputs only).
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), bound: HashMap::new(), param_of: HashMap::new() }
    }

    /// A graph that can bind parameters from `store`.
    pub fn with_store(store: &'s ParamStore<E>) -> Self {
        Self { store: Some(store), ..Self::new() }
    }

    pub fn store(&self) -> Option<&'s ParamStore<E>> {
        self.store
    }

    /// Records an input leaf.
    pub fn input(&mut self, tensor: Tensor<E>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    /// Binds a stored parameter. Frozen parameters become constants.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Usage("graph has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Usage(format!("unknown parameter id {}", id.0)));
        }
        let p = store.get(id);
        let idx = self.nodes.len();
        self.nodes.push(Node {
            shape: p.tensor.shape().to_vec(),
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: !p.frozen,
        });
        self.bound.insert(id, Var(idx));
        self.param_of.insert(idx, id);
        Ok(Var(idx))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[E] {
        self.data(v.0)
    }

    /// Copies a recorded value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.data(v.0).to_vec()).expect("recorded shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn data(&self, idx: usize) -> &[E] {
        match &self.nodes[idx].value {
            Value::Owned(v) => v,
            Value::Param(id) => self
                .store
                .expect("parameter node without store")
                .get(*id)
                .tensor
                .data(),
        }
    }

    pub(crate) fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<E>, op: Op<E>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, value: Value::Owned(data), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, delta) in self.backward_node(idx, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a = *a + d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        let mut out = Gradients::default();
        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            match self.param_of.get(&idx) {
                Some(&id) => out.params.push((id, g)),
                None => {
                    out.leaves.insert(Var(idx), g);
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backward_node(&self, idx: usize, g: &[E]) -> Vec<(usize, Vec<E>)> {
        use super::ops::{attention, conv, elementwise as ew, norm, structural as st};
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, kernel, bias, stride, padding } => {
                conv::conv2d_backward(self, idx, *input, *kernel, *bias, *stride, *padding, g)
            }
            Op::Linear { input, weight, bias } => conv::linear_backward(self, *input, *weight, *bias, g),
            Op::Attention { q, k, v, heads, probs } => {
                attention::attention_backward(self, *q, *k, *v, *heads, probs, g)
            }
            Op::LayerNorm { input, gain, offset, xhat, rstd } => {
                norm::layer_norm_backward(self, *input, *gain, *offset, xhat, rstd, g)
            }
            Op::Silu(x) => ew::silu_backward(self, *x, g),
            Op::Sigmoid(x) => ew::sigmoid_backward(self, idx, *x, g),
            Op::Gelu(x) => ew::gelu_backward(self, *x, g),
            Op::Softmax { input, axis } => ew::softmax_backward(self, idx, *input, *axis, g),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => ew::mul_backward(self, *a, *b, g),
            Op::AddSuffix { input, suffix } => ew::add_suffix_backward(self, *input, *suffix, g),
            Op::ChannelScale { input, scale } => ew::channel_scale_backward(self, *input, *scale, g),
            Op::Scale { input, factor } => vec![(*input, g.iter().map(|&v| v * *factor).collect())],
            Op::Sum(x) => vec![(*x, vec![g[0]; numel(&self.nodes[*x].shape)])],
            Op::WeightedSum { input, weights } => {
                vec![(*input, weights.iter().map(|&w| w * g[0]).collect())]
            }
            Op::Upsample { input, factor } => st::upsample_backward(self, *input, *factor, g),
            Op::Concat { inputs, axis } => st::concat_backward(self, inputs, *axis, g),
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::TokensFromMap(x) => st::tokens_from_map_backward(self, *x, g),
            Op::MapFromTokens(x) => st::map_from_tokens_backward(self, idx, *x, g),
            Op::External { input, grad } => vec![(*input, grad.iter().map(|&d| d * g[0]).collect())],
        }
    }
}
