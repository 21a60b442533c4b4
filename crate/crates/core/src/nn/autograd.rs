//! Reverse-mode differentiation over a dynamically built graph.
//!
//! A [`Var`] holds its value and, when any input requires a gradient, the
//! operation that produced it. Graph edges are reference counted, so values
//! computed without tracking are freed as soon as they go out of scope.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::ops::{self, BatchStats, BnCache, Pair};
use crate::nn::params::ParamId;
use crate::nn::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    id: usize,
    value: Tensor,
    op: Option<Op>,
    param: Option<ParamId>,
}

enum Op {
    Conv2d { x: Var, w: Var, stride: Pair, pad: Pair },
    Depthwise { x: Var, w: Var, stride: Pair, pad: Pair },
    Bias { x: Var, b: Var },
    BatchNorm { x: Var, scale: Var, shift: Var, cache: BnCache },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    AvgPool { x: Var, window: Pair },
    Upsample { x: Var, scale: Pair },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Sum { x: Var },
    /// Scalar whose gradient with respect to each term is known in closed form.
    Loss { terms: Vec<(Var, Tensor)> },
}

impl Op {
    fn inputs(&self) -> Vec<&Var> {
        match self {
            Op::Conv2d { x, w, .. } | Op::Depthwise { x, w, .. } => vec![x, w],
            Op::Bias { x, b } => vec![x, b],
            Op::BatchNorm { x, scale, shift, .. } => vec![x, scale, shift],
            Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::AvgPool { x, .. }
            | Op::Upsample { x, .. }
            | Op::Slice { x, .. }
            | Op::Sum { x } => vec![x],
            Op::Add { a, b } => vec![a, b],
            Op::Concat { parts } => parts.iter().collect(),
            Op::Loss { terms } => terms.iter().map(|(v, _)| v).collect(),
        }
    }
}

impl Var {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::new(value, None, None)
    }

    /// A leaf whose gradient is reported under `id`.
    pub fn param(id: ParamId, value: Tensor) -> Self {
        Self::new(value, None, Some(id))
    }

    fn new(value: Tensor, op: Option<Op>, param: Option<ParamId>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op,
            param,
        }))
    }

    fn derived(value: Tensor, op: Op) -> Self {
        let tracked = op.inputs().iter().any(|v| v.requires_grad());
        Self::new(value, tracked.then_some(op), None)
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.op.is_some() || self.0.param.is_some()
    }

    fn id(&self) -> usize {
        self.0.id
    }

    pub fn conv2d(&self, w: &Var, stride: Pair, pad: Pair) -> Result<Var> {
        let y = ops::conv2d(self.value(), w.value(), stride, pad)?;
        Ok(Self::derived(
            y,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                stride,
                pad,
            },
        ))
    }

    pub fn depthwise_conv2d(&self, w: &Var, stride: Pair, pad: Pair) -> Result<Var> {
        let y = ops::depthwise_conv2d(self.value(), w.value(), stride, pad)?;
        Ok(Self::derived(
            y,
            Op::Depthwise {
                x: self.clone(),
                w: w.clone(),
                stride,
                pad,
            },
        ))
    }

    pub fn add_bias(&self, b: &Var) -> Result<Var> {
        let y = ops::add_bias(self.value(), b.value().data())?;
        Ok(Self::derived(
            y,
            Op::Bias {
                x: self.clone(),
                b: b.clone(),
            },
        ))
    }

    /// Batch normalization. With `running = Some((mean, var))` the fixed
    /// statistics are used; otherwise the batch's own statistics are used and
    /// returned so the caller can fold them into the running estimates.
    pub fn batch_norm(
        &self,
        scale: &Var,
        shift: &Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (s, b) = (scale.value().data(), shift.value().data());
        let (y, cache, stats) = match running {
            Some((m, v)) => {
                let (y, cache) = ops::batch_norm_eval(self.value(), s, b, m, v)?;
                (y, cache, None)
            }
            None => {
                let (y, cache, stats) = ops::batch_norm_train(self.value(), s, b)?;
                (y, cache, Some(stats))
            }
        };
        let out = Self::derived(
            y,
            Op::BatchNorm {
                x: self.clone(),
                scale: scale.clone(),
                shift: shift.clone(),
                cache,
            },
        );
        Ok((out, stats))
    }

    pub fn relu(&self) -> Var {
        Self::derived(ops::relu(self.value()), Op::Relu { x: self.clone() })
    }

    pub fn sigmoid(&self) -> Var {
        Self::derived(ops::sigmoid(self.value()), Op::Sigmoid { x: self.clone() })
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut y = self.value().clone();
        y.add_assign(other.value());
        Ok(Self::derived(
            y,
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn avg_pool(&self, window: Pair) -> Result<Var> {
        if window == (1, 1) {
            return Ok(self.clone());
        }
        let y = ops::avg_pool(self.value(), window)?;
        Ok(Self::derived(
            y,
            Op::AvgPool {
                x: self.clone(),
                window,
            },
        ))
    }

    pub fn upsample(&self, scale: Pair) -> Result<Var> {
        if scale == (1, 1) {
            return Ok(self.clone());
        }
        let y = ops::upsample_nearest(self.value(), scale)?;
        Ok(Self::derived(
            y,
            Op::Upsample {
                x: self.clone(),
                scale,
            },
        ))
    }

    pub fn concat(parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(Var::value).collect();
        let y = ops::concat_channels(&values)?;
        Ok(Self::derived(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_channels(self.value(), start, len)?;
        Ok(Self::derived(
            y,
            Op::Slice {
                x: self.clone(),
                start,
            },
        ))
    }

    pub fn sum(&self) -> Var {
        Self::derived(Tensor::scalar(self.value().sum()), Op::Sum { x: self.clone() })
    }

    /// Scalar node with value `value` and `∂value/∂term = grad` for each term.
    pub fn loss(value: f64, terms: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &terms {
            if v.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "loss gradient {:?} does not match its input {:?}",
                    g.shape(),
                    v.shape()
                )));
            }
        }
        Ok(Self::derived(Tensor::scalar(value), Op::Loss { terms }))
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.0.value)
            .field("tracked", &self.requires_grad())
            .finish()
    }
}

/// Gradients of a scalar with respect to every parameter leaf reached.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Post-order of the tracked subgraph below `root`.
fn topological_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(op) = &v.0.op {
            for input in op.inputs() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}

fn accumulate(grads: &mut HashMap<usize, Tensor>, v: &Var, g: Tensor) {
    if !v.requires_grad() {
        return;
    }
    match grads.get_mut(&v.id()) {
        Some(acc) => acc.add_assign(&g),
        None => {
            grads.insert(v.id(), g);
        }
    }
}

/// Gradient of the scalar `loss` with respect to every parameter it depends on.
pub fn backward(loss: &Var) -> Result<Gradients> {
    if !loss.requires_grad() {
        return Err(Error::State(
            "backward called on a value with no recorded forward computation".into(),
        ));
    }
    if loss.value().len() != 1 {
        return Err(Error::shape(format!(
            "backward needs a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let order = topological_order(loss);
    let mut grads: HashMap<usize, Tensor> = HashMap::new();
    grads.insert(loss.id(), Tensor::full(loss.shape(), 1.0));
    let mut out = Gradients::default();

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if let Some(id) = node.0.param {
            match out.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.grads.insert(id, g);
                }
            }
            continue;
        }
        let Some(op) = &node.0.op else { continue };
        match op {
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = ops::conv2d_backward(x.value(), w.value(), &g, *stride, *pad)?;
                accumulate(&mut grads, x, dx);
                accumulate(&mut grads, w, dw);
            }
            Op::Depthwise { x, w, stride, pad } => {
                let (dx, dw) =
                    ops::depthwise_conv2d_backward(x.value(), w.value(), &g, *stride, *pad)?;
                accumulate(&mut grads, x, dx);
                accumulate(&mut grads, w, dw);
            }
            Op::Bias { x, b } => {
                let db = ops::channel_sums(&g)?;
                accumulate(&mut grads, b, Tensor::from_vec(b.shape(), db)?);
                accumulate(&mut grads, x, g);
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                cache,
            } => {
                let (dx, ds, db) = ops::batch_norm_backward(&g, cache, scale.value().data())?;
                accumulate(&mut grads, scale, Tensor::from_vec(scale.shape(), ds)?);
                accumulate(&mut grads, shift, Tensor::from_vec(shift.shape(), db)?);
                accumulate(&mut grads, x, dx);
            }
            Op::Relu { x } => {
                let mut dx = g;
                for (d, &y) in dx.data_mut().iter_mut().zip(node.value().data()) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads, x, dx);
            }
            Op::Sigmoid { x } => {
                let mut dx = g;
                for (d, &s) in dx.data_mut().iter_mut().zip(node.value().data()) {
                    *d *= s * (1.0 - s);
                }
                accumulate(&mut grads, x, dx);
            }
            Op::Add { a, b } => {
                accumulate(&mut grads, a, g.clone());
                accumulate(&mut grads, b, g);
            }
            Op::AvgPool { x, window } => {
                let dx = ops::avg_pool_backward(&g, *window, x.shape())?;
                accumulate(&mut grads, x, dx);
            }
            Op::Upsample { x, scale } => {
                let dx = ops::upsample_nearest_backward(&g, *scale)?;
                accumulate(&mut grads, x, dx);
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for p in parts {
                    let c = p.shape()[1];
                    if p.requires_grad() {
                        accumulate(&mut grads, p, ops::slice_channels(&g, start, c)?);
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let (n, c, h, w) = x.value().dims4()?;
                let len = g.shape()[1];
                let plane = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for b in 0..n {
                    let src = &g.data()[b * len * plane..(b + 1) * len * plane];
                    let at = (b * c + start) * plane;
                    dx.data_mut()[at..at + len * plane].copy_from_slice(src);
                }
                accumulate(&mut grads, x, dx);
            }
            Op::Sum { x } => {
                accumulate(&mut grads, x, Tensor::full(x.shape(), g.data()[0]));
            }
            Op::Loss { terms } => {
                let s = g.data()[0];
                for (v, tg) in terms {
                    let mut t = tg.clone();
                    t.scale(s);
                    accumulate(&mut grads, v, t);
                }
            }
        }
    }
    Ok(out)
}
