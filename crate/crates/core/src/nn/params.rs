use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::autograd::{Gradients, Var};
use crate::nn::ops::BatchStats;
use crate::nn::tensor::Tensor;

/// Running-statistics momentum: `running ← (1 − m)·running + m·batch`.
pub const BN_MOMENTUM: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        Self(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnScale => "scale",
            ParamKind::BnShift => "shift",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    /// Present exactly for trainable parameters.
    pub grad: Option<Tensor>,
}

/// Named parameter tensors keyed by a stable dotted path.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = kind.is_trainable().then(|| Tensor::zeros(value.shape()));
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            kind,
            value,
            grad,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.kind.is_trainable())
            .map(|(id, _)| id)
            .collect()
    }

    /// Total scalars across trainable tensors.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.data_mut().fill(0.0);
            }
        }
    }

    pub fn accumulate_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            let slot = p.grad.as_mut().ok_or_else(|| {
                Error::State(format!("gradient for non-trainable parameter {}", p.name))
            })?;
            if slot.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} does not match parameter {} {:?}",
                    g.shape(),
                    p.name,
                    slot.shape()
                )));
            }
            slot.add_assign(g);
        }
        Ok(())
    }

    /// Folds recorded batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            let unbias = if u.stats.count > 1 {
                u.stats.count as f64 / (u.stats.count - 1) as f64
            } else {
                1.0
            };
            for (r, &m) in self.params[u.bn.mean.0]
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.stats.mean)
            {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            for (r, &v) in self.params[u.bn.var.0]
                .value
                .data_mut()
                .iter_mut()
                .zip(&u.stats.var)
            {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
    }

    /// Bitwise equality of every tensor, used for determinism checks.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Parameter handles of one batch-normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub scale: ParamId,
    pub shift: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub bn: BnParams,
    pub stats: BatchStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are updated from each batch.
    Train,
    /// Running statistics; only the final prediction head is evaluated.
    Eval,
}

/// Parameter access and bookkeeping for one forward pass.
pub struct ForwardCtx<'a> {
    store: &'a ParamStore,
    mode: Mode,
    track: bool,
    updates: RefCell<Vec<BnUpdate>>,
}

impl<'a> ForwardCtx<'a> {
    /// Gradients are tracked in train mode only.
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self::with_tracking(store, mode, mode == Mode::Train)
    }

    pub fn with_tracking(store: &'a ParamStore, mode: Mode, track: bool) -> Self {
        Self {
            store,
            mode,
            track,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        let value = self.store.value(id).clone();
        if self.track {
            Var::param(id, value)
        } else {
            Var::constant(value)
        }
    }

    pub fn batch_norm(&self, x: &Var, bn: &BnParams) -> Result<Var> {
        let scale = self.param(bn.scale);
        let shift = self.param(bn.shift);
        match self.mode {
            Mode::Eval => {
                let m = self.store.value(bn.mean).data();
                let v = self.store.value(bn.var).data();
                Ok(x.batch_norm(&scale, &shift, Some((m, v)))?.0)
            }
            Mode::Train => {
                let (y, stats) = x.batch_norm(&scale, &shift, None)?;
                if let Some(stats) = stats {
                    self.updates.borrow_mut().push(BnUpdate { bn: *bn, stats });
                }
                Ok(y)
            }
        }
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.updates.into_inner()
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct ParamBuilder<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'s> ParamBuilder<'s> {
    pub fn new(store: &'s mut ParamStore, rng: ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    /// He-uniform kernel: `U(−b, b)` with `b = √(6 / fan_in)`.
    pub fn kernel(&mut self, name: &str, shape: [usize; 4]) -> ParamId {
        let fan_in = shape[1] * shape[2] * shape[3];
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound));
        self.store.add(format!("{name}.weight"), ParamKind::Weight, t)
    }

    pub fn bias(&mut self, name: &str, c: usize) -> ParamId {
        self.store
            .add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[c]))
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> BnParams {
        BnParams {
            scale: self
                .store
                .add(format!("{name}.scale"), ParamKind::BnScale, Tensor::full(&[c], 1.0)),
            shift: self
                .store
                .add(format!("{name}.shift"), ParamKind::BnShift, Tensor::zeros(&[c])),
            mean: self.store.add(
                format!("{name}.running_mean"),
                ParamKind::RunningMean,
                Tensor::zeros(&[c]),
            ),
            var: self.store.add(
                format!("{name}.running_var"),
                ParamKind::RunningVar,
                Tensor::full(&[c], 1.0),
            ),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}
