//! Named parameter storage, per-forward binding context and the basic
//! layers (convolutions, linear, normalisation) the network is built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::Conv2dParams;
use crate::tape::{BatchStats, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    /// Running statistics are stored here too, with `trainable == false`.
    pub trainable: bool,
}

/// Ordered collection of named tensors: weights plus normalisation buffers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    /// Replace every value from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Invalid(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Invalid(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }

    /// Set every trainable tensor whose name matches `pred` to zero.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            if pred(&e.name) {
                e.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// Deterministic initialiser: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    fn name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// Run `f` with `part` appended to the name prefix.
    pub fn scope<R>(&mut self, part: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(part.into());
        let r = f(self);
        self.prefix.pop();
        r
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-bound..=bound))).collect();
        let name = self.name(leaf);
        self.store
            .add(name, Tensor::new(shape, data).expect("init shape"), true)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], v: f64, trainable: bool) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, Tensor::full(shape, T::of(v)), trainable)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Per-forward state: the tape, lazily bound parameters, train/eval mode
/// and side outputs (batch-norm statistics, attention counters).
pub struct Ctx<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<NodeId>>,
    training: bool,
    track_grads: bool,
    bn_updates: Vec<(ParamId, ParamId, BatchStats<T>)>,
    pub attention: Vec<AttentionRecord>,
}

/// Token-attention work done by one attention call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionRecord {
    pub label: String,
    /// Tokens per image (H·W).
    pub tokens: usize,
    pub regions: usize,
    pub topk: usize,
    pub channels: usize,
    pub batch: usize,
    /// Multiply-accumulates counted in the QKᵀ and AV products.
    pub macs: u64,
    pub routed: bool,
}

impl<'s, T: Scalar> Ctx<'s, T> {
    /// Training-mode forward whose parameters receive gradients.
    pub fn train(store: &'s ParamStore<T>) -> Self {
        Self::build(store, true, true)
    }

    /// Evaluation-mode forward (running batch-norm statistics, no gradients).
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Self::build(store, false, false)
    }

    pub fn build(store: &'s ParamStore<T>, training: bool, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            training,
            track_grads,
            bn_updates: Vec::new(),
            attention: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Tape node for a stored parameter, created on first use.
    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let e = self.store.entry(id);
        let n = if self.track_grads && e.trainable {
            self.tape.param(e.value.clone())
        } else {
            self.tape.constant(e.value.clone())
        };
        self.bound[id.0] = Some(n);
        n
    }

    /// Tape node bound to `id`, if the forward used it.
    pub fn bound(&self, id: ParamId) -> Option<NodeId> {
        self.bound[id.0]
    }

    /// Gradients of every trainable parameter after `backward` (zeros for unused ones).
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.store
            .ids()
            .map(|id| {
                let e = self.store.entry(id);
                if !e.trainable {
                    return None;
                }
                Some(
                    self.bound[id.0]
                        .and_then(|n| self.tape.grad(n))
                        .unwrap_or_else(|| Tensor::zeros(e.value.shape())),
                )
            })
            .collect()
    }

    pub(crate) fn record_bn(&mut self, mean: ParamId, var: ParamId, stats: BatchStats<T>) {
        self.bn_updates.push((mean, var, stats));
    }

    /// Batch-norm running-statistic updates gathered during a training forward.
    pub fn take_bn_updates(&mut self) -> Vec<(ParamId, ParamId, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Fold batch statistics into running estimates: `r = (1-m)·r + m·batch`.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[(ParamId, ParamId, BatchStats<T>)]) {
    let m = T::of(BN_MOMENTUM);
    let keep = T::one() - m;
    for (mean_id, var_id, stats) in updates {
        for (r, &b) in store.get_mut(*mean_id).data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(*var_id).data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: Conv2dParams,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        params: Conv2dParams,
        bias: bool,
    ) -> Self {
        let fan_in = (cin / params.groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        init.scope(name, |i| Self {
            weight: i.uniform("weight", &[cout, cin / params.groups, kernel, kernel], bound),
            bias: bias.then(|| i.uniform("bias", &[cout], bound)),
            params,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        ctx.tape.conv2d(x, w, b, self.params)
    }
}

/// Transposed convolution, weight `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((cout * kernel * kernel) as f64).sqrt();
        init.scope(name, |i| Self {
            weight: i.uniform("weight", &[cin, cout, kernel, kernel], bound),
            bias: i.uniform("bias", &[cout], bound),
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        ctx.tape.conv_transpose2d(x, w, Some(b), self.stride, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, fin: usize, fout: usize) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        init.scope(name, |i| Self {
            weight: i.uniform("weight", &[fout, fin], bound),
            bias: i.uniform("bias", &[fout], bound),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        init.scope(name, |i| Self {
            gamma: i.constant("gamma", &[channels], 1.0, true),
            beta: i.constant("beta", &[channels], 0.0, true),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.tape.layer_norm(x, g, b)
    }

    /// Normalise the channel axis of a `[B,C,H,W]` map.
    pub fn forward_nchw<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let t = ctx.tape.permute(x, &[0, 2, 3, 1])?;
        let t = self.forward(ctx, t)?;
        ctx.tape.permute(t, &[0, 3, 1, 2])
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        init.scope(name, |i| Self {
            gamma: i.constant("gamma", &[channels], 1.0, true),
            beta: i.constant("beta", &[channels], 0.0, true),
            running_mean: i.constant("running_mean", &[channels], 0.0, false),
            running_var: i.constant("running_var", &[channels], 1.0, false),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: NodeId) -> Result<NodeId> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        if ctx.training() {
            let (y, stats) = ctx.tape.batch_norm(x, g, b, None)?;
            if let Some(s) = stats {
                ctx.record_bn(self.running_mean, self.running_var, s);
            }
            Ok(y)
        } else {
            let store = ctx.store();
            let rm = store.get(self.running_mean).data();
            let rv = store.get(self.running_var).data();
            Ok(ctx.tape.batch_norm(x, g, b, Some((rm, rv)))?.0)
        }
    }
}
