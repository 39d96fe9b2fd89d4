//! Named parameter storage, deterministic initialization, and the per-forward
//! [`Session`] that turns stored tensors into differentiable leaves.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{cast, Element, Gradients, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable, exempt from weight decay (biases, norm affines).
    NoDecay,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub kind: ParamKind,
}

/// Ordered map from hierarchical parameter names to tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>, kind: ParamKind) {
        self.entries.insert(name.into(), Param { value, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&ArrayD<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Replaces a tensor, requiring the shape to stay the same.
    pub fn set_value(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(shape_err!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value.as_standard_layout().into_owned();
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Trainable scalars whose names start with `prefix`.
    pub fn num_trainable_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, p)| p.kind.trainable() && n.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    let value = p.value.mapv(|v| cast::<U>(v.to_f64().unwrap_or(0.0)));
                    (k.clone(), Param { value, kind: p.kind })
                })
                .collect(),
        }
    }
}

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// He normal with standard deviation `sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    /// Normal truncated at two standard deviations.
    TruncNormal { std: f64 },
    Uniform { bound: f64 },
}

/// Registers and initializes parameters in declaration order from one seed.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Element> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> String {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingNormal { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
                (0..n).map(|_| normal.sample(&mut self.rng)).collect()
            }
            Init::TruncNormal { std } => {
                let normal = Normal::new(0.0, std).unwrap();
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
        };
        let value = ArrayD::from_shape_vec(IxDyn(shape), values.into_iter().map(cast::<T>).collect())
            .expect("shape product");
        self.store.insert(name, value, kind);
        name.to_string()
    }
}

/// Joins hierarchical name segments with dots.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which stream an APSM coefficient record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    High,
    Low,
    /// The single fused stream of the after-merge APSM placement.
    Merged,
}

/// Running-statistics update produced by one batch-norm call in train mode.
#[derive(Clone, Debug)]
pub struct NormUpdate<T> {
    pub prefix: String,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Optional recordings made during a forward pass.
pub struct Taps<T: Element> {
    pub features: BTreeMap<String, Var<T>>,
    pub attention: Vec<ArrayD<T>>,
    pub phase_weights: Vec<(Stream, ArrayD<T>)>,
    pub capture_attention: bool,
    pub capture_features: bool,
}

impl<T: Element> Default for Taps<T> {
    fn default() -> Self {
        Self {
            features: BTreeMap::new(),
            attention: Vec::new(),
            phase_weights: Vec::new(),
            capture_attention: false,
            capture_features: false,
        }
    }
}

/// One forward (and optionally backward) evaluation over a parameter store.
pub struct Session<'a, T: Element> {
    store: &'a ParamStore<T>,
    mode: Mode,
    track: bool,
    vars: RefCell<BTreeMap<String, Var<T>>>,
    updates: RefCell<Vec<NormUpdate<T>>>,
    taps: RefCell<Taps<T>>,
}

impl<'a, T: Element> Session<'a, T> {
    /// `track` makes parameters differentiable leaves.
    pub fn new(store: &'a ParamStore<T>, mode: Mode, track: bool) -> Self {
        Self {
            store,
            mode,
            track,
            vars: RefCell::new(BTreeMap::new()),
            updates: RefCell::new(Vec::new()),
            taps: RefCell::new(Taps::default()),
        }
    }

    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Mode::Train, true)
    }

    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Mode::Eval, false)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(v.clone());
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let var = if self.track && p.kind.trainable() {
            Var::leaf(p.value.clone())
        } else {
            Var::constant(p.value.clone())
        };
        self.vars.borrow_mut().insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a ArrayD<T>> {
        self.store.value(name)
    }

    pub(crate) fn push_update(&self, update: NormUpdate<T>) {
        self.updates.borrow_mut().push(update);
    }

    /// Enables recording of attention probability maps.
    pub fn capture_attention(&self) {
        self.taps.borrow_mut().capture_attention = true;
    }

    pub(crate) fn wants_attention(&self) -> bool {
        self.taps.borrow().capture_attention
    }

    pub(crate) fn record_attention(&self, probs: &ArrayD<T>) {
        self.taps.borrow_mut().attention.push(probs.clone());
    }

    /// Enables recording of named intermediate feature maps.
    pub fn capture_features(&self) {
        self.taps.borrow_mut().capture_features = true;
    }

    /// Records a named intermediate and keeps its gradient, when enabled.
    pub(crate) fn tap(&self, key: &str, var: &Var<T>) {
        let mut taps = self.taps.borrow_mut();
        if taps.capture_features {
            var.retain_grad();
            taps.features.insert(key.to_string(), var.clone());
        }
    }

    pub(crate) fn record_phase_weights(&self, stream: Stream, p: &ArrayD<T>) {
        self.taps.borrow_mut().phase_weights.push((stream, p.clone()));
    }

    pub fn feature(&self, key: &str) -> Option<Var<T>> {
        self.taps.borrow().features.get(key).cloned()
    }

    pub fn attention_maps(&self) -> Vec<ArrayD<T>> {
        self.taps.borrow().attention.clone()
    }

    pub fn phase_weights(&self) -> Vec<(Stream, ArrayD<T>)> {
        self.taps.borrow().phase_weights.clone()
    }

    /// Gradients of every trainable parameter touched in this session.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, ArrayD<T>> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }

    /// Consumes the session, returning pending batch-norm statistic updates.
    pub fn into_updates(self) -> Vec<NormUpdate<T>> {
        self.updates.into_inner()
    }
}

impl<T: Element> ParamStore<T> {
    /// Exponential moving average update of batch-norm running statistics.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate<T>], momentum: f64) -> Result<()> {
        let m: T = cast(momentum);
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.batch_mean), ("running_var", &u.batch_var)] {
                let name = join(&u.prefix, suffix);
                let p = self
                    .entries
                    .get_mut(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{name}`")))?;
                for (r, &b) in p.value.iter_mut().zip(batch.iter()) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
        Ok(())
    }
}
