//! Named parameter storage shared by layers and the model.
//!
//! Layers hold [`ParamId`] handles rather than tensors, so one stored tensor
//! can back any number of layers (the shared PHM slow weights rely on this).
//! Construction goes through [`ParamSink`], which is implemented both by the
//! allocating [`StoreBuilder`] and by [`ParamLayout`], which only records
//! shapes. Budgeting a large geometry uses the latter and never allocates.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rand_xoshiro::Xoshiro256StarStar;

use crate::grad::check::{central_difference, compare, Comparison};
use crate::grad::{GradError, Tape, Var};
use crate::linalg::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u32);

/// What a parameter is, for freezing decisions and budget breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Pretrained weight matrix, embedding table or attention bias table.
    BaseWeight,
    /// Pretrained linear-layer bias.
    BaseBias,
    LayerNormGain,
    LayerNormBias,
    AdapterWeight,
    AdapterBias,
    /// PHM `A_i` matrices shared by every adapter projection.
    SharedSlow,
}

impl ParamRole {
    pub fn is_layer_norm(self) -> bool {
        matches!(self, Self::LayerNormGain | Self::LayerNormBias)
    }

    pub fn is_bias(self) -> bool {
        matches!(self, Self::BaseBias | Self::AdapterBias)
    }

    pub fn is_adapter(self) -> bool {
        matches!(self, Self::AdapterWeight | Self::AdapterBias | Self::SharedSlow)
    }
}

/// Initialization rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// `U(-bound, bound)`.
    Uniform { bound: f64 },
}

impl Init {
    /// Fan-in scaled uniform, `bound = 1/sqrt(fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Self::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }

    pub fn sample(self, rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
        match self {
            Self::Zeros => Tensor2::zeros(rows, cols),
            Self::Ones => Tensor2::filled(rows, cols, 1.0),
            Self::Normal { std } => {
                let d = Normal::new(0.0, std).expect("finite std");
                Tensor2::from_fn(rows, cols, |_, _| d.sample(rng))
            }
            Self::Uniform { bound } => {
                if bound == 0.0 {
                    return Tensor2::zeros(rows, cols);
                }
                let d = Uniform::new_inclusive(-bound, bound);
                Tensor2::from_fn(rows, cols, |_, _| d.sample(rng))
            }
        }
    }
}

/// Declared parameter: a rank-1 vector of length `cols` has `rows == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub rank: u8,
    pub role: ParamRole,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn matrix(path: impl Into<String>, rows: usize, cols: usize, role: ParamRole, trainable: bool) -> Self {
        Self {
            path: path.into(),
            rows,
            cols,
            rank: 2,
            role,
            trainable,
        }
    }

    pub fn vector(path: impl Into<String>, len: usize, role: ParamRole, trainable: bool) -> Self {
        Self {
            path: path.into(),
            rows: 1,
            cols: len,
            rank: 1,
            role,
            trainable,
        }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dims(&self) -> Vec<usize> {
        if self.rank == 1 {
            vec![self.cols]
        } else {
            vec![self.rows, self.cols]
        }
    }
}

/// Anything that can receive parameter declarations.
pub trait ParamSink {
    fn add(&mut self, spec: ParamSpec, init: Init) -> ParamId;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub spec: ParamSpec,
    pub value: Tensor2,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<ParamId, Param>,
    next: u32,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, spec: ParamSpec, value: Tensor2) -> ParamId {
        assert_eq!(value.shape(), (spec.rows, spec.cols), "value shape for {}", spec.path);
        let id = ParamId(self.next);
        self.next += 1;
        self.params.insert(id, Param { spec, value });
        id
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param> {
        self.params.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[&id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[&id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params.get_mut(&id).expect("param id").value
    }

    pub fn spec_mut(&mut self, id: ParamId) -> &mut ParamSpec {
        &mut self.params.get_mut(&id).expect("param id").spec
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().map(|(&id, p)| (id, p))
    }

    /// Ids sorted lexicographically by path.
    pub fn ids_by_path(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.keys().copied().collect();
        ids.sort_by(|a, b| self.params[a].spec.path.cmp(&self.params[b].spec.path));
        ids
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.params
            .iter()
            .find(|(_, p)| p.spec.path == path)
            .map(|(&id, _)| id)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.ids_by_path().into_iter().map(|id| self.params[&id].spec.clone()).collect()
    }
}

/// Allocating sink: draws initial values from `rng` in declaration order.
pub struct StoreBuilder<'a, R: Rng = Xoshiro256StarStar> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamSink for StoreBuilder<'_, R> {
    fn add(&mut self, spec: ParamSpec, init: Init) -> ParamId {
        let value = init.sample(spec.rows, spec.cols, self.rng);
        self.store.insert(spec, value)
    }
}

/// Shape-only sink.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
}

impl ParamSink for ParamLayout {
    fn add(&mut self, spec: ParamSpec, _init: Init) -> ParamId {
        self.specs.push(spec);
        ParamId(self.specs.len() as u32 - 1)
    }
}

/// Maps stored parameters to tape leaves, one leaf per parameter per tape.
/// Trainable parameters become gradient-tracking leaves.
#[derive(Debug, Default)]
pub struct ParamBinding {
    vars: HashMap<ParamId, Var>,
}

impl ParamBinding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        *self.vars.entry(id).or_insert_with(|| {
            let p = store.get(id);
            tape.leaf(p.value.clone(), p.spec.trainable)
        })
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars.get(&id).copied()
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().map(|(&id, &v)| (id, v))
    }
}

/// Finite-difference check of every trainable parameter read by `build`.
/// The numeric side perturbs a copy of the store and re-runs the forward.
pub fn check_param_gradients<E, F>(store: &ParamStore, build: F) -> Result<Vec<(ParamId, Comparison)>, E>
where
    E: From<GradError>,
    F: Fn(&mut Tape, &mut ParamBinding, &ParamStore) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let mut bind = ParamBinding::new();
    let loss = build(&mut tape, &mut bind, store)?;
    let grads = tape.backward(loss)?;

    let mut out = Vec::new();
    for id in store.ids_by_path() {
        if !store.get(id).spec.trainable {
            continue;
        }
        let Some(var) = bind.get(id) else { continue };
        let analytic = grads.get_or_zeros(&tape, var);
        let mut probe = store.clone();
        let mut err = None;
        let numeric = central_difference(store.value(id), |x| {
            *probe.value_mut(id) = x.clone();
            let mut t = Tape::new();
            let mut b = ParamBinding::new();
            match build(&mut t, &mut b, &probe) {
                Ok(v) => t.scalar(v),
                Err(e) => {
                    err = Some(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        out.push((id, compare(&analytic, &numeric)));
    }
    Ok(out)
}
