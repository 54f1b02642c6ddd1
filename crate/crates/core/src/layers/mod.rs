//! Adapter layers: dense, low-rank, PHM and Compacter (LPHM with shared
//! slow weights).
//!
//! Every projection maps row vectors `x ∈ R^k` to `y = x·W + b ∈ R^d`. For
//! PHM projections `W = Σ_i A_i ⊗ B_i` with `A_i ∈ R^{n×n}` and
//! `B_i ∈ R^{(k/n)×(d/n)}`; LPHM projections factor each `B_i = s_i·t_i`
//! with `s_i ∈ R^{(k/n)×r}`, `t_i ∈ R^{r×(d/n)}`.
//!
//! An adapter is `up(GeLU(down(x))) + x`. Up-projection fast weights start
//! at zero, so a freshly built adapter is exactly the identity.

mod factors;

use thiserror::Error;

use crate::grad::{GradError, Tape, Var};
use crate::linalg::{self, matmul, LinalgError, Tensor2, Tensor3};
use crate::params::{Init, ParamBinding, ParamId, ParamRole, ParamSink, ParamSpec, ParamStore};

pub use factors::{materialize_w, phm_apply, FastWeights, PhmFactors};

/// Standard deviation of the `A_i` initializer.
pub const SLOW_INIT_STD: f64 = 0.05;

/// Path of the shared slow-weight tensor in a model.
pub const SHARED_SLOW_PATH: &str = "shared.phm_a";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("k={k} and d={d} must both be divisible by n={n}")]
    Divisibility { k: usize, d: usize, n: usize },
    #[error("rank r={r} must be in 1..={max}")]
    Rank { r: usize, max: usize },
    #[error("input has {got} features, layer expects {expected}")]
    InputDim { got: usize, expected: usize },
    #[error("cannot share slow weights: {0}")]
    Sharing(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    Dense,
    LowRank,
    Phm,
    Compacter,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 4] = [Self::Dense, Self::LowRank, Self::Phm, Self::Compacter];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::LowRank => "lowrank",
            Self::Phm => "phm",
            Self::Compacter => "compacter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn uses_division(self) -> bool {
        matches!(self, Self::Phm | Self::Compacter)
    }
}

/// Where adapters go inside each transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    AfterAttnAndFfn,
    AfterFfnOnly,
    AfterAttnOnly,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Self::AfterAttnAndFfn, Self::AfterFfnOnly, Self::AfterAttnOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::AfterAttnAndFfn => "after_attn_and_ffn",
            Self::AfterFfnOnly => "after_ffn_only",
            Self::AfterAttnOnly => "after_attn_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn after_attn(self) -> bool {
        matches!(self, Self::AfterAttnAndFfn | Self::AfterAttnOnly)
    }

    pub fn after_ffn(self) -> bool {
        matches!(self, Self::AfterAttnAndFfn | Self::AfterFfnOnly)
    }

    pub fn per_layer(self) -> usize {
        usize::from(self.after_attn()) + usize::from(self.after_ffn())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    /// Bottleneck width `d`.
    pub bottleneck: usize,
    /// Division factor `n` (PHM kinds only).
    pub division: usize,
    /// Rank `r` of factored weights (low-rank and Compacter kinds).
    pub rank: usize,
    pub placement: Placement,
    /// Layers `0..drop_first_m` of each stack get no adapters.
    pub drop_first_m: usize,
}

impl AdapterSpec {
    pub fn new(kind: AdapterKind, bottleneck: usize, division: usize) -> Self {
        Self {
            kind,
            bottleneck,
            division,
            rank: 1,
            placement: Placement::AfterAttnAndFfn,
            drop_first_m: 0,
        }
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_drop_first(mut self, m: usize) -> Self {
        self.drop_first_m = m;
        self
    }

    /// Checks the shape constraints against hidden width `k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        let d = self.bottleneck;
        if d == 0 || k == 0 {
            return Err(LayerError::Divisibility { k, d, n: self.division });
        }
        match self.kind {
            AdapterKind::Dense => Ok(()),
            AdapterKind::LowRank => check_rank(self.rank, k.min(d)),
            AdapterKind::Phm => check_division(k, d, self.division),
            AdapterKind::Compacter => {
                check_division(k, d, self.division)?;
                check_rank(self.rank, (k / self.division).min(d / self.division))
            }
        }
    }
}

fn check_division(k: usize, d: usize, n: usize) -> Result<()> {
    if n == 0 || k % n != 0 || d % n != 0 {
        return Err(LayerError::Divisibility { k, d, n });
    }
    Ok(())
}

fn check_rank(r: usize, max: usize) -> Result<()> {
    if r == 0 || r > max {
        return Err(LayerError::Rank { r, max });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionWeights {
    /// `w: k x d`.
    Dense { w: ParamId },
    /// `u: k x r`, `v: r x d`.
    LowRank { u: ParamId, v: ParamId },
    /// `a: (n·n) x n`, `b: k x (d/n)` (stacked `B_i`).
    Phm { a: ParamId, b: ParamId },
    /// `a: (n·n) x n`, `s: k x r` (stacked `s_i`), `t: (n·r) x (d/n)`.
    Lphm { a: ParamId, s: ParamId, t: ParamId },
}

/// One linear map `k -> d` with bias, in any of the supported factorizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub input: usize,
    pub output: usize,
    pub n: usize,
    pub rank: usize,
    pub weights: ProjectionWeights,
    pub bias: ParamId,
}

impl Projection {
    pub fn slow_weights(&self) -> Option<ParamId> {
        match self.weights {
            ProjectionWeights::Phm { a, .. } | ProjectionWeights::Lphm { a, .. } => Some(a),
            _ => None,
        }
    }

    /// All parameter ids this projection reads.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = match self.weights {
            ProjectionWeights::Dense { w } => vec![w],
            ProjectionWeights::LowRank { u, v } => vec![u, v],
            ProjectionWeights::Phm { a, b } => vec![a, b],
            ProjectionWeights::Lphm { a, s, t } => vec![a, s, t],
        };
        ids.push(self.bias);
        ids
    }

    /// PHM factor view (PHM and LPHM projections only).
    pub fn factors(&self, store: &ParamStore) -> Option<PhmFactors> {
        let bias = store.value(self.bias).clone();
        let (a, fast) = match self.weights {
            ProjectionWeights::Phm { a, b } => (a, FastWeights::Full(store.value(b).clone())),
            ProjectionWeights::Lphm { a, s, t } => (
                a,
                FastWeights::LowRank {
                    s: store.value(s).clone(),
                    t: store.value(t).clone(),
                },
            ),
            _ => return None,
        };
        let shared = store.get(a).spec.role == ParamRole::SharedSlow;
        Some(
            PhmFactors::new(self.n, store.value(a).clone(), fast, bias)
                .expect("stored factors are valid")
                .shared(shared),
        )
    }

    /// Materialized `k x d` weight.
    pub fn weight(&self, store: &ParamStore) -> Result<Tensor2> {
        Ok(match self.weights {
            ProjectionWeights::Dense { w } => store.value(w).clone(),
            ProjectionWeights::LowRank { u, v } => linalg::outer(store.value(u), store.value(v))?,
            ProjectionWeights::Phm { .. } | ProjectionWeights::Lphm { .. } => {
                materialize_w(&self.factors(store).expect("phm projection"))?
            }
        })
    }

    /// `x·W + b` on stacked rows, never forming a PHM weight.
    pub fn apply(&self, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.input {
            return Err(LayerError::InputDim {
                got: x.cols(),
                expected: self.input,
            });
        }
        let y = match self.weights {
            ProjectionWeights::Dense { w } => matmul(x, store.value(w))?,
            ProjectionWeights::LowRank { u, v } => matmul(&matmul(x, store.value(u))?, store.value(v))?,
            ProjectionWeights::Phm { a, b } => linalg::phm_matmul(x, store.value(a), store.value(b), self.n)?,
            ProjectionWeights::Lphm { a, s, t } => {
                let b = linalg::block_matmul(store.value(s), store.value(t), self.n)?;
                linalg::phm_matmul(x, store.value(a), &b, self.n)?
            }
        };
        Ok(y.add_row(store.value(self.bias))?)
    }

    /// Tape version of [`apply`](Self::apply).
    pub fn forward(&self, tape: &mut Tape, bind: &mut ParamBinding, store: &ParamStore, x: Var) -> Result<Var> {
        let got = tape.value(x).cols();
        if got != self.input {
            return Err(LayerError::InputDim {
                got,
                expected: self.input,
            });
        }
        let y = match self.weights {
            ProjectionWeights::Dense { w } => {
                let w = bind.var(tape, store, w);
                tape.matmul(x, w)?
            }
            ProjectionWeights::LowRank { u, v } => {
                let u = bind.var(tape, store, u);
                let v = bind.var(tape, store, v);
                let h = tape.matmul(x, u)?;
                tape.matmul(h, v)?
            }
            ProjectionWeights::Phm { a, b } => {
                let a = bind.var(tape, store, a);
                let b = bind.var(tape, store, b);
                tape.phm_linear(x, a, b, self.n)?
            }
            ProjectionWeights::Lphm { a, s, t } => {
                let a = bind.var(tape, store, a);
                let s = bind.var(tape, store, s);
                let t = bind.var(tape, store, t);
                let b = tape.block_matmul(s, t, self.n)?;
                tape.phm_linear(x, a, b, self.n)?
            }
        };
        let bias = bind.var(tape, store, self.bias);
        Ok(tape.add_row(y, bias)?)
    }
}

/// Bottleneck adapter `up(GeLU(down(x))) + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterLayer {
    pub kind: AdapterKind,
    pub down: Projection,
    pub up: Projection,
}

impl AdapterLayer {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.down.param_ids();
        ids.extend(self.up.param_ids());
        ids
    }

    /// Applies the adapter to stacked rows.
    pub fn apply(&self, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
        let h = self.down.apply(store, x)?.map(crate::grad::gelu_scalar);
        Ok(self.up.apply(store, &h)?.add(x)?)
    }

    pub fn forward(&self, tape: &mut Tape, bind: &mut ParamBinding, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.down.forward(tape, bind, store, x)?;
        let h = tape.gelu(h)?;
        let y = self.up.forward(tape, bind, store, h)?;
        Ok(tape.add(y, x)?)
    }
}

/// Applies an adapter to a `batch x seq x k` activation.
pub fn adapter_forward(adapter: &AdapterLayer, store: &ParamStore, x: &Tensor3) -> Result<Tensor3> {
    let y = adapter.apply(store, &x.to_stacked())?;
    Ok(Tensor3::from_stacked(x.batch(), y)?)
}

/// Declares the single slow-weight set used by every Compacter projection.
pub fn declare_shared_slow(sink: &mut impl ParamSink, n: usize) -> ParamId {
    sink.add(
        ParamSpec::matrix(SHARED_SLOW_PATH, n * n, n, ParamRole::SharedSlow, true),
        Init::Normal { std: SLOW_INIT_STD },
    )
}

/// Declares one adapter's parameters under `prefix`. Compacter adapters need
/// `shared_slow` from [`declare_shared_slow`].
pub fn declare_adapter(
    sink: &mut impl ParamSink,
    prefix: &str,
    spec: &AdapterSpec,
    k: usize,
    trainable: bool,
    shared_slow: Option<ParamId>,
) -> Result<AdapterLayer> {
    spec.validate(k)?;
    let d = spec.bottleneck;
    let down = declare_projection(sink, &format!("{prefix}.down"), spec, k, d, false, trainable, shared_slow)?;
    let up = declare_projection(sink, &format!("{prefix}.up"), spec, d, k, true, trainable, shared_slow)?;
    Ok(AdapterLayer {
        kind: spec.kind,
        down,
        up,
    })
}

#[allow(clippy::too_many_arguments)]
fn declare_projection(
    sink: &mut impl ParamSink,
    prefix: &str,
    spec: &AdapterSpec,
    input: usize,
    output: usize,
    zero_fast: bool,
    trainable: bool,
    shared_slow: Option<ParamId>,
) -> Result<Projection> {
    use ParamRole::AdapterWeight as W;
    let n = spec.division;
    let r = spec.rank;
    let last_init = |fan_in: usize| if zero_fast { Init::Zeros } else { Init::fan_in(fan_in) };
    let weights = match spec.kind {
        AdapterKind::Dense => ProjectionWeights::Dense {
            w: sink.add(ParamSpec::matrix(format!("{prefix}.w"), input, output, W, trainable), last_init(input)),
        },
        AdapterKind::LowRank => ProjectionWeights::LowRank {
            u: sink.add(ParamSpec::matrix(format!("{prefix}.u"), input, r, W, trainable), Init::fan_in(input)),
            v: sink.add(ParamSpec::matrix(format!("{prefix}.v"), r, output, W, trainable), last_init(r)),
        },
        AdapterKind::Phm => ProjectionWeights::Phm {
            a: sink.add(
                ParamSpec::matrix(format!("{prefix}.a"), n * n, n, W, trainable),
                Init::Normal { std: SLOW_INIT_STD },
            ),
            b: sink.add(
                ParamSpec::matrix(format!("{prefix}.b"), input, output / n, W, trainable),
                last_init(input / n),
            ),
        },
        AdapterKind::Compacter => {
            let a = shared_slow.ok_or_else(|| LayerError::Sharing("compacter projection needs a shared slow-weight id".into()))?;
            ProjectionWeights::Lphm {
                a,
                s: sink.add(
                    ParamSpec::matrix(format!("{prefix}.s"), input, r, W, trainable),
                    Init::fan_in(input / n),
                ),
                t: sink.add(
                    ParamSpec::matrix(format!("{prefix}.t"), n * r, output / n, W, trainable),
                    last_init(r),
                ),
            }
        }
    };
    let bias = sink.add(
        ParamSpec::vector(format!("{prefix}.bias"), output, ParamRole::AdapterBias, trainable),
        Init::Zeros,
    );
    Ok(Projection {
        input,
        output,
        n,
        rank: r,
        weights,
        bias,
    })
}

/// Rewires every projection to one slow-weight set. The first projection's
/// `A_i` values are kept (and re-tagged as shared); the other projections'
/// slow weights are removed from the store. Fast weights stay per projection.
pub fn make_shared_slow_weights(store: &mut ParamStore, n: usize, handles: &mut [&mut Projection]) -> Result<ParamId> {
    let first = handles
        .first()
        .and_then(|p| p.slow_weights())
        .ok_or_else(|| LayerError::Sharing("no PHM projections given".into()))?;
    for h in handles.iter() {
        if h.n != n {
            return Err(LayerError::Sharing(format!("projection has n={}, expected n={n}", h.n)));
        }
        if h.slow_weights().is_none() {
            return Err(LayerError::Sharing("projection has no slow weights".into()));
        }
    }
    let mut orphans = Vec::new();
    for h in handles.iter_mut() {
        if let ProjectionWeights::Phm { a, .. } | ProjectionWeights::Lphm { a, .. } = &mut h.weights {
            if *a != first && !orphans.contains(a) {
                orphans.push(*a);
            }
            *a = first;
        }
    }
    for id in orphans {
        store.remove(id);
    }
    store.spec_mut(first).role = ParamRole::SharedSlow;
    Ok(first)
}

#[cfg(test)]
mod tests;
