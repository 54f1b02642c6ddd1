//! Randomized verification drivers behind `kpft gradcheck` and
//! `kpft materialize-check`.
//!
//! Every trial draws fresh shapes and values from a seeded stream, so a run is
//! reproducible from `(seed, trials)`.

use rand::Rng;
use thiserror::Error;

use crate::grad::check::{check_gradients, Comparison};
use crate::grad::{GradError, Tape, Var};
use crate::layers::{
    declare_adapter, declare_shared_slow, materialize_w, phm_apply, AdapterKind, AdapterLayer, AdapterSpec, FastWeights,
    LayerError, PhmFactors,
};
use crate::linalg::{kron, matmul, max_rel_diff, unstack_rows, Tensor2, Tensor3};
use crate::params::{check_param_gradients, ParamBinding, ParamStore, StoreBuilder};
use crate::rng::{substream, Stream};

/// Finite-difference tolerance on `grad_rel_err`.
pub const GRAD_TOL: f64 = 1e-5;
/// Relative tolerance for factored versus materialized products.
pub const MATERIALIZE_TOL: f64 = 1e-12;
pub const DEFAULT_GRAD_TRIALS: usize = 50;
pub const DEFAULT_MATERIALIZE_TRIALS: usize = 200;

/// Checkable ops, in report order.
pub const GRAD_OPS: [&str; 10] = [
    "matmul",
    "kron",
    "sum_kron",
    "outer",
    "gelu",
    "layer_norm",
    "softmax",
    "cross_entropy",
    "adapter",
    "compacter",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("unknown op {0:?}; expected one of {ops}", ops = GRAD_OPS.join(", "))]
    UnknownOp(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

impl From<crate::linalg::LinalgError> for VerifyError {
    fn from(e: crate::linalg::LinalgError) -> Self {
        Self::Grad(e.into())
    }
}

type Result<T> = std::result::Result<T, VerifyError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub trials: usize,
    pub tol: f64,
    /// Adds a loss term the tape cannot see, so every check must fail. Used to
    /// prove the driver detects broken gradients.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            trials: DEFAULT_GRAD_TRIALS,
            tol: GRAD_TOL,
            inject_fault: false,
        }
    }
}

/// Worst gradient comparison for one op across all trials.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub op: &'static str,
    pub trials: usize,
    pub worst: Comparison,
    pub worst_trial: usize,
    /// Which input (or parameter path) held the worst element.
    pub worst_input: String,
}

impl GradCheckRow {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst.passes(tol)
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `Σ y∘w` for a fixed random `w`, plus the detached fault term if requested.
fn reduce(tape: &mut Tape, y: Var, weights: &Tensor2, fault: Option<Var>) -> std::result::Result<Var, GradError> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    let mut loss = tape.sum(p)?;
    if let Some(x) = fault {
        loss = add_fault(tape, loss, x)?;
    }
    Ok(loss)
}

/// `loss + Σ x²` with `x²` entered as a constant: the tape sees no gradient
/// while finite differences see `2x`.
fn add_fault(tape: &mut Tape, loss: Var, x: Var) -> std::result::Result<Var, GradError> {
    let sq = tape.value(x).map(|v| v * v).sum();
    let c = tape.constant(Tensor2::filled(1, 1, sq));
    tape.add(loss, c)
}

/// One trial of a tensor op: inputs and a scalar graph over them.
fn op_trial(op: &str, rng: &mut impl Rng, fault: bool) -> Result<Vec<(String, Comparison)>> {
    let dim = |rng: &mut dyn rand::RngCore| rng.gen_range(1..=4usize);
    let (inputs, out_shape): (Vec<Tensor2>, (usize, usize)) = match op {
        "matmul" | "outer" => {
            let (m, p, q) = (dim(rng), dim(rng), dim(rng));
            (vec![uniform(rng, m, p), uniform(rng, p, q)], (m, q))
        }
        "kron" => {
            let (m, f, p, q) = (dim(rng), dim(rng), dim(rng), dim(rng));
            (vec![uniform(rng, m, f), uniform(rng, p, q)], (m * p, f * q))
        }
        "sum_kron" => {
            let n = rng.gen_range(1..=3usize);
            let (p, q) = (dim(rng), dim(rng));
            (vec![uniform(rng, n * n, n), uniform(rng, n * p, q)], (n * p, n * q))
        }
        "gelu" | "softmax" => {
            let (m, q) = (dim(rng), dim(rng) + 1);
            (vec![uniform(rng, m, q).scale(3.0)], (m, q))
        }
        "layer_norm" => {
            let (m, q) = (dim(rng), dim(rng) + 1);
            (vec![uniform(rng, m, q).scale(2.0), uniform(rng, 1, q), uniform(rng, 1, q)], (m, q))
        }
        "cross_entropy" => {
            let (m, c) = (dim(rng), dim(rng) + 1);
            (vec![uniform(rng, m, c).scale(3.0)], (1, 1))
        }
        other => return Err(VerifyError::UnknownOp(other.to_string())),
    };
    let weights = uniform(rng, out_shape.0, out_shape.1);
    let n = (inputs[0].rows() as f64).sqrt().round() as usize;
    let targets: Vec<usize> = (0..inputs[0].rows()).map(|_| rng.gen_range(0..inputs[0].cols())).collect();
    let res = check_gradients(&inputs, |tape, v| {
        let fault = fault.then_some(v[0]);
        let y = match op {
            "matmul" => tape.matmul(v[0], v[1])?,
            "outer" => tape.outer(v[0], v[1])?,
            "kron" => tape.kron(v[0], v[1])?,
            "sum_kron" => tape.sum_kron(v[0], v[1], n)?,
            "gelu" => tape.gelu(v[0])?,
            "softmax" => tape.softmax(v[0])?,
            "layer_norm" => tape.layer_norm(v[0], v[1], Some(v[2]))?,
            "cross_entropy" => {
                let loss = tape.cross_entropy(v[0], &targets)?;
                return match fault {
                    Some(x) => add_fault(tape, loss, x),
                    None => Ok(loss),
                };
            }
            _ => unreachable!("op validated above"),
        };
        reduce(tape, y, &weights, fault)
    })?;
    Ok(res.into_iter().enumerate().map(|(i, c)| (format!("input {i}"), c)).collect())
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    for id in store.ids_by_path() {
        let (r, c) = store.value(id).shape();
        *store.value_mut(id) = uniform(rng, r, c);
    }
}

/// One trial through whole adapter layers. `compacter` stacks several
/// Compacter adapters on one shared slow-weight set.
fn layer_trial(op: &str, rng: &mut impl Rng, fault: bool) -> Result<Vec<(String, Comparison)>> {
    let n = [1, 2, 4][rng.gen_range(0..3)];
    let k = 4 * rng.gen_range(1..=2);
    let d = 4 * rng.gen_range(1..=2);
    let max_rank = (k / n).min(d / n);
    let rank = rng.gen_range(1..=max_rank.min(2));
    let (spec, count) = match op {
        "adapter" => {
            let kind = [AdapterKind::Dense, AdapterKind::LowRank, AdapterKind::Phm][rng.gen_range(0..3)];
            let n = if kind.uses_division() { n } else { 1 };
            (AdapterSpec::new(kind, d, n).with_rank(rank), 1)
        }
        _ => (AdapterSpec::new(AdapterKind::Compacter, d, n).with_rank(rank), rng.gen_range(2..=3)),
    };
    let mut store = ParamStore::new();
    let mut layers: Vec<AdapterLayer> = Vec::new();
    {
        let mut sink = StoreBuilder { store: &mut store, rng: &mut *rng };
        let shared = (spec.kind == AdapterKind::Compacter).then(|| declare_shared_slow(&mut sink, spec.division));
        for l in 0..count {
            layers.push(declare_adapter(&mut sink, &format!("layer.{l}"), &spec, k, true, shared)?);
        }
    }
    randomize(&mut store, rng);
    let rows = rng.gen_range(1..=3);
    let x = uniform(rng, rows, k);
    let weights = uniform(rng, rows, k);
    let fault_id = store.ids_by_path()[0];
    let res = check_param_gradients(&store, |tape: &mut Tape, bind: &mut ParamBinding, s: &ParamStore| {
        let mut h = tape.constant(x.clone());
        for l in &layers {
            h = l.forward(tape, bind, s, h)?;
        }
        let fault = fault.then(|| bind.var(tape, s, fault_id));
        Ok::<_, VerifyError>(reduce(tape, h, &weights, fault)?)
    })?;
    Ok(res
        .into_iter()
        .map(|(id, c)| (store.get(id).spec.path.clone(), c))
        .collect())
}

/// Runs `options.trials` randomized checks of `op`.
pub fn gradcheck_op(op: &str, seed: u64, options: &GradCheckOptions) -> Result<GradCheckRow> {
    let name = GRAD_OPS
        .into_iter()
        .find(|o| *o == op)
        .ok_or_else(|| VerifyError::UnknownOp(op.to_string()))?;
    let op_index = GRAD_OPS.iter().position(|o| *o == op).unwrap() as u64;
    let mut rng = substream(seed, Stream::Check, op_index);
    let mut row = GradCheckRow {
        op: name,
        trials: options.trials,
        worst: Comparison {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        },
        worst_trial: 0,
        worst_input: String::new(),
    };
    for trial in 0..options.trials {
        let results = match name {
            "adapter" | "compacter" => layer_trial(name, &mut rng, options.inject_fault)?,
            _ => op_trial(name, &mut rng, options.inject_fault)?,
        };
        for (input, c) in results {
            if trial == 0 && row.worst_input.is_empty() || c.max_rel_err > row.worst.max_rel_err {
                row.worst = c;
                row.worst_trial = trial;
                row.worst_input = input;
            }
        }
    }
    Ok(row)
}

/// Checks `op`, or every op in [`GRAD_OPS`] when `None`.
pub fn run_gradcheck(seed: u64, op: Option<&str>, options: &GradCheckOptions) -> Result<Vec<GradCheckRow>> {
    match op {
        Some(op) => Ok(vec![gradcheck_op(op, seed, options)?]),
        None => GRAD_OPS.iter().map(|op| gradcheck_op(op, seed, options)).collect(),
    }
}

/// Worst deviations over a materialization run.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializeReport {
    pub trials: usize,
    /// Factored apply versus `x·W + b` with `W` from the Kronecker oracle.
    pub apply_max_rel_err: f64,
    /// `materialize_w` versus the Kronecker oracle.
    pub weight_max_rel_err: f64,
    /// Low-rank factors versus full factors with `B_i = s_i·t_i` substituted.
    pub lowrank_max_rel_err: f64,
    /// Description of the worst trial.
    pub worst: String,
}

impl MaterializeReport {
    pub fn max_rel_err(&self) -> f64 {
        self.apply_max_rel_err.max(self.weight_max_rel_err).max(self.lowrank_max_rel_err)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// `Σ A_i ⊗ B_i` assembled one Kronecker product at a time.
fn kron_oracle(a_set: &Tensor2, b_set: &[Tensor2], n: usize) -> Result<Tensor2> {
    let a = unstack_rows(a_set, n)?;
    let (p, q) = b_set[0].shape();
    let mut w = Tensor2::zeros(n * p, n * q);
    for (ai, bi) in a.iter().zip(b_set) {
        w = w.add(&kron(ai, bi))?;
    }
    Ok(w)
}

/// Random factor sets with `k, d ∈ {4, 8, 12}`, `n ∈ {1, 2, 4}` and, for the
/// low-rank half, rank `r ∈ {1, 2}`.
pub fn run_materialize_check(seed: u64, trials: usize) -> Result<MaterializeReport> {
    let mut rng = substream(seed, Stream::Check, 100);
    let mut report = MaterializeReport {
        trials,
        apply_max_rel_err: 0.0,
        weight_max_rel_err: 0.0,
        lowrank_max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut worst = -1.0;
    let mut done = 0;
    while done < trials {
        let k = [4, 8, 12][rng.gen_range(0..3)];
        let d = [4, 8, 12][rng.gen_range(0..3)];
        let n = [1, 2, 4][rng.gen_range(0..3)];
        let r = rng.gen_range(1..=2);
        if k % n != 0 || d % n != 0 || r > (k / n).min(d / n) {
            continue;
        }
        done += 1;
        let a_set = uniform(&mut rng, n * n, n);
        let s = uniform(&mut rng, k, r);
        let t = uniform(&mut rng, n * r, d / n);
        let bias = uniform(&mut rng, 1, d);
        let low = PhmFactors::new(n, a_set.clone(), FastWeights::LowRank { s: s.clone(), t: t.clone() }, bias.clone())?;
        // B_i = s_i·t_i computed block by block
        let b_blocks: Vec<Tensor2> = unstack_rows(&s, n)?
            .iter()
            .zip(unstack_rows(&t, n)?)
            .map(|(si, ti)| matmul(si, &ti))
            .collect::<std::result::Result<_, _>>()?;
        let b_stack = crate::linalg::stack_rows(&b_blocks)?;
        let full_random = uniform(&mut rng, k, d / n);
        let full = PhmFactors::new(n, a_set.clone(), FastWeights::Full(full_random.clone()), bias.clone())?;
        let substituted = PhmFactors::new(n, a_set.clone(), FastWeights::Full(b_stack), bias.clone())?;

        let batch = rng.gen_range(1..=3);
        let seq = rng.gen_range(1..=4);
        let x = Tensor3::from_stacked(batch, uniform(&mut rng, batch * seq, k))?;
        let xs = x.to_stacked();

        let full_oracle = kron_oracle(&a_set, &unstack_rows(&full_random, n)?, n)?;
        let low_oracle = kron_oracle(&a_set, &b_blocks, n)?;
        let mut apply_err: f64 = 0.0;
        let mut weight_err: f64 = 0.0;
        for (f, w) in [(&full, &full_oracle), (&low, &low_oracle)] {
            let y = phm_apply(f, &x)?.into_stacked();
            let expected = matmul(&xs, w)?.add_row(&bias)?;
            apply_err = apply_err.max(max_rel_diff(&y, &expected)?);
            weight_err = weight_err.max(max_rel_diff(&materialize_w(f)?, w)?);
        }
        let low_y = phm_apply(&low, &x)?.into_stacked();
        let sub_y = phm_apply(&substituted, &x)?.into_stacked();
        let lowrank_err = max_rel_diff(&low_y, &sub_y)?.max(max_rel_diff(&materialize_w(&low)?, &materialize_w(&substituted)?)?);

        report.apply_max_rel_err = report.apply_max_rel_err.max(apply_err);
        report.weight_max_rel_err = report.weight_max_rel_err.max(weight_err);
        report.lowrank_max_rel_err = report.lowrank_max_rel_err.max(lowrank_err);
        let trial_worst = apply_err.max(weight_err).max(lowrank_err);
        if trial_worst > worst {
            worst = trial_worst;
            report.worst = format!("trial {} (k={k} d={d} n={n} r={r} batch={batch} seq={seq})", done - 1);
        }
    }
    Ok(report)
}
