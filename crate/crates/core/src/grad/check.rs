//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it shares no
//! code with any backward rule.

use super::{Result, Tape, Var};
use crate::linalg::Tensor2;

/// Per-element step: `1e-6 · max(1, |x|)`.
pub fn step_size(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// Relative error with a unit floor on the denominator, so entries whose true
/// value is ~0 are compared absolutely.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central differences of a scalar function of one matrix.
pub fn central_difference(x: &Tensor2, mut f: impl FnMut(&Tensor2) -> f64) -> Tensor2 {
    let mut probe = x.clone();
    let mut out = Tensor2::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let h = step_size(x0);
        probe.data_mut()[i] = x0 + h;
        let plus = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let minus = f(&probe);
        probe.data_mut()[i] = x0;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Worst element of an analytic-vs-numeric comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Comparison {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn compare(analytic: &Tensor2, numeric: &Tensor2) -> Comparison {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut worst = Comparison {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = grad_rel_err(a, n);
        // NaN compares false; force it to the top
        if e > worst.max_rel_err || e.is_nan() {
            worst = Comparison {
                max_rel_err: if e.is_nan() { f64::INFINITY } else { e },
                worst_index: i,
                analytic: a,
                numeric: n,
            };
        }
    }
    worst
}

/// Checks every input's gradient of the scalar graph produced by `build`.
/// `build` receives one leaf per input (all trainable) and returns a 1x1 var.
pub fn check_gradients<F>(inputs: &[Tensor2], build: F) -> Result<Vec<Comparison>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor2]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut results = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, *var);
        let mut values = inputs.to_vec();
        let mut err = None;
        let numeric = central_difference(&inputs[i], |x| {
            values[i] = x.clone();
            eval(&values).unwrap_or_else(|e| {
                err = Some(e);
                f64::NAN
            })
        });
        if let Some(e) = err {
            return Err(e);
        }
        results.push(compare(&analytic, &numeric));
    }
    Ok(results)
}
