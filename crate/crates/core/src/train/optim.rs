use std::collections::BTreeMap;

use crate::linalg::Tensor2;
use crate::params::{ParamId, ParamStore};

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            warmup_steps: 0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    /// Learning rate for 1-based step `t`: linear ramp to `lr` over the
    /// warmup, constant afterwards.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.lr
        } else {
            self.lr * t as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<ParamId, (Tensor2, Tensor2)>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor2, Tensor2)> {
        self.moments.get(&id)
    }
}

/// One AdamW update with bias correction and decoupled weight decay
/// (`p -= lr·wd·p` after the Adam step). Every gradient is checked before any
/// parameter moves, so a non-finite gradient leaves the store untouched.
pub fn adamw_step(store: &mut ParamStore, grads: &[(ParamId, Tensor2)], state: &mut OptimState) -> Result<()> {
    for (id, g) in grads {
        let p = store.get(*id);
        if g.shape() != p.value.shape() {
            return Err(TrainError::Shape {
                path: p.spec.path.clone(),
                param: p.value.shape(),
                grad: g.shape(),
            });
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                path: p.spec.path.clone(),
                index: i,
                step: state.step + 1,
            });
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let lr = c.lr_at(state.step);
    let step_size = lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
    for (id, g) in grads {
        let (m, v) = state
            .moments
            .entry(*id)
            .or_insert_with(|| (Tensor2::zeros(g.rows(), g.cols()), Tensor2::zeros(g.rows(), g.cols())));
        let p = store.value_mut(*id);
        for (((pi, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let denom = vi.sqrt() + c.eps;
            // 0/0 with eps = 0 and a zero history is a zero step
            if denom != 0.0 {
                *pi -= step_size * *mi / denom;
            }
            if c.weight_decay != 0.0 {
                *pi -= lr * c.weight_decay * *pi;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamRole, ParamSpec};

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert(
            ParamSpec::vector("p", 1, ParamRole::AdapterWeight, true),
            Tensor2::filled(1, 1, v),
        );
        (s, id)
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut s, id) = scalar_store(0.7);
        let mut st = OptimState::new(AdamWConfig::default());
        for _ in 0..5 {
            adamw_step(&mut s, &[(id, Tensor2::zeros(1, 1))], &mut st).unwrap();
        }
        assert_eq!(s.value(id).get(0, 0), 0.7);
    }

    #[test]
    fn zero_moments_and_eps_step_by_lr() {
        let (mut s, id) = scalar_store(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(cfg);
        // m = g = 1, v = g² = 1, bias corrections are 1: p -= lr·1/1
        adamw_step(&mut s, &[(id, Tensor2::filled(1, 1, 1.0))], &mut st).unwrap();
        assert!((s.value(id).get(0, 0) - 0.9).abs() < 1e-15);
        adamw_step(&mut s, &[(id, Tensor2::filled(1, 1, 1.0))], &mut st).unwrap();
        assert!((s.value(id).get(0, 0) - 0.8).abs() < 1e-15);
        // g = -3 gives a step of +lr
        adamw_step(&mut s, &[(id, Tensor2::filled(1, 1, -3.0))], &mut st).unwrap();
        assert!((s.value(id).get(0, 0) - 0.9).abs() < 1e-15);
        // zero grad with eps = 0: 0/0 is treated as no step
        adamw_step(&mut s, &[(id, Tensor2::zeros(1, 1))], &mut st).unwrap();
        assert!((s.value(id).get(0, 0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let (mut s, id) = scalar_store(2.0);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut st = OptimState::new(cfg);
        let mut expected = 2.0;
        for _ in 0..10 {
            adamw_step(&mut s, &[(id, Tensor2::zeros(1, 1))], &mut st).unwrap();
            expected *= 1.0 - 0.01 * 0.5;
        }
        assert!((s.value(id).get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let cfg = AdamWConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..AdamWConfig::default()
        };
        let lrs: Vec<f64> = (1..=6).map(|t| cfg.lr_at(t)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let (mut s, id) = scalar_store(1.0);
        let mut st = OptimState::new(AdamWConfig::default());
        let err = adamw_step(&mut s, &[(id, Tensor2::filled(1, 1, f64::NAN))], &mut st).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 1, .. }));
        assert_eq!(s.value(id).get(0, 0), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn matches_reference_recurrence() {
        // hand-unrolled AdamW over three steps with warmup and decay
        let cfg = AdamWConfig {
            lr: 0.05,
            warmup_steps: 2,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let grads = [0.3, -1.2, 0.7];
        let (mut s, id) = scalar_store(0.5);
        let mut st = OptimState::new(cfg);
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            adamw_step(&mut s, &[(id, Tensor2::filled(1, 1, g))], &mut st).unwrap();
            let t = (i + 1) as f64;
            let lr = 0.05 * (t / 2.0).min(1.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powf(t));
            let vhat = v / (1.0 - 0.999f64.powf(t));
            p -= lr * mhat / (vhat.sqrt() + 1e-8 / (1.0 - 0.999f64.powf(t)).sqrt());
            p -= lr * 0.1 * p;
            assert!((s.value(id).get(0, 0) - p).abs() < 1e-14, "step {t}");
        }
    }
}
