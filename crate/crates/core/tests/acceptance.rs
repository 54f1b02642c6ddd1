//! Acceptance suite: seven criteria, one PASS/FAIL line each on stderr.
//!
//! The criteria run sequentially inside one test so that each wall-clock
//! budget is measured without contention. Lines are written straight to the
//! stderr handle so they appear even when the harness captures output.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use kpft_core::io::{load_checkpoint, parse_config, save_checkpoint, RunConfig};
use kpft_core::layers::{AdapterKind, AdapterSpec};
use kpft_core::model::{ModelConfig, ModelGeometry, TransformerModel};
use kpft_core::parambudget::{
    audit, closed_form_adapter, closed_form_compacter, closed_form_phm, kd_exceeds_n4, Method, MethodSettings,
};
use kpft_core::params::ParamRole;
use kpft_core::train::{low_resource_sweep, run_training, SUBSAMPLE_SIZES};
use kpft_core::verify::{run_gradcheck, run_materialize_check, GradCheckOptions, GRAD_TOL, MATERIALIZE_TOL};

/// Epochs per low-resource run; steps scale with the subsample size.
const SWEEP_EPOCHS: usize = 10;
const SWEEP_SEEDS: u64 = 5;

type Verdict = (bool, String);

fn parity_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/parity.conf");
    parse_config(&std::fs::read_to_string(path).expect("parity config")).expect("valid parity config")
}

/// Grid geometry: `layers` encoder layers, optionally as many decoder layers.
fn grid_geometry(layers: usize, k: usize, decoder: bool) -> ModelGeometry {
    let mut g = ModelGeometry::toy();
    g.enc_layers = layers;
    g.dec_layers = if decoder { layers } else { 0 };
    g.hidden = k;
    g.ffn = 2 * k;
    g
}

/// Trainable adapter weight scalars of a built model, biases and norms excluded.
fn traversed_adapter_weights(model: &TransformerModel) -> usize {
    model
        .store()
        .iter()
        .filter(|(_, p)| p.spec.trainable && matches!(p.spec.role, ParamRole::AdapterWeight | ParamRole::SharedSlow))
        .map(|(_, p)| p.spec.numel())
        .sum()
}

fn parameter_fractions() -> Verdict {
    let settings = MethodSettings::default();
    let g = ModelGeometry::t5_base();
    let c = audit(&Method::Compacter.config(g, &settings)).unwrap();
    let pp = audit(&Method::CompacterPp.config(g, &settings)).unwrap();
    let total_ok = (c.total_model as f64 - 222e6).abs() / 222e6 < 0.01;
    let (fc, fpp) = (100.0 * c.fraction_counted, 100.0 * pp.fraction_counted);
    let ok = total_ok && (fc - 0.073).abs() <= 0.01 && (fpp - 0.047).abs() <= 0.01;
    (
        ok,
        format!(
            "total={} compacter={:.4}% (target 0.073%) compacter++={:.4}% (target 0.047%)",
            c.total_model, fc, fpp
        ),
    )
}

fn closed_form_vs_traversal() -> Verdict {
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for layers in 1..=4 {
        for k in [8, 16] {
            for d in [4, 8] {
                for n in [1, 2, 4] {
                    for decoder in [false, true] {
                        let stack_layers = if decoder { 2 * layers } else { layers };
                        let g = grid_geometry(layers, k, decoder);
                        let cases = [
                            (AdapterKind::Dense, 1, closed_form_adapter(stack_layers, k, d).total),
                            (AdapterKind::Phm, n, closed_form_phm(stack_layers, k, d, n).unwrap().total),
                            (AdapterKind::Compacter, n, closed_form_compacter(stack_layers, k, d, n).unwrap().total),
                        ];
                        for (kind, div, expected) in cases {
                            let cfg = ModelConfig::new(g, Some(AdapterSpec::new(kind, d, div)));
                            let got = traversed_adapter_weights(&TransformerModel::build(&cfg, 0).unwrap());
                            checked += 1;
                            if got != expected {
                                mismatches.push(format!("{kind:?} L={layers} dec={decoder} k={k} d={d} n={div}: {got} != {expected}"));
                            }
                        }
                    }
                }
            }
        }
    }
    (
        mismatches.is_empty(),
        format!("{checked} configs, {} mismatches {:?}", mismatches.len(), mismatches.first()),
    )
}

fn materialization() -> Verdict {
    let r = run_materialize_check(2024, 500).unwrap();
    (
        r.passes(MATERIALIZE_TOL),
        format!(
            "{} configs, apply {:.2e}, weight {:.2e}, low-rank vs substituted {:.2e} (tol {:.0e})",
            r.trials, r.apply_max_rel_err, r.weight_max_rel_err, r.lowrank_max_rel_err, MATERIALIZE_TOL
        ),
    )
}

fn gradients() -> Verdict {
    let options = GradCheckOptions::default();
    let rows = run_gradcheck(2024, None, &options).unwrap();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passes(GRAD_TOL)).map(|r| r.op).collect();
    let worst = rows
        .iter()
        .max_by(|a, b| a.worst.max_rel_err.total_cmp(&b.worst.max_rel_err))
        .unwrap();
    (
        failed.is_empty() && rows.iter().all(|r| r.trials >= 50),
        format!(
            "{} ops x {} trials, worst {} {:.2e} (tol {:.0e}), failed {:?}",
            rows.len(),
            options.trials,
            worst.op,
            worst.worst.max_rel_err,
            GRAD_TOL,
            failed
        ),
    )
}

fn protocol_invariants() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;

    // identity at init, every adapter kind against the adapter-free model
    let g = grid_geometry(2, 16, false);
    let tokens = vec![vec![1, 2, 3, 4, 5], vec![0, 7, 7, 1, 2], vec![3, 3, 3, 3, 3]];
    let bare = TransformerModel::build(&ModelConfig::new(g, None), 11).unwrap().forward(&tokens).unwrap();
    let mut max_dev: f64 = 0.0;
    for kind in AdapterKind::ALL {
        let n = if kind.uses_division() { 2 } else { 1 };
        let model = TransformerModel::build(&ModelConfig::new(g, Some(AdapterSpec::new(kind, 8, n))), 11).unwrap();
        let logits = model.forward(&tokens).unwrap();
        for (a, b) in logits.data().iter().zip(bare.data()) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    ok &= max_dev == 0.0;
    notes.push(format!("identity dev={max_dev}"));

    // frozen weights bitwise unchanged over 100 steps
    let mut cfg = parity_config();
    cfg.schedule.steps = 100;
    let trained = run_training(&cfg).unwrap().model;
    let fresh = TransformerModel::build(&cfg.model, cfg.seed).unwrap();
    let frozen_ok = fresh
        .store()
        .iter()
        .filter(|(_, p)| !p.spec.trainable)
        .all(|(id, p)| trained.store().value(id).data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    ok &= frozen_ok;
    notes.push(format!("frozen={frozen_ok}"));

    // one shared slow-weight set, referenced by every projection
    let slow = fresh.shared_slow_weights();
    let slow_sets: Vec<_> = fresh.store().iter().filter(|(_, p)| p.spec.role == ParamRole::SharedSlow).collect();
    let n = cfg.model.adapter.unwrap().division;
    let shared_ok = slow_sets.len() == 1
        && slow == Some(slow_sets[0].0)
        && slow_sets[0].1.spec.numel() == n * n * n
        && fresh
            .encoder_adapters()
            .iter()
            .all(|a| a.down.slow_weights() == slow && a.up.slow_weights() == slow);
    ok &= shared_ok;
    notes.push(format!("shared_a={shared_ok}"));

    // checkpoint round trip
    let bytes = save_checkpoint(&trained);
    let mut restored = TransformerModel::build(&cfg.model, cfg.seed).unwrap();
    load_checkpoint(&bytes, &mut restored).unwrap();
    let round_trip_ok = save_checkpoint(&restored) == bytes && restored.store() == trained.store();
    ok &= round_trip_ok;
    notes.push(format!("checkpoint={round_trip_ok}"));
    (ok, notes.join(" "))
}

fn end_to_end_learning() -> Verdict {
    let cfg = parity_config();
    let out = run_training(&cfg).unwrap();
    let r = &out.report;
    let budget = audit(&cfg.model).unwrap();
    let fraction = budget.fraction_counted.max(r.trained_fraction);
    let main_ok = r.test_accuracy > 0.95 && cfg.schedule.steps <= 2000 && fraction < 0.05;

    let points = low_resource_sweep(&cfg, &SUBSAMPLE_SIZES, SWEEP_SEEDS, SWEEP_EPOCHS, |_, _, _| {}).unwrap();
    let trend_ok = points.windows(2).all(|w| w[1].mean >= w[0].mean);
    let trend: Vec<String> = points
        .iter()
        .map(|p| format!("{}:{:.3}±{:.3}", p.size, p.mean, p.std))
        .collect();
    (
        main_ok && trend_ok,
        format!(
            "test acc {:.4} after {} steps on {} samples, trained {:.2}% ; sweep {}",
            r.test_accuracy,
            cfg.schedule.steps,
            cfg.task.train_size,
            100.0 * fraction,
            trend.join(" ")
        ),
    )
}

fn complexity_ordering() -> Verdict {
    let mut checked = 0;
    let mut violations = Vec::new();
    for k in [8, 16] {
        for d in [4, 8] {
            for n in [2, 4] {
                if !kd_exceeds_n4(k, d, n) {
                    continue;
                }
                for layers in 1..=4 {
                    let g = grid_geometry(layers, k, false);
                    let count = |kind, div| {
                        audit(&ModelConfig::new(g, Some(AdapterSpec::new(kind, d, div))))
                            .unwrap()
                            .adapter_weights
                    };
                    let (c, p, a) = (count(AdapterKind::Compacter, n), count(AdapterKind::Phm, n), count(AdapterKind::Dense, 1));
                    checked += 1;
                    if !(c < p && p < a) {
                        violations.push(format!("L={layers} k={k} d={d} n={n}: {c} {p} {a}"));
                    }
                    // whatever is left after the per-layer fast weights is the shared set
                    if c - 4 * layers * (k + d) != n.pow(3) {
                        violations.push(format!("shared term varies at L={layers} k={k} d={d} n={n}"));
                    }
                }
            }
        }
    }
    (
        violations.is_empty() && checked > 0,
        format!("{checked} configs, violations {violations:?}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, Duration, fn() -> Verdict); 7] = [
        ("parameter fractions", Duration::from_secs(1), parameter_fractions),
        ("closed form vs traversal", Duration::from_secs(5), closed_form_vs_traversal),
        ("materialization equivalence", Duration::from_secs(10), materialization),
        ("gradient correctness", Duration::from_secs(60), gradients),
        ("protocol invariants", Duration::from_secs(30), protocol_invariants),
        ("end-to-end learning", Duration::from_secs(600), end_to_end_learning),
        ("complexity ordering", Duration::from_secs(1), complexity_ordering),
    ];
    let mut failed = Vec::new();
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = run();
        let elapsed = start.elapsed();
        let pass = ok && elapsed < budget;
        let line = format!(
            "acceptance {}: {} {name}: {detail} [{:.2}s / {}s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        writeln!(std::io::stderr(), "{line}").unwrap();
        if !pass {
            failed.push(line);
        }
    }
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
