//! `kpft`: parameter budgets, verification drivers, training and evaluation.
//!
//! Exit codes: 0 success, 1 failed check, 2 config error, 3 I/O error,
//! 4 numeric abort. Data goes to stdout, diagnostics to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kpft_core::bench::{run_bench, BenchSettings};
use kpft_core::io::{fmt_sig, load_checkpoint, parse_config, save_checkpoint, RunConfig};
use kpft_core::model::TransformerModel;
use kpft_core::parambudget::{audit, audit_all, Method, MethodSettings, ParamBudgetReport};
use kpft_core::train::{accuracy, prepare_data, run_training_with, TrainError};
use kpft_core::verify::{
    run_gradcheck, run_materialize_check, GradCheckOptions, DEFAULT_GRAD_TRIALS, DEFAULT_MATERIALIZE_TRIALS, GRAD_TOL,
    MATERIALIZE_TOL,
};

const SEED_ENV: &str = "KPFT_SEED";
const CHECKPOINT_FILE: &str = "checkpoint.kpft";
const REPORT_FILE: &str = "report.txt";
const CONFIG_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "kpft", version, about = "Kronecker-product adapter fine-tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trainable-parameter budget of a config or of every method.
    CountParams {
        #[arg(long)]
        config: PathBuf,
        /// adapter (alias dense), pfeiffer, adapterdrop, lowrank, phm, compacter, compacter++, bitfit
        #[arg(long, conflicts_with = "all_methods")]
        method: Option<String>,
        #[arg(long)]
        all_methods: bool,
    },
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = DEFAULT_GRAD_TRIALS)]
        trials: usize,
        /// Corrupts every gradient so the checks must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Factored PHM/LPHM products against materialized weights.
    MaterializeCheck {
        #[arg(long, default_value_t = DEFAULT_MATERIALIZE_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trains per config; writes checkpoint, report and resolved config to `out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Steps/sec and tensor allocations per method on the config's geometry.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn check(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::NonFinite { .. } | TrainError::NonFiniteLoss { .. } => 4,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Failure::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

fn method_settings(cfg: &RunConfig) -> MethodSettings {
    let mut s = MethodSettings::default();
    if let Some(spec) = &cfg.model.adapter {
        s.bottleneck = spec.bottleneck;
        s.division = spec.division;
        s.rank = spec.rank;
        if spec.drop_first_m > 0 {
            s.drop_first_m = spec.drop_first_m;
        }
    }
    let g = &cfg.model.geometry;
    let layers = if g.dec_layers == 0 { g.enc_layers } else { g.enc_layers.min(g.dec_layers) };
    s.drop_first_m = s.drop_first_m.min(layers.saturating_sub(1));
    s
}

fn count_params(config: &Path, method: Option<&str>, all: bool) -> Outcome {
    let cfg = load_config(config)?;
    let settings = method_settings(&cfg);
    let geometry = cfg.model.geometry;
    let reports: Vec<ParamBudgetReport> = if all {
        audit_all(geometry, &settings).map_err(|e| Failure::config(e.to_string()))?
    } else {
        let model_cfg = match method {
            Some(name) => Method::parse(name)
                .ok_or_else(|| Failure::config(format!("unknown method {name:?}")))?
                .config(geometry, &settings),
            None => cfg.model,
        };
        vec![audit(&model_cfg).map_err(|e| Failure::config(e.to_string()))?]
    };
    if let Some(r) = reports.first() {
        eprintln!("pretrained model parameters: {}", r.total_model);
    }
    for r in &reports {
        println!("{r}");
    }
    Ok(())
}

fn gradcheck(seed: u64, op: Option<&str>, trials: usize, inject_fault: bool) -> Outcome {
    let options = GradCheckOptions {
        trials,
        inject_fault,
        ..GradCheckOptions::default()
    };
    let rows = run_gradcheck(seed, op, &options).map_err(|e| Failure::config(e.to_string()))?;
    let mut failed = Vec::new();
    for r in &rows {
        let ok = r.passes(options.tol);
        println!(
            "op={} trials={} max_rel_err={} status={}",
            r.op,
            r.trials,
            fmt_sig(r.worst.max_rel_err),
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            eprintln!(
                "{}: worst element {} of {} in trial {}: analytic={} numeric={}",
                r.op,
                r.worst.worst_index,
                r.worst_input,
                r.worst_trial,
                fmt_sig(r.worst.analytic),
                fmt_sig(r.worst.numeric)
            );
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::check(format!(
            "gradient check failed (tolerance {}) for: {}",
            fmt_sig(GRAD_TOL),
            failed.join(", ")
        )))
    }
}

fn materialize_check(trials: usize, seed: u64) -> Outcome {
    let r = run_materialize_check(seed, trials).map_err(|e| Failure::config(e.to_string()))?;
    let ok = r.passes(MATERIALIZE_TOL);
    println!(
        "trials={} apply_max_rel_err={} weight_max_rel_err={} lowrank_max_rel_err={} status={}",
        r.trials,
        fmt_sig(r.apply_max_rel_err),
        fmt_sig(r.weight_max_rel_err),
        fmt_sig(r.lowrank_max_rel_err),
        if ok { "pass" } else { "FAIL" }
    );
    if ok {
        Ok(())
    } else {
        Err(Failure::check(format!("materialization check failed, worst at {}", r.worst)))
    }
}

fn train(config: &Path, out: &Path) -> Outcome {
    let cfg = load_config(config)?;
    fs::create_dir_all(out).map_err(|e| Failure::io(format!("cannot create {}: {e}", out.display())))?;
    // fail on an unwritable directory before spending time on training
    write_file(&out.join(CONFIG_FILE), cfg.to_record().to_string().as_bytes())?;
    let outcome = run_training_with(&cfg, |step, loss| eprintln!("step={step} loss={}", fmt_sig(loss)))?;
    write_file(&out.join(CHECKPOINT_FILE), &save_checkpoint(&outcome.model))?;
    let report = outcome.report.to_record().to_string();
    write_file(&out.join(REPORT_FILE), report.as_bytes())?;
    let r = &outcome.report;
    println!(
        "method={} task={} seed={} steps={} best_step={} validation_accuracy={} test_accuracy={} trainable={} total={} trained_fraction={}",
        r.method,
        r.task,
        r.seed,
        r.steps,
        r.best_step,
        fmt_sig(r.validation_accuracy),
        fmt_sig(r.test_accuracy),
        r.trainable,
        r.total,
        fmt_sig(r.trained_fraction)
    );
    Ok(())
}

fn eval(config: &Path, checkpoint: &Path) -> Outcome {
    let cfg = load_config(config)?;
    let bytes = fs::read(checkpoint).map_err(|e| Failure::io(format!("cannot read {}: {e}", checkpoint.display())))?;
    let mut model = TransformerModel::build(&cfg.model, cfg.seed).map_err(|e| Failure::config(e.to_string()))?;
    load_checkpoint(&bytes, &mut model).map_err(|e| Failure::io(format!("{}: {e}", checkpoint.display())))?;
    let splits = prepare_data(&cfg)?;
    println!(
        "validation_accuracy={} test_accuracy={}",
        fmt_sig(accuracy(&model, &splits.validation)?),
        fmt_sig(accuracy(&model, &splits.test)?)
    );
    Ok(())
}

fn bench(config: &Path, steps: usize) -> Outcome {
    let cfg = load_config(config)?;
    let settings = BenchSettings {
        steps,
        batch_size: cfg.schedule.batch_size,
        seed: cfg.seed,
    };
    let rows = run_bench(cfg.model.geometry, &method_settings(&cfg), &cfg.task.task, cfg.optim, &settings)?;
    println!("# desk-scale micro-benchmark; timings are machine-dependent and not comparable to accelerator-scale measurements");
    let mut materialized = Vec::new();
    for r in &rows {
        println!(
            "method={} trainable={} steps={} seconds={} steps_per_sec={} step_alloc_bytes={} largest_alloc_bytes={} materializes_weight={}",
            r.method,
            r.trainable,
            r.steps,
            fmt_sig(r.seconds),
            fmt_sig(r.steps_per_sec),
            r.step_alloc_bytes,
            r.largest_alloc_bytes,
            r.materializes_weight
        );
        if r.materializes_weight && r.method.starts_with("compacter") {
            materialized.push(r.method.clone());
        }
    }
    if materialized.is_empty() {
        Ok(())
    } else {
        Err(Failure::check(format!("full adapter weights were allocated by: {}", materialized.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::CountParams {
            config,
            method,
            all_methods,
        } => count_params(config, method.as_deref(), *all_methods),
        Command::Gradcheck {
            seed,
            op,
            trials,
            inject_fault,
        } => gradcheck(*seed, op.as_deref(), *trials, *inject_fault),
        Command::MaterializeCheck { trials, seed } => materialize_check(*trials, *seed),
        Command::Train { config, out } => train(config, out),
        Command::Eval { config, checkpoint } => eval(config, checkpoint),
        Command::Bench { config, steps } => bench(config, *steps),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
