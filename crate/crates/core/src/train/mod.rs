//! Deterministic fine-tuning on synthetic classification tasks.

mod data;
mod optim;

use thiserror::Error;

use crate::grad::Tape;
use crate::io::{Record, RecordError, RunConfig};
use crate::linalg::Tensor2;
use crate::model::{ModelError, TransformerModel};
use crate::params::{ParamBinding, ParamId};

pub use data::{subsample, subsample_indices, Batcher, Dataset, Example, Splits, SyntheticTask, TaskKind, SUBSAMPLE_SIZES};
pub use optim::{adamw_step, AdamWConfig, OptimState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("non-finite gradient for {path} (element {index}) at step {step}")]
    NonFinite { path: String, index: usize, step: u64 },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("gradient shape {grad:?} does not match {path} {param:?}")]
    Shape {
        path: String,
        param: (usize, usize),
        grad: (usize, usize),
    },
    #[error("subsample size {size} exceeds the {available} available examples")]
    SubsampleTooLarge { size: usize, available: usize },
    #[error("invalid task: {0}")]
    Task(String),
    #[error("empty dataset: {0}")]
    EmptyData(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::grad::GradError> for TrainError {
    fn from(e: crate::grad::GradError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Examples per forward pass during evaluation.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub steps: usize,
    pub train_examples: usize,
    /// Training loss at each step, before that step's update.
    pub losses: Vec<f64>,
    /// Step count after which the best validation accuracy was reached.
    pub best_step: usize,
    pub validation_accuracy: f64,
    /// Test accuracy of the best checkpoint.
    pub test_accuracy: f64,
    pub trainable: usize,
    pub total: usize,
    pub trained_fraction: f64,
}

impl TrainReport {
    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        let losses: Vec<String> = self.losses.iter().map(f64::to_string).collect();
        r.section("report")
            .set("method", &self.method)
            .set("task", &self.task)
            .set("seed", self.seed)
            .set("steps", self.steps)
            .set("train_examples", self.train_examples)
            .set("best_step", self.best_step)
            .set("validation_accuracy", self.validation_accuracy)
            .set("test_accuracy", self.test_accuracy)
            .set("trainable", self.trainable)
            .set("total", self.total)
            .set("trained_fraction", self.trained_fraction)
            .set("losses", losses.join(","));
        r
    }

    pub fn from_record(rec: &Record) -> std::result::Result<Self, RecordError> {
        let s = rec.require_section("report")?;
        let losses = s.get_str("losses")?;
        let losses = if losses.is_empty() {
            Vec::new()
        } else {
            losses
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|e| s.error("losses", e.to_string())))
                .collect::<std::result::Result<_, _>>()?
        };
        Ok(Self {
            method: s.get_str("method")?.to_string(),
            task: s.get_str("task")?.to_string(),
            seed: s.get("seed")?,
            steps: s.get("steps")?,
            train_examples: s.get("train_examples")?,
            losses,
            best_step: s.get("best_step")?,
            validation_accuracy: s.get("validation_accuracy")?,
            test_accuracy: s.get("test_accuracy")?,
            trainable: s.get("trainable")?,
            total: s.get("total")?,
            trained_fraction: s.get("trained_fraction")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    /// Model with the best validation checkpoint restored.
    pub model: TransformerModel,
}

/// Dataset splits for a run, with low-resource subsampling applied to the
/// training split.
pub fn prepare_data(cfg: &RunConfig) -> Result<Splits> {
    let t = &cfg.task;
    t.task.validate()?;
    let mut splits = t.task.splits([t.train_size, t.validation_size, t.test_size], cfg.seed);
    if let Some(size) = t.subsample_size {
        splits.train = subsample(&splits.train, size, cfg.seed)?;
    }
    if splits.train.is_empty() {
        return Err(TrainError::EmptyData("train"));
    }
    if splits.validation.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    if splits.test.is_empty() {
        return Err(TrainError::EmptyData("test"));
    }
    Ok(splits)
}

pub fn accuracy(model: &TransformerModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::EmptyData("evaluation"));
    }
    let mut correct = 0usize;
    for chunk in data.examples.chunks(EVAL_BATCH) {
        let tokens: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let logits = model.forward(&tokens)?;
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(i, e)| argmax(logits.row(*i)) == e.label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss and trainable-parameter gradients for one batch.
pub fn loss_and_grads(model: &TransformerModel, batch: &[&Example]) -> Result<(f64, Vec<(ParamId, Tensor2)>)> {
    let tokens: Vec<Vec<usize>> = batch.iter().map(|e| e.tokens.clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let mut tape = Tape::new();
    let mut bind = ParamBinding::new();
    let logits = model.forward_tape(model.store(), &mut tape, &mut bind, &tokens)?;
    let loss = tape.cross_entropy(logits, &labels)?;
    let grads = tape.backward(loss)?;
    let out = model
        .trainable_ids()
        .into_iter()
        .map(|id| {
            let g = match bind.get(id) {
                Some(v) => grads.get_or_zeros(&tape, v),
                None => {
                    let (r, c) = model.store().value(id).shape();
                    Tensor2::zeros(r, c)
                }
            };
            (id, g)
        })
        .collect();
    Ok((tape.scalar(loss), out))
}

pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome> {
    run_training_with(cfg, |_, _| {})
}

/// Trains per `cfg`, calling `on_step(step, loss)` after every step.
pub fn run_training_with(cfg: &RunConfig, mut on_step: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    let splits = prepare_data(cfg)?;
    let mut model = TransformerModel::build(&cfg.model, cfg.seed)?;
    let ids = model.trainable_ids();
    let mut state = OptimState::new(cfg.optim);
    let mut batcher = Batcher::new(splits.train.len(), cfg.schedule.batch_size, cfg.seed);
    let eval_every = cfg.schedule.eval_every.max(1);

    let snapshot = |m: &TransformerModel| -> Vec<Tensor2> { ids.iter().map(|&id| m.store().value(id).clone()).collect() };
    let mut best_acc = accuracy(&model, &splits.validation)?;
    let mut best_step = 0;
    let mut best_values = snapshot(&model);

    let mut losses = Vec::with_capacity(cfg.schedule.steps);
    for step in 1..=cfg.schedule.steps {
        let batch: Vec<&Example> = batcher
            .next_batch()
            .iter()
            .map(|&i| &splits.train.examples[i])
            .collect();
        let (loss, grads) = loss_and_grads(&model, &batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: step as u64 });
        }
        adamw_step(model.store_mut(), &grads, &mut state)?;
        losses.push(loss);
        on_step(step, loss);

        if step % eval_every == 0 || step == cfg.schedule.steps {
            let acc = accuracy(&model, &splits.validation)?;
            if acc > best_acc {
                best_acc = acc;
                best_step = step;
                best_values = snapshot(&model);
            }
        }
    }

    for (&id, v) in ids.iter().zip(best_values) {
        *model.store_mut().value_mut(id) = v;
    }
    let test_accuracy = accuracy(&model, &splits.test)?;
    let (trainable, total) = (model.num_trainable(), model.num_params());
    let report = TrainReport {
        method: cfg.model.method_name(),
        task: cfg.task.task.kind.name().to_string(),
        seed: cfg.seed,
        steps: cfg.schedule.steps,
        train_examples: splits.train.len(),
        losses,
        best_step,
        validation_accuracy: best_acc,
        test_accuracy,
        trainable,
        total,
        trained_fraction: trainable as f64 / total as f64,
    };
    Ok(TrainOutcome { report, model })
}

/// Accuracies of one training-set size across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub size: usize,
    pub steps: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Steps for `epochs` passes over `size` examples, at least one.
pub fn epoch_steps(size: usize, batch_size: usize, epochs: usize) -> usize {
    (epochs * size / batch_size.max(1)).max(1)
}

/// Low-resource sweep: for each size, trains on a stratified subsample of the
/// training split for `epochs` epochs with seeds `0..seeds` and reports the
/// test accuracy of the best validation checkpoint. Every subsample is drawn
/// from one pool at least as large as the biggest size. `on_run` sees every run.
pub fn low_resource_sweep(
    cfg: &RunConfig,
    sizes: &[usize],
    seeds: u64,
    epochs: usize,
    mut on_run: impl FnMut(usize, u64, &TrainReport),
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(sizes.len());
    let pool = sizes.iter().copied().fold(cfg.task.train_size, usize::max);
    for &size in sizes {
        let mut run = cfg.clone();
        run.task.train_size = pool;
        run.task.subsample_size = Some(size);
        run.schedule.steps = epoch_steps(size, run.schedule.batch_size.min(size), epochs);
        run.schedule.batch_size = run.schedule.batch_size.min(size);
        let mut accuracies = Vec::with_capacity(seeds as usize);
        for seed in 0..seeds {
            run.seed = seed;
            let out = run_training(&run)?;
            on_run(size, seed, &out.report);
            accuracies.push(out.report.test_accuracy);
        }
        let (mean, std) = mean_std(&accuracies);
        points.push(SweepPoint {
            size,
            steps: run.schedule.steps,
            accuracies,
            mean,
            std,
        });
    }
    Ok(points)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
