//! Desk-scale throughput and allocation micro-benchmark.
//!
//! Timings depend on the machine; allocation counts come from the tensor
//! probe and are deterministic. Neither is comparable to accelerator-scale
//! training measurements.

use std::time::Instant;

use crate::linalg::{probe, Tensor2};
use crate::model::{ModelGeometry, TransformerModel};
use crate::parambudget::{Method, MethodSettings};
use crate::rng::{substream, Stream};
use crate::train::{adamw_step, loss_and_grads, AdamWConfig, Example, OptimState, SyntheticTask, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub trainable: usize,
    pub steps: usize,
    pub seconds: f64,
    pub steps_per_sec: f64,
    /// Bytes of tensor buffers allocated by one training step, an upper bound
    /// on its peak.
    pub step_alloc_bytes: usize,
    pub largest_alloc_bytes: usize,
    /// Whether applying the first adapter allocated a `k x d` or `d x k`
    /// buffer. Always false without adapters.
    pub materializes_weight: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// One row per [`Method`], in [`Method::ALL`] order.
pub fn run_bench(
    geometry: ModelGeometry,
    methods: &MethodSettings,
    task: &SyntheticTask,
    optim: AdamWConfig,
    settings: &BenchSettings,
) -> Result<Vec<BenchRow>, TrainError> {
    task.validate()?;
    let data = task.generate(settings.batch_size, &mut substream(settings.seed, Stream::Data, 0));
    let batch: Vec<&Example> = data.examples.iter().collect();
    let k = geometry.hidden;
    let mut rows = Vec::new();
    for method in Method::ALL {
        let cfg = method.config(geometry, methods);
        let mut model = TransformerModel::build(&cfg, settings.seed)?;

        let materializes_weight = match model.encoder_adapters().first() {
            Some(adapter) => {
                let d = adapter.down.output;
                // row count chosen to avoid colliding with k or d
                let rows = (1..).find(|r| *r != k && *r != d).unwrap();
                let x = Tensor2::filled(rows, k, 0.5);
                let (out, stats) = probe::track(|| adapter.apply(model.store(), &x));
                out.map_err(crate::model::ModelError::from)?;
                stats.saw_shape(k, d) || stats.saw_shape(d, k)
            }
            None => false,
        };

        let mut state = OptimState::new(optim);
        let (step, stats) = probe::track(|| loss_and_grads(&model, &batch));
        let (_, grads) = step?;
        adamw_step(model.store_mut(), &grads, &mut state)?;

        let start = Instant::now();
        for _ in 0..settings.steps {
            let (_, grads) = loss_and_grads(&model, &batch)?;
            adamw_step(model.store_mut(), &grads, &mut state)?;
        }
        let seconds = start.elapsed().as_secs_f64();
        rows.push(BenchRow {
            method: method.name().to_string(),
            trainable: model.num_trainable(),
            steps: settings.steps,
            seconds,
            steps_per_sec: if seconds > 0.0 { settings.steps as f64 / seconds } else { f64::INFINITY },
            step_alloc_bytes: stats.total_bytes,
            largest_alloc_bytes: stats.largest_bytes,
            materializes_weight,
        });
    }
    Ok(rows)
}
