use std::fmt;
use std::str::FromStr;

use super::{Record, RecordError, Section};
use crate::layers::{AdapterKind, AdapterSpec, Placement};
use crate::model::{ModelConfig, ModelGeometry, TrainMode};
use crate::train::{AdamWConfig, SyntheticTask, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Validation accuracy is measured every this many steps and at the end.
    pub eval_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 32,
            eval_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskConfig {
    pub task: SyntheticTask,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    /// Low-resource mode: train on a stratified subsample of this size.
    pub subsample_size: Option<usize>,
}

/// Everything a training or budgeting run needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: AdamWConfig,
    pub schedule: ScheduleConfig,
    pub task: TaskConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    /// Toy geometry, Compacter adapters (d=4, n=2, r=1, both positions),
    /// parity over 6 binary tokens.
    fn default() -> Self {
        let geometry = ModelGeometry::toy();
        Self {
            model: ModelConfig::new(geometry, Some(AdapterSpec::new(AdapterKind::Compacter, 4, 2))),
            optim: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
            task: TaskConfig {
                task: SyntheticTask {
                    kind: TaskKind::Parity,
                    symbols: 2,
                    seq_len: 6,
                    classes: geometry.classes,
                },
                train_size: 2000,
                validation_size: 500,
                test_size: 1000,
                subsample_size: None,
            },
            seed: 0,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "preset",
    "enc_layers",
    "dec_layers",
    "hidden",
    "ffn",
    "heads",
    "vocab",
    "max_seq",
    "rel_buckets",
    "linear_bias",
    "ln_bias",
    "tie_head",
    "classes",
    "sinusoidal",
];
const ADAPTER_KEYS: &[&str] = &["kind", "bottleneck", "division", "rank", "placement", "drop_first_m"];
const TRAIN_KEYS: &[&str] = &[
    "mode",
    "lr",
    "warmup_steps",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "steps",
    "batch_size",
    "eval_every",
];
const TASK_KEYS: &[&str] = &[
    "kind",
    "symbols",
    "seq_len",
    "train_size",
    "validation_size",
    "test_size",
    "subsample_size",
];
const RUN_KEYS: &[&str] = &["seed"];

fn known_keys(section: &str) -> Option<&'static [&'static str]> {
    Some(match section {
        "model" => MODEL_KEYS,
        "adapter" => ADAPTER_KEYS,
        "train" => TRAIN_KEYS,
        "task" => TASK_KEYS,
        "run" => RUN_KEYS,
        _ => return None,
    })
}

/// Reads optional typed keys from one section.
struct Reader<'a> {
    section: Option<&'a Section>,
}

impl Reader<'_> {
    fn opt<T: FromStr>(&self, key: &str, target: &mut T) -> Result<(), RecordError>
    where
        T::Err: fmt::Display,
    {
        if let Some(s) = self.section {
            if s.value(key).is_some() {
                *target = s.get(key)?;
            }
        }
        Ok(())
    }

    fn named<T>(&self, key: &str, target: &mut T, parse: impl Fn(&str) -> Option<T>, choices: &str) -> Result<(), RecordError> {
        if let Some(s) = self.section {
            if let Some(v) = s.value(key) {
                *target = parse(v).ok_or_else(|| s.error(key, format!("unknown value {v:?}, expected one of {choices}")))?;
            }
        }
        Ok(())
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.section.and_then(|s| s.line_of(key))
    }
}

/// Parses and validates a run config. Missing keys take the values of
/// [`RunConfig::default`]; `[model] preset` (`toy` or `t5-base`) replaces
/// the default geometry before individual keys apply.
pub fn parse_config(text: &str) -> Result<RunConfig, RecordError> {
    let rec = Record::parse(text)?;
    for s in &rec.sections {
        let keys = known_keys(&s.name).ok_or_else(|| RecordError::new(Some(s.line), format!("unknown section [{}]", s.name)))?;
        if let Some(e) = s.entries.iter().find(|e| !keys.contains(&e.key.as_str())) {
            return Err(RecordError::new(Some(e.line), format!("unknown key {:?} in [{}]", e.key, s.name)));
        }
    }
    let reader = |name| Reader {
        section: rec.get_section(name),
    };
    let (model, adapter, train, task, run) = (reader("model"), reader("adapter"), reader("train"), reader("task"), reader("run"));
    let mut cfg = RunConfig::default();

    let mut g = cfg.model.geometry;
    model.named(
        "preset",
        &mut g,
        |v| match v {
            "toy" => Some(ModelGeometry::toy()),
            "t5-base" => Some(ModelGeometry::t5_base()),
            _ => None,
        },
        "toy, t5-base",
    )?;
    model.opt("enc_layers", &mut g.enc_layers)?;
    model.opt("dec_layers", &mut g.dec_layers)?;
    model.opt("hidden", &mut g.hidden)?;
    model.opt("ffn", &mut g.ffn)?;
    model.opt("heads", &mut g.heads)?;
    model.opt("vocab", &mut g.vocab)?;
    model.opt("max_seq", &mut g.max_seq)?;
    model.opt("rel_buckets", &mut g.rel_buckets)?;
    model.opt("linear_bias", &mut g.linear_bias)?;
    model.opt("ln_bias", &mut g.ln_bias)?;
    model.opt("tie_head", &mut g.tie_head)?;
    model.opt("classes", &mut g.classes)?;
    model.opt("sinusoidal", &mut g.sinusoidal)?;
    g.validate()
        .map_err(|e| RecordError::new(model.line("hidden").or(model.line("heads")), e.to_string()))?;

    let mut spec = cfg.model.adapter.expect("default has adapters");
    let mut kind: Option<AdapterKind> = Some(spec.kind);
    adapter.named(
        "kind",
        &mut kind,
        |v| if v == "none" { Some(None) } else { AdapterKind::parse(v).map(Some) },
        "none, dense, lowrank, phm, compacter",
    )?;
    adapter.opt("bottleneck", &mut spec.bottleneck)?;
    adapter.opt("division", &mut spec.division)?;
    adapter.opt("rank", &mut spec.rank)?;
    adapter.named("placement", &mut spec.placement, Placement::parse, "after_attn_and_ffn, after_ffn_only, after_attn_only")?;
    adapter.opt("drop_first_m", &mut spec.drop_first_m)?;

    let mut mode = TrainMode::Standard;
    train.named("mode", &mut mode, TrainMode::parse, "standard, bitfit")?;
    let o = &mut cfg.optim;
    train.opt("lr", &mut o.lr)?;
    train.opt("warmup_steps", &mut o.warmup_steps)?;
    train.opt("weight_decay", &mut o.weight_decay)?;
    train.opt("beta1", &mut o.beta1)?;
    train.opt("beta2", &mut o.beta2)?;
    train.opt("eps", &mut o.eps)?;
    train.opt("steps", &mut cfg.schedule.steps)?;
    train.opt("batch_size", &mut cfg.schedule.batch_size)?;
    train.opt("eval_every", &mut cfg.schedule.eval_every)?;

    let t = &mut cfg.task;
    task.named("kind", &mut t.task.kind, TaskKind::parse, "parity, copy-class, majority")?;
    task.opt("symbols", &mut t.task.symbols)?;
    task.opt("seq_len", &mut t.task.seq_len)?;
    task.opt("train_size", &mut t.train_size)?;
    task.opt("validation_size", &mut t.validation_size)?;
    task.opt("test_size", &mut t.test_size)?;
    let mut sub = 0usize;
    task.opt("subsample_size", &mut sub)?;
    t.subsample_size = (sub > 0).then_some(sub);
    t.task.classes = g.classes;
    run.opt("seed", &mut cfg.seed)?;

    spec.kind = kind.unwrap_or(spec.kind);
    cfg.model = ModelConfig {
        geometry: g,
        adapter: kind.map(|_| spec),
        mode,
    };
    validate(&cfg, &adapter, &train, &task)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig, adapter: &Reader, train: &Reader, task: &Reader) -> Result<(), RecordError> {
    use crate::layers::LayerError;
    use crate::model::ModelError;

    if let Err(e) = cfg.model.validate() {
        let line = match &e {
            ModelError::Layer(LayerError::Divisibility { .. }) => adapter.line("division").or(adapter.line("bottleneck")),
            ModelError::Layer(LayerError::Rank { .. }) => adapter.line("rank"),
            ModelError::Config(_) if cfg.model.mode == TrainMode::BitFit => train.line("mode"),
            ModelError::Config(_) => adapter.line("drop_first_m"),
            _ => None,
        };
        return Err(RecordError::new(line, e.to_string()));
    }
    let o = &cfg.optim;
    let checks = [
        (o.lr.is_finite() && o.lr >= 0.0, train.line("lr"), "lr must be finite and non-negative"),
        ((0.0..1.0).contains(&o.beta1), train.line("beta1"), "beta1 must be in [0, 1)"),
        ((0.0..1.0).contains(&o.beta2), train.line("beta2"), "beta2 must be in [0, 1)"),
        (o.eps.is_finite() && o.eps >= 0.0, train.line("eps"), "eps must be finite and non-negative"),
        (
            o.weight_decay.is_finite() && o.weight_decay >= 0.0,
            train.line("weight_decay"),
            "weight_decay must be finite and non-negative",
        ),
        (cfg.schedule.batch_size >= 1, train.line("batch_size"), "batch_size must be at least 1"),
    ];
    if let Some((_, line, msg)) = checks.iter().find(|(ok, _, _)| !ok) {
        return Err(RecordError::new(*line, *msg));
    }

    let t = &cfg.task;
    let g = &cfg.model.geometry;
    t.task
        .validate()
        .map_err(|e| RecordError::new(task.line("kind").or(task.line("symbols")), e.to_string()))?;
    if t.task.symbols > g.vocab {
        return Err(RecordError::new(
            task.line("symbols"),
            format!("symbols={} exceeds vocab={}", t.task.symbols, g.vocab),
        ));
    }
    if t.task.seq_len > g.max_seq {
        return Err(RecordError::new(
            task.line("seq_len"),
            format!("seq_len={} exceeds max_seq={}", t.task.seq_len, g.max_seq),
        ));
    }
    if let Some(s) = t.subsample_size {
        if s > t.train_size {
            return Err(RecordError::new(
                task.line("subsample_size"),
                format!("subsample_size={s} exceeds train_size={}", t.train_size),
            ));
        }
    }
    Ok(())
}

impl RunConfig {
    /// Text form accepted by [`parse_config`]; every key is written.
    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        let g = &self.model.geometry;
        r.section("model")
            .set("enc_layers", g.enc_layers)
            .set("dec_layers", g.dec_layers)
            .set("hidden", g.hidden)
            .set("ffn", g.ffn)
            .set("heads", g.heads)
            .set("vocab", g.vocab)
            .set("max_seq", g.max_seq)
            .set("rel_buckets", g.rel_buckets)
            .set("linear_bias", g.linear_bias)
            .set("ln_bias", g.ln_bias)
            .set("tie_head", g.tie_head)
            .set("classes", g.classes)
            .set("sinusoidal", g.sinusoidal);
        let spec = self
            .model
            .adapter
            .unwrap_or_else(|| RunConfig::default().model.adapter.expect("default has adapters"));
        r.section("adapter")
            .set("kind", self.model.adapter.map_or("none", |s| s.kind.name()))
            .set("bottleneck", spec.bottleneck)
            .set("division", spec.division)
            .set("rank", spec.rank)
            .set("placement", spec.placement.name())
            .set("drop_first_m", spec.drop_first_m);
        let o = &self.optim;
        r.section("train")
            .set("mode", self.model.mode.name())
            .set("lr", o.lr)
            .set("warmup_steps", o.warmup_steps)
            .set("weight_decay", o.weight_decay)
            .set("beta1", o.beta1)
            .set("beta2", o.beta2)
            .set("eps", o.eps)
            .set("steps", self.schedule.steps)
            .set("batch_size", self.schedule.batch_size)
            .set("eval_every", self.schedule.eval_every);
        let t = &self.task;
        r.section("task")
            .set("kind", t.task.kind.name())
            .set("symbols", t.task.symbols)
            .set("seq_len", t.task.seq_len)
            .set("train_size", t.train_size)
            .set("validation_size", t.validation_size)
            .set("test_size", t.test_size)
            .set("subsample_size", t.subsample_size.unwrap_or(0));
        r.section("run").set("seed", self.seed);
        r
    }
}
