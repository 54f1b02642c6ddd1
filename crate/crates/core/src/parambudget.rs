//! Trainable-parameter budgets: closed forms, traversal counts and fractions.
//!
//! Counts come from [`plan`], so auditing a T5-base sized model allocates no
//! weights. The closed forms count adapter weight matrices only. Our
//! convention evaluates them as `instances × per-adapter + shared`, where
//! instances are counted by traversal; the textbook totals use `L` for the
//! number of transformer layers across both stacks and are reported
//! alongside as `literal`.

use std::fmt;

use thiserror::Error;

use crate::io::{fmt_sig, Record};
use crate::layers::{AdapterKind, AdapterSpec, Placement};
use crate::model::{plan, ModelConfig, ModelError, ModelGeometry, TrainMode};
use crate::params::{ParamLayout, ParamRole};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("dimensions k={k}, d={d} are not divisible by n={n}")]
    Division { k: usize, d: usize, n: usize },
    #[error("dimensions must be positive")]
    Zero,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, BudgetError>;

/// A whole-model total and the cost of one adapter (down plus up projection).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClosedForm {
    pub total: usize,
    pub per_adapter: usize,
}

fn check(k: usize, d: usize, n: usize) -> Result<()> {
    if k == 0 || d == 0 || n == 0 {
        return Err(BudgetError::Zero);
    }
    if k % n != 0 || d % n != 0 {
        return Err(BudgetError::Division { k, d, n });
    }
    Ok(())
}

/// `2L(2kd)`; per adapter `2kd`.
pub fn closed_form_adapter(layers: usize, k: usize, d: usize) -> ClosedForm {
    ClosedForm {
        total: 2 * layers * (2 * k * d),
        per_adapter: 2 * k * d,
    }
}

/// `4L(kd/n + n³)`; per adapter `2(kd/n + n³)`.
pub fn closed_form_phm(layers: usize, k: usize, d: usize, n: usize) -> Result<ClosedForm> {
    check(k, d, n)?;
    let per_adapter = 2 * (k * d / n + n.pow(3));
    Ok(ClosedForm {
        total: 2 * layers * per_adapter,
        per_adapter,
    })
}

/// `4L(k+d) + n³`; per adapter `2(k+d)`, the shared `n³` counted once.
pub fn closed_form_compacter(layers: usize, k: usize, d: usize, n: usize) -> Result<ClosedForm> {
    check(k, d, n)?;
    Ok(ClosedForm {
        total: 4 * layers * (k + d) + n.pow(3),
        per_adapter: 2 * (k + d),
    })
}

/// One adapter per layer: `2L(k+d) + n³`.
pub fn closed_form_compacter_pp(layers: usize, k: usize, d: usize, n: usize) -> Result<ClosedForm> {
    check(k, d, n)?;
    Ok(ClosedForm {
        total: 2 * layers * (k + d) + n.pow(3),
        per_adapter: 2 * (k + d),
    })
}

/// Whether `kd/n` dominates the PHM cost.
pub fn kd_exceeds_n4(k: usize, d: usize, n: usize) -> bool {
    (k * d) as u128 > (n as u128).pow(4)
}

/// Adapter weight scalars of one adapter, excluding biases and the shared set.
pub fn per_adapter_weights(spec: &AdapterSpec, k: usize) -> Result<usize> {
    let (d, n, r) = (spec.bottleneck, spec.division, spec.rank);
    Ok(match spec.kind {
        AdapterKind::Dense => closed_form_adapter(1, k, d).per_adapter,
        AdapterKind::LowRank => 2 * r * (k + d),
        AdapterKind::Phm => closed_form_phm(1, k, d, n)?.per_adapter,
        AdapterKind::Compacter => {
            check(k, d, n)?;
            2 * r * (k + d)
        }
    })
}

/// Fine-tuning methods compared in the budget table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Adapter,
    Pfeiffer,
    AdapterDrop,
    LowRank,
    Phm,
    Compacter,
    CompacterPp,
    BitFit,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Self::Adapter,
        Self::Pfeiffer,
        Self::AdapterDrop,
        Self::LowRank,
        Self::Phm,
        Self::Compacter,
        Self::CompacterPp,
        Self::BitFit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Adapter => "adapter",
            Self::Pfeiffer => "pfeiffer",
            Self::AdapterDrop => "adapterdrop",
            Self::LowRank => "lowrank",
            Self::Phm => "phm",
            Self::Compacter => "compacter",
            Self::CompacterPp => "compacter++",
            Self::BitFit => "bitfit",
        }
    }

    /// Accepts `dense` as an alias of `adapter`.
    pub fn parse(s: &str) -> Option<Self> {
        if s == "dense" {
            return Some(Self::Adapter);
        }
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Config for this method. `drop_first_m` applies to AdapterDrop only and
    /// `division` to the Kronecker methods only.
    pub fn config(self, geometry: ModelGeometry, settings: &MethodSettings) -> ModelConfig {
        let dense = AdapterSpec::new(AdapterKind::Dense, settings.bottleneck, 1);
        let spec = match self {
            Self::Adapter => dense,
            Self::Pfeiffer => dense.with_placement(Placement::AfterFfnOnly),
            Self::AdapterDrop => dense.with_drop_first(settings.drop_first_m),
            Self::LowRank => AdapterSpec::new(AdapterKind::LowRank, settings.bottleneck, 1).with_rank(settings.rank),
            Self::Phm => AdapterSpec::new(AdapterKind::Phm, settings.bottleneck, settings.division),
            Self::Compacter => AdapterSpec::new(AdapterKind::Compacter, settings.bottleneck, settings.division).with_rank(settings.rank),
            Self::CompacterPp => AdapterSpec::new(AdapterKind::Compacter, settings.bottleneck, settings.division)
                .with_rank(settings.rank)
                .with_placement(Placement::AfterFfnOnly),
            Self::BitFit => return ModelConfig::bitfit(geometry),
        };
        ModelConfig::new(geometry, Some(spec))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodSettings {
    pub bottleneck: usize,
    pub division: usize,
    pub rank: usize,
    pub drop_first_m: usize,
}

impl Default for MethodSettings {
    /// Bottleneck 24, n = 4, rank one, adapters dropped from the first 5 layers.
    fn default() -> Self {
        Self {
            bottleneck: 24,
            division: 4,
            rank: 1,
            drop_first_m: 5,
        }
    }
}

/// Shares of the counted trainable parameters; they sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakdown {
    pub layer_norm_share: f64,
    pub bias_share: f64,
    pub weight_share: f64,
    /// Layer-norm share without the final norm of each stack.
    pub block_layer_norm_share: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBudgetReport {
    pub method: String,
    /// Trainable scalars by traversal, biases and layer norms included.
    pub counted_trainable: usize,
    /// Trainable adapter weight scalars by traversal: no biases, no norms.
    pub adapter_weights: usize,
    /// `instances × per-adapter + shared`, 0 without adapters.
    pub closed_form: usize,
    /// Textbook total with `L` = encoder plus decoder layers, when one exists
    /// for this method.
    pub literal: Option<usize>,
    pub instances: usize,
    pub layer_norm: usize,
    pub block_layer_norm: usize,
    pub bias: usize,
    /// Pretrained model: configured geometry without adapters or the biases
    /// BitFit adds. Fractions use this denominator.
    pub total_model: usize,
    /// Model as built, added parameters included.
    pub built_total: usize,
    pub fraction_counted: f64,
    pub fraction_closed_form: f64,
    pub breakdown: Breakdown,
}

impl ParamBudgetReport {
    pub fn diverges(&self) -> bool {
        self.literal.is_some_and(|l| l != self.closed_form)
    }

    pub fn to_record(&self) -> Record {
        let mut r = Record::new();
        let b = &self.breakdown;
        let s = r.section("budget");
        s.set("method", &self.method)
            .set("counted_trainable", self.counted_trainable)
            .set("adapter_weights", self.adapter_weights)
            .set("closed_form", self.closed_form)
            .set("literal", self.literal.map_or("none".to_string(), |l| l.to_string()))
            .set("literal_diverges", self.diverges())
            .set("instances", self.instances)
            .set("total_model", self.total_model)
            .set("built_total", self.built_total)
            .set("fraction_counted", fmt_sig(self.fraction_counted))
            .set("fraction_closed_form", fmt_sig(self.fraction_closed_form))
            .set("layer_norm_share", fmt_sig(b.layer_norm_share))
            .set("bias_share", fmt_sig(b.bias_share))
            .set("weight_share", fmt_sig(b.weight_share))
            .set("block_layer_norm_share", fmt_sig(b.block_layer_norm_share));
        r
    }
}

/// Percent with three decimals, the precision of published budget tables.
pub fn percent3(fraction: f64) -> String {
    format!("{:.3}%", 100.0 * fraction)
}

impl fmt::Display for ParamBudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "method={} counted_trainable={} closed_form={} total_model={} built_total={} fraction_counted={} fraction_counted_exact={}% fraction_closed_form={}% adapter_weights={} instances={} literal={} literal_diverges={} layer_norm_share={} block_layer_norm_share={} bias_share={} weight_share={}",
            self.method,
            self.counted_trainable,
            self.closed_form,
            self.total_model,
            self.built_total,
            percent3(self.fraction_counted),
            fmt_sig(100.0 * self.fraction_counted),
            fmt_sig(100.0 * self.fraction_closed_form),
            self.adapter_weights,
            self.instances,
            self.literal.map_or("none".to_string(), |l| l.to_string()),
            self.diverges(),
            fmt_sig(self.breakdown.layer_norm_share),
            fmt_sig(self.breakdown.block_layer_norm_share),
            fmt_sig(self.breakdown.bias_share),
            fmt_sig(self.breakdown.weight_share),
        )
    }
}

fn total(layout: &ParamLayout) -> usize {
    layout.specs.iter().map(|s| s.numel()).sum()
}

/// Adapter instances, recovered from the declared down projections.
fn count_instances(layout: &ParamLayout) -> usize {
    layout
        .specs
        .iter()
        .filter(|s| s.role == ParamRole::AdapterBias && s.path.ends_with(".down.bias"))
        .count()
}

fn literal(cfg: &ModelConfig) -> Option<usize> {
    let spec = cfg.adapter.as_ref()?;
    let g = cfg.geometry;
    let layers = g.enc_layers + g.dec_layers;
    let (k, d, n) = (g.hidden, spec.bottleneck, spec.division);
    if spec.drop_first_m > 0 {
        return None;
    }
    match (spec.kind, spec.placement) {
        (AdapterKind::Dense, Placement::AfterAttnAndFfn) => Some(closed_form_adapter(layers, k, d).total),
        (AdapterKind::Phm, Placement::AfterAttnAndFfn) => closed_form_phm(layers, k, d, n).ok().map(|c| c.total),
        (AdapterKind::Compacter, Placement::AfterAttnAndFfn) if spec.rank == 1 => {
            closed_form_compacter(layers, k, d, n).ok().map(|c| c.total)
        }
        (AdapterKind::Compacter, Placement::AfterFfnOnly) if spec.rank == 1 => {
            closed_form_compacter_pp(layers, k, d, n).ok().map(|c| c.total)
        }
        _ => None,
    }
}

/// Counts a config by shape traversal and reconciles with the closed forms.
pub fn audit(cfg: &ModelConfig) -> Result<ParamBudgetReport> {
    let layout = plan(cfg)?;
    let base_cfg = ModelConfig {
        geometry: cfg.geometry,
        adapter: None,
        mode: TrainMode::Standard,
    };
    let total_model = total(&plan(&base_cfg)?);
    let built_total = total(&layout);

    let trainable = layout.specs.iter().filter(|s| s.trainable);
    let (mut counted, mut adapter_weights, mut ln, mut block_ln, mut bias) = (0, 0, 0, 0, 0);
    for s in trainable {
        let c = s.numel();
        counted += c;
        match s.role {
            ParamRole::AdapterWeight | ParamRole::SharedSlow => adapter_weights += c,
            ParamRole::LayerNormGain | ParamRole::LayerNormBias => {
                ln += c;
                if !s.path.contains("final_norm") {
                    block_ln += c;
                }
            }
            ParamRole::AdapterBias | ParamRole::BaseBias => bias += c,
            ParamRole::BaseWeight => {}
        }
    }

    let instances = count_instances(&layout);
    let closed_form = match &cfg.adapter {
        Some(spec) => {
            let shared = if spec.kind == AdapterKind::Compacter {
                spec.division.pow(3)
            } else {
                0
            };
            instances * per_adapter_weights(spec, cfg.geometry.hidden)? + shared
        }
        None => 0,
    };
    let share = |x: usize| if counted == 0 { 0.0 } else { x as f64 / counted as f64 };
    Ok(ParamBudgetReport {
        method: cfg.method_name(),
        counted_trainable: counted,
        adapter_weights,
        closed_form,
        literal: literal(cfg),
        instances,
        layer_norm: ln,
        block_layer_norm: block_ln,
        bias,
        total_model,
        built_total,
        fraction_counted: counted as f64 / total_model as f64,
        fraction_closed_form: closed_form as f64 / total_model as f64,
        breakdown: Breakdown {
            layer_norm_share: share(ln),
            bias_share: share(bias),
            weight_share: share(counted - ln - bias),
            block_layer_norm_share: share(block_ln),
        },
    })
}

/// One report per method on `geometry`, in [`Method::ALL`] order.
pub fn audit_all(geometry: ModelGeometry, settings: &MethodSettings) -> Result<Vec<ParamBudgetReport>> {
    Method::ALL
        .into_iter()
        .map(|m| audit(&m.config(geometry, settings)))
        .collect()
}
