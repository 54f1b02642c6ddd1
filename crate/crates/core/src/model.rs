//! Toy frozen transformer with adapter insertion.
//!
//! Pre-norm encoder blocks (`LN -> attention -> adapter -> +skip`, then
//! `LN -> FFN -> adapter -> +skip`), a final layer norm, mean pooling over the
//! sequence and a frozen classification head. A decoder stack can be declared
//! so that its parameters enter budgets, but it has no forward pass.
//!
//! Base weights and trainable weights are drawn from separate random
//! streams, so a model with adapters has exactly the same frozen weights as
//! the adapter-free model built from the same seed.

use std::fmt;

use thiserror::Error;

use crate::grad::{GradError, Tape, Var};
use crate::layers::{declare_adapter, declare_shared_slow, AdapterKind, AdapterLayer, AdapterSpec, LayerError};
use crate::linalg::{LinalgError, Tensor2};
use crate::params::{Init, ParamBinding, ParamId, ParamLayout, ParamRole, ParamSink, ParamSpec, ParamStore};
use crate::rng::{self, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("batch is malformed: {0}")]
    Batch(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelGeometry {
    pub enc_layers: usize,
    /// 0 for encoder-only.
    pub dec_layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Relative-position bias buckets per stack, 0 to disable.
    pub rel_buckets: usize,
    /// Biases on attention and FFN projections.
    pub linear_bias: bool,
    /// Additive bias in layer norms.
    pub ln_bias: bool,
    /// Logits from the first `classes` embedding rows instead of a head matrix.
    pub tie_head: bool,
    pub classes: usize,
    /// Add fixed sinusoidal position codes to the embeddings.
    pub sinusoidal: bool,
}

impl ModelGeometry {
    /// T5-base layout: 12+12 layers, no projection biases, gain-only layer
    /// norms, 32 relative-position buckets and a head tied to the embedding.
    pub fn t5_base() -> Self {
        Self {
            enc_layers: 12,
            dec_layers: 12,
            hidden: 768,
            ffn: 3072,
            heads: 12,
            vocab: 32128,
            max_seq: 512,
            rel_buckets: 32,
            linear_bias: false,
            ln_bias: false,
            tie_head: true,
            classes: 2,
            sinusoidal: false,
        }
    }

    pub fn toy() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 0,
            hidden: 8,
            ffn: 16,
            heads: 2,
            vocab: 8,
            max_seq: 8,
            rel_buckets: 0,
            linear_bias: true,
            ln_bias: true,
            tie_head: false,
            classes: 2,
            sinusoidal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.enc_layers >= 1, "enc_layers must be at least 1"),
            (self.hidden >= 1, "hidden must be at least 1"),
            (self.ffn >= 1, "ffn must be at least 1"),
            (self.heads >= 1, "heads must be at least 1"),
            (self.vocab >= 1, "vocab must be at least 1"),
            (self.max_seq >= 1, "max_seq must be at least 1"),
            (self.classes >= 1, "classes must be at least 1"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(ModelError::Geometry((*msg).into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(ModelError::Geometry(format!(
                "hidden={} must be divisible by heads={}",
                self.hidden, self.heads
            )));
        }
        if self.tie_head && self.classes > self.vocab {
            return Err(ModelError::Geometry(format!(
                "tied head needs classes={} <= vocab={}",
                self.classes, self.vocab
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    /// Adapters and layer norms.
    #[default]
    Standard,
    /// Base biases and layer norms; projection biases are forced on.
    BitFit,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::BitFit => "bitfit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Standard, Self::BitFit].into_iter().find(|m| m.name() == s)
    }

    pub fn trains(self, role: ParamRole) -> bool {
        match role {
            ParamRole::LayerNormGain | ParamRole::LayerNormBias => true,
            ParamRole::AdapterWeight | ParamRole::AdapterBias | ParamRole::SharedSlow => self == Self::Standard,
            ParamRole::BaseBias => self == Self::BitFit,
            ParamRole::BaseWeight => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub geometry: ModelGeometry,
    pub adapter: Option<AdapterSpec>,
    pub mode: TrainMode,
}

impl ModelConfig {
    pub fn new(geometry: ModelGeometry, adapter: Option<AdapterSpec>) -> Self {
        Self {
            geometry,
            adapter,
            mode: TrainMode::Standard,
        }
    }

    pub fn bitfit(geometry: ModelGeometry) -> Self {
        Self {
            geometry,
            adapter: None,
            mode: TrainMode::BitFit,
        }
    }

    /// Geometry actually built: BitFit needs biases to train.
    pub fn effective_geometry(&self) -> ModelGeometry {
        let mut g = self.geometry;
        if self.mode == TrainMode::BitFit {
            g.linear_bias = true;
        }
        g
    }

    /// Short method label: `adapter`, `pfeiffer`, `adapterdrop`, `lowrank`,
    /// `phm`, `compacter`, `compacter++`, `bitfit` or `frozen`.
    pub fn method_name(&self) -> String {
        use crate::layers::Placement;
        if self.mode == TrainMode::BitFit {
            return "bitfit".into();
        }
        let Some(spec) = &self.adapter else {
            return "frozen".into();
        };
        let ffn_only = spec.placement == Placement::AfterFfnOnly;
        let base = match spec.kind {
            AdapterKind::Dense if spec.drop_first_m > 0 => "adapterdrop",
            AdapterKind::Dense if ffn_only => "pfeiffer",
            AdapterKind::Dense => "adapter",
            AdapterKind::LowRank => "lowrank",
            AdapterKind::Phm => "phm",
            AdapterKind::Compacter if ffn_only => "compacter++",
            AdapterKind::Compacter => "compacter",
        };
        let standard = match spec.kind {
            AdapterKind::Dense if spec.drop_first_m > 0 || ffn_only => true,
            AdapterKind::Compacter if ffn_only => true,
            _ => spec.placement == Placement::AfterAttnAndFfn,
        };
        if standard {
            base.to_string()
        } else {
            format!("{base}@{}", spec.placement.name())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        g.validate()?;
        if let Some(spec) = &self.adapter {
            if self.mode == TrainMode::BitFit {
                return Err(ModelError::Config("bitfit mode trains biases only and takes no adapters".into()));
            }
            spec.validate(g.hidden)?;
            let min_layers = if g.dec_layers == 0 {
                g.enc_layers
            } else {
                g.enc_layers.min(g.dec_layers)
            };
            if spec.drop_first_m >= min_layers {
                return Err(ModelError::Config(format!(
                    "drop_first_m={} must be less than the layer count {min_layers}",
                    spec.drop_first_m
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn forward(&self, tape: &mut Tape, bind: &mut ParamBinding, store: &ParamStore, x: Var) -> Result<Var> {
        let w = bind.var(tape, store, self.w);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = bind.var(tape, store, b);
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Norm {
    gain: ParamId,
    bias: Option<ParamId>,
}

impl Norm {
    fn forward(&self, tape: &mut Tape, bind: &mut ParamBinding, store: &ParamStore, x: Var) -> Result<Var> {
        let g = bind.var(tape, store, self.gain);
        let b = self.bias.map(|b| bind.var(tape, store, b));
        Ok(tape.layer_norm(x, g, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EncoderBlock {
    attn_norm: Norm,
    attn: Attention,
    attn_adapter: Option<AdapterLayer>,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_adapter: Option<AdapterLayer>,
}

/// Declared for budgeting only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[allow(dead_code)]
struct DecoderBlock {
    self_norm: Norm,
    self_attn: Attention,
    self_adapter: Option<AdapterLayer>,
    cross_norm: Norm,
    cross_attn: Attention,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_adapter: Option<AdapterLayer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Skeleton {
    embedding: ParamId,
    enc_rel_bias: Option<ParamId>,
    encoder: Vec<EncoderBlock>,
    enc_norm: Norm,
    #[allow(dead_code)]
    decoder: Vec<DecoderBlock>,
    head: Option<Linear>,
    shared_slow: Option<ParamId>,
}

/// Sink wrapper that fixes trainability from the role and the mode.
struct Declarer<'a, S: ParamSink> {
    sink: &'a mut S,
    mode: TrainMode,
}

impl<S: ParamSink> Declarer<'_, S> {
    fn add(&mut self, path: String, rows: usize, cols: usize, role: ParamRole, init: Init) -> ParamId {
        let trainable = self.mode.trains(role);
        self.sink.add(ParamSpec::matrix(path, rows, cols, role, trainable), init)
    }

    fn vector(&mut self, path: String, len: usize, role: ParamRole, init: Init) -> ParamId {
        let trainable = self.mode.trains(role);
        self.sink.add(ParamSpec::vector(path, len, role, trainable), init)
    }

    fn frozen(&mut self, spec: ParamSpec, init: Init) -> ParamId {
        self.sink.add(ParamSpec { trainable: false, ..spec }, init)
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize, bias: bool) -> Linear {
        let w = self.add(
            format!("{prefix}.w"),
            input,
            output,
            ParamRole::BaseWeight,
            Init::Normal {
                std: 1.0 / (input as f64).sqrt(),
            },
        );
        let b = bias.then(|| self.vector(format!("{prefix}.b"), output, ParamRole::BaseBias, Init::Normal { std: 0.02 }));
        Linear { w, b }
    }

    fn norm(&mut self, prefix: &str, k: usize, bias: bool) -> Norm {
        Norm {
            gain: self.vector(format!("{prefix}.gain"), k, ParamRole::LayerNormGain, Init::Ones),
            bias: bias.then(|| self.vector(format!("{prefix}.bias"), k, ParamRole::LayerNormBias, Init::Zeros)),
        }
    }

    fn attention(&mut self, prefix: &str, k: usize, bias: bool) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), k, k, bias),
            k: self.linear(&format!("{prefix}.k"), k, k, bias),
            v: self.linear(&format!("{prefix}.v"), k, k, bias),
            o: self.linear(&format!("{prefix}.o"), k, k, bias),
        }
    }

    fn rel_bias(&mut self, prefix: &str, g: &ModelGeometry) -> Option<ParamId> {
        (g.rel_buckets > 0).then(|| {
            self.add(
                format!("{prefix}.rel_bias"),
                g.rel_buckets,
                g.heads,
                ParamRole::BaseWeight,
                Init::Normal { std: 0.1 },
            )
        })
    }

    fn adapter(
        &mut self,
        prefix: String,
        cfg: &ModelConfig,
        layer: usize,
        wanted: bool,
        shared: Option<ParamId>,
    ) -> Result<Option<AdapterLayer>> {
        match &cfg.adapter {
            Some(spec) if wanted && layer >= spec.drop_first_m => {
                let trainable = self.mode.trains(ParamRole::AdapterWeight);
                Ok(Some(declare_adapter(
                    self.sink,
                    &prefix,
                    spec,
                    cfg.geometry.hidden,
                    trainable,
                    shared,
                )?))
            }
            _ => Ok(None),
        }
    }
}

fn declare<S: ParamSink>(sink: &mut S, cfg: &ModelConfig) -> Result<Skeleton> {
    cfg.validate()?;
    let g = cfg.effective_geometry();
    let k = g.hidden;
    let mut d = Declarer { sink, mode: cfg.mode };
    let (after_attn, after_ffn) = cfg
        .adapter
        .map_or((false, false), |s| (s.placement.after_attn(), s.placement.after_ffn()));

    let shared_slow = match &cfg.adapter {
        Some(spec) if spec.kind == AdapterKind::Compacter => Some(declare_shared_slow(d.sink, spec.division)),
        _ => None,
    };
    let embedding = d.add("shared.embedding".into(), g.vocab, k, ParamRole::BaseWeight, Init::Normal { std: 1.0 });

    let enc_rel_bias = d.rel_bias("encoder", &g);
    let mut encoder = Vec::with_capacity(g.enc_layers);
    for l in 0..g.enc_layers {
        let p = format!("encoder.layer.{l:02}");
        encoder.push(EncoderBlock {
            attn_norm: d.norm(&format!("{p}.attn_norm"), k, g.ln_bias),
            attn: d.attention(&format!("{p}.attn"), k, g.linear_bias),
            attn_adapter: d.adapter(format!("{p}.attn_adapter"), cfg, l, after_attn, shared_slow)?,
            ffn_norm: d.norm(&format!("{p}.ffn_norm"), k, g.ln_bias),
            ffn_in: d.linear(&format!("{p}.ffn.wi"), k, g.ffn, g.linear_bias),
            ffn_out: d.linear(&format!("{p}.ffn.wo"), g.ffn, k, g.linear_bias),
            ffn_adapter: d.adapter(format!("{p}.ffn_adapter"), cfg, l, after_ffn, shared_slow)?,
        });
    }
    let enc_norm = d.norm("encoder.final_norm", k, g.ln_bias);

    let mut decoder = Vec::with_capacity(g.dec_layers);
    if g.dec_layers > 0 {
        d.rel_bias("decoder", &g);
    }
    for l in 0..g.dec_layers {
        let p = format!("decoder.layer.{l:02}");
        decoder.push(DecoderBlock {
            self_norm: d.norm(&format!("{p}.self_norm"), k, g.ln_bias),
            self_attn: d.attention(&format!("{p}.self_attn"), k, g.linear_bias),
            self_adapter: d.adapter(format!("{p}.self_adapter"), cfg, l, after_attn, shared_slow)?,
            cross_norm: d.norm(&format!("{p}.cross_norm"), k, g.ln_bias),
            cross_attn: d.attention(&format!("{p}.cross_attn"), k, g.linear_bias),
            ffn_norm: d.norm(&format!("{p}.ffn_norm"), k, g.ln_bias),
            ffn_in: d.linear(&format!("{p}.ffn.wi"), k, g.ffn, g.linear_bias),
            ffn_out: d.linear(&format!("{p}.ffn.wo"), g.ffn, k, g.linear_bias),
            ffn_adapter: d.adapter(format!("{p}.ffn_adapter"), cfg, l, after_ffn, shared_slow)?,
        });
    }
    if g.dec_layers > 0 {
        d.norm("decoder.final_norm", k, g.ln_bias);
    }

    let head = (!g.tie_head).then(|| {
        let std = 1.0 / (k as f64).sqrt();
        let w = d.frozen(
            ParamSpec::matrix("head.w", k, g.classes, ParamRole::BaseWeight, false),
            Init::Normal { std },
        );
        let b = g.linear_bias.then(|| {
            d.frozen(
                ParamSpec::vector("head.b", g.classes, ParamRole::BaseBias, false),
                Init::Normal { std: 0.02 },
            )
        });
        Linear { w, b }
    });

    Ok(Skeleton {
        embedding,
        enc_rel_bias,
        encoder,
        enc_norm,
        decoder,
        head,
        shared_slow,
    })
}

/// Parameter shapes of a config without allocating any values.
pub fn plan(cfg: &ModelConfig) -> Result<ParamLayout> {
    let mut layout = ParamLayout::default();
    declare(&mut layout, cfg)?;
    Ok(layout)
}

/// Allocating sink drawing frozen and trainable weights from separate streams.
struct SeededSink<'a> {
    store: &'a mut ParamStore,
    base: rng::Rng,
    tuned: rng::Rng,
}

impl ParamSink for SeededSink<'_> {
    fn add(&mut self, spec: ParamSpec, init: Init) -> ParamId {
        let rng = if spec.role.is_adapter() {
            &mut self.tuned
        } else {
            &mut self.base
        };
        let value = init.sample(spec.rows, spec.cols, rng);
        self.store.insert(spec, value)
    }
}

/// Token ids, one equal-length row per example.
pub type TokenBatch = [Vec<usize>];

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    skeleton: Skeleton,
    store: ParamStore,
}

impl fmt::Display for TransformerModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = &self.config.geometry;
        write!(
            f,
            "transformer(L_enc={}, L_dec={}, k={}, adapters={}, params={}, trainable={})",
            g.enc_layers,
            g.dec_layers,
            g.hidden,
            self.adapter_instances(),
            self.num_params(),
            self.num_trainable()
        )
    }
}

impl TransformerModel {
    /// Deterministic in `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let skeleton = declare(
            &mut SeededSink {
                store: &mut store,
                base: rng::stream(seed, Stream::BaseInit),
                tuned: rng::stream(seed, Stream::AdapterInit),
            },
            cfg,
        )?;
        Ok(Self {
            config: *cfg,
            skeleton,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn shared_slow_weights(&self) -> Option<ParamId> {
        self.skeleton.shared_slow
    }

    pub fn num_params(&self) -> usize {
        self.store.iter().map(|(_, p)| p.spec.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.spec.trainable)
            .map(|(_, p)| p.spec.numel())
            .sum()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store
            .ids_by_path()
            .into_iter()
            .filter(|&id| self.store.get(id).spec.trainable)
            .collect()
    }

    /// Trainable tensors, sorted by path.
    pub fn trainable_parameters(&self) -> Vec<(&str, &Tensor2)> {
        self.trainable_ids()
            .into_iter()
            .map(|id| {
                let p = self.store.get(id);
                (p.spec.path.as_str(), &p.value)
            })
            .collect()
    }

    /// Adapters of the encoder stack in order.
    pub fn encoder_adapters(&self) -> Vec<&AdapterLayer> {
        self.skeleton
            .encoder
            .iter()
            .flat_map(|b| [b.attn_adapter.as_ref(), b.ffn_adapter.as_ref()])
            .flatten()
            .collect()
    }

    pub fn adapter_instances(&self) -> usize {
        let dec = self
            .skeleton
            .decoder
            .iter()
            .map(|b| usize::from(b.self_adapter.is_some()) + usize::from(b.ffn_adapter.is_some()))
            .sum::<usize>();
        self.encoder_adapters().len() + dec
    }

    pub fn forward(&self, tokens: &TokenBatch) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let mut bind = ParamBinding::new();
        let logits = self.forward_tape(&self.store, &mut tape, &mut bind, tokens)?;
        Ok(tape.value(logits).clone())
    }

    /// Encoder forward on a tape, reading parameters from `store` (which must
    /// have this model's layout). Returns `batch x classes` logits.
    pub fn forward_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        bind: &mut ParamBinding,
        tokens: &TokenBatch,
    ) -> Result<Var> {
        let g = &self.config.geometry;
        let (batch, seq) = self.check_tokens(tokens)?;
        let sk = &self.skeleton;

        let emb = store.value(sk.embedding);
        let mut x0 = Tensor2::zeros(batch * seq, g.hidden);
        for (b, row) in tokens.iter().enumerate() {
            for (s, &id) in row.iter().enumerate() {
                x0.row_mut(b * seq + s).copy_from_slice(emb.row(id));
            }
        }
        if g.sinusoidal {
            let pe = sinusoidal_codes(seq, g.hidden);
            for r in 0..batch * seq {
                for (o, &p) in x0.row_mut(r).iter_mut().zip(pe.row(r % seq)) {
                    *o += p;
                }
            }
        }
        let attn_bias = sk
            .enc_rel_bias
            .map(|id| relative_bias(store.value(id), seq, g.heads));

        let mut x = tape.constant(x0);
        for block in &sk.encoder {
            let h = block.attn_norm.forward(tape, bind, store, x)?;
            let q = block.attn.q.forward(tape, bind, store, h)?;
            let k = block.attn.k.forward(tape, bind, store, h)?;
            let v = block.attn.v.forward(tape, bind, store, h)?;
            let a = tape.attention(q, k, v, batch, seq, g.heads, attn_bias.as_ref())?;
            let mut a = block.attn.o.forward(tape, bind, store, a)?;
            if let Some(ad) = &block.attn_adapter {
                a = ad.forward(tape, bind, store, a)?;
            }
            x = tape.add(x, a)?;

            let h = block.ffn_norm.forward(tape, bind, store, x)?;
            let h = block.ffn_in.forward(tape, bind, store, h)?;
            let h = tape.gelu(h)?;
            let mut f = block.ffn_out.forward(tape, bind, store, h)?;
            if let Some(ad) = &block.ffn_adapter {
                f = ad.forward(tape, bind, store, f)?;
            }
            x = tape.add(x, f)?;
        }
        let x = sk.enc_norm.forward(tape, bind, store, x)?;
        let pooled = tape.mean_pool(x, seq)?;
        match &sk.head {
            Some(head) => head.forward(tape, bind, store, pooled),
            None => {
                let rows = store.value(sk.embedding).block(0, 0, g.classes, g.hidden).transpose();
                let w = tape.constant(rows);
                Ok(tape.matmul(pooled, w)?)
            }
        }
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<(usize, usize)> {
        let g = &self.config.geometry;
        let batch = tokens.len();
        let seq = tokens.first().map_or(0, Vec::len);
        if batch == 0 || seq == 0 {
            return Err(ModelError::Batch("empty batch".into()));
        }
        if seq > g.max_seq {
            return Err(ModelError::Batch(format!("sequence length {seq} exceeds max_seq {}", g.max_seq)));
        }
        for row in tokens {
            if row.len() != seq {
                return Err(ModelError::Batch(format!("ragged rows: {} vs {seq}", row.len())));
            }
            if let Some(&id) = row.iter().find(|&&id| id >= g.vocab) {
                return Err(ModelError::TokenOutOfVocab { id, vocab: g.vocab });
            }
        }
        Ok((batch, seq))
    }
}

/// `(heads·seq) x seq` attention bias from a `buckets x heads` table; the
/// bucket is the signed distance `j - i` clipped to the table.
fn relative_bias(table: &Tensor2, seq: usize, heads: usize) -> Tensor2 {
    let buckets = table.rows() as isize;
    let lo = -(buckets / 2);
    let hi = buckets - buckets / 2 - 1;
    let mut out = Tensor2::zeros(heads * seq, seq);
    for h in 0..heads {
        for i in 0..seq {
            for j in 0..seq {
                let bucket = ((j as isize - i as isize).clamp(lo, hi) - lo) as usize;
                out.set(h * seq + i, j, table.get(bucket, h));
            }
        }
    }
    out
}

fn sinusoidal_codes(seq: usize, k: usize) -> Tensor2 {
    Tensor2::from_fn(seq, k, |pos, i| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / k as f64);
        let angle = pos as f64 / rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
