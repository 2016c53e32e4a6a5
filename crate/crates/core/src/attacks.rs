//! Model extraction attacks and post-extraction blurring.
//!
//! Extraction only ever sees the victim through [`BlackBox`]: a batch of
//! inputs in, a batch of confidence vectors out.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::sample_indices;
use crate::error::{Error, Result};
use crate::nnet::{
    argmax, train_on, DenseParams, Lineage, LossKind, Model, ModelSpec, Provenance, Targets, TrainConfig,
};

/// Query access to a victim model.
pub trait BlackBox {
    fn id(&self) -> &str;
    fn input_dim(&self) -> usize;
    fn classes(&self) -> usize;
    /// Confidence vectors for a batch of inputs.
    fn query(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

impl BlackBox for Model {
    fn id(&self) -> &str {
        Model::id(self)
    }
    fn input_dim(&self) -> usize {
        Model::input_dim(self)
    }
    fn classes(&self) -> usize {
        Model::classes(self)
    }
    fn query(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.forward(inputs)
    }
}

/// Wraps a victim and counts the inputs it answers.
pub struct CountingOracle<'a> {
    inner: &'a Model,
    queries: AtomicUsize,
}

impl<'a> CountingOracle<'a> {
    pub fn new(inner: &'a Model) -> Self {
        CountingOracle { inner, queries: AtomicUsize::new(0) }
    }

    pub fn queries(&self) -> usize {
        self.queries.load(Ordering::Relaxed)
    }
}

impl BlackBox for CountingOracle<'_> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn classes(&self) -> usize {
        self.inner.classes()
    }
    fn query(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.queries.fetch_add(inputs.len(), Ordering::Relaxed);
        self.inner.forward(inputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "RET")]
    Retraining,
    #[serde(rename = "DIS")]
    Distillation,
    #[serde(rename = "TRL")]
    TransferLearning,
    #[serde(rename = "CAR")]
    CrossArchRetraining,
    #[serde(rename = "CPY")]
    Copycat,
}

impl AttackKind {
    pub fn abbrev(self) -> &'static str {
        match self {
            AttackKind::Retraining => "RET",
            AttackKind::Distillation => "DIS",
            AttackKind::TransferLearning => "TRL",
            AttackKind::CrossArchRetraining => "CAR",
            AttackKind::Copycat => "CPY",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RET" | "RETRAINING" => Ok(AttackKind::Retraining),
            "DIS" | "DISTILLATION" => Ok(AttackKind::Distillation),
            "TRL" | "TRANSFER" | "TRANSFER_LEARNING" => Ok(AttackKind::TransferLearning),
            "CAR" | "CROSS_ARCH_RETRAINING" => Ok(AttackKind::CrossArchRetraining),
            "CPY" | "COPYCAT" => Ok(AttackKind::Copycat),
            other => Err(Error::Config(format!("unknown extraction attack {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub kind: AttackKind,
    pub query_budget_fraction: f64,
    pub surrogate_spec: ModelSpec,
    /// `seed` drives both surrogate initialization and batch order.
    pub train_cfg: TrainConfig,
    /// Distillation only.
    pub distill_temperature: Option<f64>,
    /// Transfer learning only: leading dense layers kept from the pretrained model.
    pub frozen_layers: Option<usize>,
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.query_budget_fraction > 0.0 && self.query_budget_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "query budget fraction must lie in (0, 1], got {}",
                self.query_budget_fraction
            )));
        }
        self.surrogate_spec.validate()?;
        self.train_cfg.validate()?;
        match (self.kind, self.distill_temperature) {
            (AttackKind::Distillation, None) => {
                return Err(Error::Config("distillation requires distill_temperature".into()))
            }
            (AttackKind::Distillation, Some(t)) if !(t > 0.0 && t.is_finite()) => {
                return Err(Error::Config(format!("distill_temperature must be positive, got {t}")))
            }
            (AttackKind::Distillation, Some(_)) => {}
            (kind, Some(_)) => return Err(Error::Config(format!("{kind} does not take distill_temperature"))),
            (_, None) => {}
        }
        match (self.kind, self.frozen_layers) {
            (AttackKind::TransferLearning, None) => {
                Err(Error::Config("transfer learning requires frozen_layers".into()))
            }
            (AttackKind::TransferLearning, Some(f)) if f >= self.surrogate_spec.dense_count() => {
                Err(Error::Config(format!("cannot freeze {f} of {} dense layers", self.surrogate_spec.dense_count())))
            }
            (AttackKind::TransferLearning, Some(_)) | (_, None) => Ok(()),
            (kind, Some(_)) => Err(Error::Config(format!("{kind} does not take frozen_layers"))),
        }
    }

    fn check_victim(&self, victim: &dyn BlackBox) -> Result<()> {
        self.validate()?;
        if self.surrogate_spec.input_dim() != victim.input_dim() {
            return Err(Error::Input(format!(
                "surrogate expects {} features but victim {} takes {}",
                self.surrogate_spec.input_dim(),
                victim.id(),
                victim.input_dim()
            )));
        }
        if self.surrogate_spec.output_classes != victim.classes() {
            return Err(Error::Input(format!(
                "surrogate has {} classes but victim {} has {}",
                self.surrogate_spec.output_classes,
                victim.id(),
                victim.classes()
            )));
        }
        Ok(())
    }
}

fn extracted_provenance(kind: AttackKind, victim: &dyn BlackBox, seed: u64) -> Provenance {
    Provenance {
        id: format!("{}-{}-{seed:016x}", kind.abbrev().to_ascii_lowercase(), victim.id()),
        seed,
        lineage: vec![Lineage::Extracted { attack: kind.abbrev().to_string(), victim: victim.id().to_string() }],
    }
}

fn budgeted_queries(inputs: &[Vec<f64>], cfg: &ExtractionConfig) -> Result<Vec<Vec<f64>>> {
    let idx = sample_indices(inputs.len(), cfg.query_budget_fraction, cfg.train_cfg.seed)?;
    if idx.is_empty() {
        return Err(Error::Config(format!(
            "query budget {} of {} inputs yields no queries",
            cfg.query_budget_fraction,
            inputs.len()
        )));
    }
    Ok(idx.into_iter().map(|i| inputs[i].clone()).collect())
}

fn hard_labels(victim: &dyn BlackBox, queries: &[Vec<f64>]) -> Result<Vec<usize>> {
    Ok(victim.query(queries)?.iter().map(|c| argmax(c)).collect())
}

fn train_surrogate(
    start: Model,
    queries: &[Vec<f64>],
    labels: &[usize],
    cfg: &ExtractionConfig,
    frozen: usize,
) -> Result<Model> {
    let train_cfg = TrainConfig { loss: LossKind::HardLabelCrossEntropy, ..cfg.train_cfg.clone() };
    train_on(&start, queries, Targets::Hard(labels), &train_cfg, frozen)
}

/// Trains a freshly initialized surrogate on the victim's hard labels for a
/// budgeted sample of `train_inputs`. Also serves cross-architecture
/// retraining, where only the surrogate spec differs.
pub fn extract_retraining(victim: &dyn BlackBox, train_inputs: &[Vec<f64>], cfg: &ExtractionConfig) -> Result<Model> {
    cfg.check_victim(victim)?;
    let queries = budgeted_queries(train_inputs, cfg)?;
    let labels = hard_labels(victim, &queries)?;
    let start = Model::init(cfg.surrogate_spec.clone(), cfg.train_cfg.seed)?;
    let model = train_surrogate(start, &queries, &labels, cfg, 0)?;
    Ok(model.with_provenance(extracted_provenance(cfg.kind, victim, cfg.train_cfg.seed)))
}

/// Re-softens confidences to `temperature`: `q ∝ p^(1/T)`, the softmax of the
/// victim's logits divided by `T`.
pub fn soften(confidences: &[f64], temperature: f64) -> Vec<f64> {
    let powered: Vec<f64> = confidences.iter().map(|p| p.powf(1.0 / temperature)).collect();
    let sum: f64 = powered.iter().sum();
    powered.into_iter().map(|v| v / sum).collect()
}

/// Trains a fresh surrogate on the victim's full confidence vectors with
/// soft-label cross-entropy at the distillation temperature.
pub fn extract_distillation(victim: &dyn BlackBox, train_inputs: &[Vec<f64>], cfg: &ExtractionConfig) -> Result<Model> {
    cfg.check_victim(victim)?;
    let temperature = cfg.distill_temperature.expect("validated");
    let queries = budgeted_queries(train_inputs, cfg)?;
    let soft: Vec<Vec<f64>> = victim.query(&queries)?.iter().map(|c| soften(c, temperature)).collect();
    let start = Model::init(cfg.surrogate_spec.clone(), cfg.train_cfg.seed)?;
    let train_cfg = TrainConfig { loss: LossKind::SoftLabelCrossEntropy { temperature }, ..cfg.train_cfg.clone() };
    let model = train_on(&start, &queries, Targets::Soft(&soft), &train_cfg, 0)?;
    Ok(model.with_provenance(extracted_provenance(cfg.kind, victim, cfg.train_cfg.seed)))
}

/// Fine-tunes a copy of `pretrained` on the victim's hard labels with the
/// first `frozen_layers` dense layers held fixed.
pub fn extract_transfer(
    victim: &dyn BlackBox,
    pretrained: &Model,
    train_inputs: &[Vec<f64>],
    cfg: &ExtractionConfig,
) -> Result<Model> {
    cfg.check_victim(victim)?;
    if pretrained.spec() != &cfg.surrogate_spec {
        return Err(Error::Config(format!("pretrained model {} does not match the surrogate spec", pretrained.id())));
    }
    let frozen = cfg.frozen_layers.expect("validated");
    let queries = budgeted_queries(train_inputs, cfg)?;
    let labels = hard_labels(victim, &queries)?;
    let model = train_surrogate(pretrained.clone(), &queries, &labels, cfg, frozen)?;
    Ok(model.with_provenance(extracted_provenance(cfg.kind, victim, cfg.train_cfg.seed)))
}

/// Labels random probes with the victim and trains a fresh surrogate on them.
pub fn extract_copycat(victim: &dyn BlackBox, probe_inputs: &[Vec<f64>], cfg: &ExtractionConfig) -> Result<Model> {
    cfg.check_victim(victim)?;
    if probe_inputs.is_empty() {
        return Err(Error::Input("copycat extraction needs at least one probe".into()));
    }
    let labels = hard_labels(victim, probe_inputs)?;
    let start = Model::init(cfg.surrogate_spec.clone(), cfg.train_cfg.seed)?;
    let model = train_surrogate(start, probe_inputs, &labels, cfg, 0)?;
    Ok(model.with_provenance(extracted_provenance(cfg.kind, victim, cfg.train_cfg.seed)))
}

/// Dispatches on `cfg.kind`. For copycat, `inputs` are the probes; transfer
/// learning requires `pretrained`.
pub fn extract(
    victim: &dyn BlackBox,
    inputs: &[Vec<f64>],
    cfg: &ExtractionConfig,
    pretrained: Option<&Model>,
) -> Result<Model> {
    match cfg.kind {
        AttackKind::Retraining | AttackKind::CrossArchRetraining => extract_retraining(victim, inputs, cfg),
        AttackKind::Distillation => extract_distillation(victim, inputs, cfg),
        AttackKind::TransferLearning => {
            let pre = pretrained.ok_or_else(|| Error::Config("transfer learning needs a pretrained model".into()))?;
            extract_transfer(victim, pre, inputs, cfg)
        }
        AttackKind::Copycat => extract_copycat(victim, inputs, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum BlurConfig {
    WeightPruning { sparsity: f64 },
    WeightQuantization { bits: u32 },
}

impl BlurConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BlurConfig::WeightPruning { sparsity } if !(0.0..1.0).contains(&sparsity) => {
                Err(Error::Config(format!("sparsity must lie in [0, 1), got {sparsity}")))
            }
            BlurConfig::WeightQuantization { bits } if !(1..=16).contains(&bits) => {
                Err(Error::Config(format!("quantization bits must lie in [1, 16], got {bits}")))
            }
            _ => Ok(()),
        }
    }

    pub fn abbrev(&self) -> &'static str {
        match self {
            BlurConfig::WeightPruning { .. } => "WP",
            BlurConfig::WeightQuantization { .. } => "WQ",
        }
    }

    fn describe(&self) -> String {
        match *self {
            BlurConfig::WeightPruning { sparsity } => format!("WP(sparsity={sparsity})"),
            BlurConfig::WeightQuantization { bits } => format!("WQ(bits={bits})"),
        }
    }
}

fn blurred(model: &Model, layers: Vec<DenseParams>, cfg: &BlurConfig) -> Model {
    let parent = model.id().to_string();
    model
        .with_layers(layers)
        .with_id(format!("{parent}+{}", cfg.abbrev().to_ascii_lowercase()))
        .push_lineage(Lineage::Blurred { method: cfg.describe(), parent })
}

/// Global magnitude pruning: zeroes the `floor(sparsity * count)` dense
/// weights of smallest magnitude across all layers. Biases are untouched.
/// Equal magnitudes are pruned in layer-then-position order.
pub fn blur_prune(model: &Model, sparsity: f64) -> Result<Model> {
    let cfg = BlurConfig::WeightPruning { sparsity };
    cfg.validate()?;
    let mut layers = model.layers().to_vec();
    let mut order: Vec<(f64, usize, usize)> = layers
        .iter()
        .enumerate()
        .flat_map(|(l, p)| p.weights.iter().enumerate().map(move |(i, w)| (w.abs(), l, i)))
        .collect();
    let prune = (sparsity * order.len() as f64).floor() as usize;
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, l, i) in &order[..prune] {
        layers[l].weights[i] = 0.0;
    }
    Ok(blurred(model, layers, &cfg))
}

/// Per-layer uniform quantization: every weight and bias of a layer snaps to
/// the nearest of `2^bits` levels spanning `[min, max]` of that layer. A
/// layer whose values are all equal passes through unchanged.
pub fn blur_quantize(model: &Model, bits: u32) -> Result<Model> {
    let cfg = BlurConfig::WeightQuantization { bits };
    cfg.validate()?;
    let levels = (1u64 << bits) - 1;
    let mut layers = model.layers().to_vec();
    for p in &mut layers {
        let (lo, hi) = p
            .weights
            .iter()
            .chain(&p.bias)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo == hi {
            continue;
        }
        let step = (hi - lo) / levels as f64;
        for v in p.weights.iter_mut().chain(p.bias.iter_mut()) {
            *v = quantization_level(lo, hi, step, levels, ((*v - lo) / step).round() as u64);
        }
    }
    Ok(blurred(model, layers, &cfg))
}

/// Value of level `k` on the grid `lo + k * step`, with the top level pinned
/// to `hi`.
pub fn quantization_level(lo: f64, hi: f64, step: f64, levels: u64, k: u64) -> f64 {
    if k >= levels {
        hi
    } else {
        lo + k as f64 * step
    }
}

pub fn blur(model: &Model, cfg: &BlurConfig) -> Result<Model> {
    match *cfg {
        BlurConfig::WeightPruning { sparsity } => blur_prune(model, sparsity),
        BlurConfig::WeightQuantization { bits } => blur_quantize(model, bits),
    }
}
