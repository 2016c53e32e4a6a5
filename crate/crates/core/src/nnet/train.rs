use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::model::{DenseParams, Lineage, LossKind, Model, Targets};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Drives mini-batch order. Weight initialization takes its own seed.
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 5e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            loss: LossKind::HardLabelCrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if let LossKind::SoftLabelCrossEntropy { temperature } = self.loss {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.clone() }
    }
}

struct AdamState {
    m: Vec<DenseParams>,
    v: Vec<DenseParams>,
    t: i32,
}

fn step(
    layers: &mut [DenseParams],
    grads: &[DenseParams],
    cfg: &TrainConfig,
    adam: &mut Option<AdamState>,
    frozen: usize,
) {
    let lr = cfg.learning_rate;
    match (cfg.optimizer, adam) {
        (Optimizer::Sgd, _) => {
            for (p, g) in layers.iter_mut().zip(grads).skip(frozen) {
                for (w, gw) in p.weights.iter_mut().zip(&g.weights).chain(p.bias.iter_mut().zip(&g.bias)) {
                    *w -= lr * gw;
                }
            }
        }
        (Optimizer::Adam { beta1, beta2, eps }, Some(state)) => {
            state.t += 1;
            let c1 = 1.0 - beta1.powi(state.t);
            let c2 = 1.0 - beta2.powi(state.t);
            for (((p, g), m), v) in layers.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v).skip(frozen) {
                let params = p.weights.iter_mut().chain(p.bias.iter_mut());
                let grads = g.weights.iter().chain(&g.bias);
                let moments = m.weights.iter_mut().chain(m.bias.iter_mut());
                let second = v.weights.iter_mut().chain(v.bias.iter_mut());
                for (((w, gw), mw), vw) in params.zip(grads).zip(moments).zip(second) {
                    *mw = beta1 * *mw + (1.0 - beta1) * gw;
                    *vw = beta2 * *vw + (1.0 - beta2) * gw * gw;
                    let mhat = *mw / c1;
                    let vhat = *vw / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        (Optimizer::Adam { .. }, None) => unreachable!("adam state is created with the optimizer"),
    }
}

/// Trains on a labelled dataset with the configured loss (hard labels).
pub fn train(model: &Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    train_on(model, &dataset.features, Targets::Hard(&dataset.labels), cfg, 0)
}

/// Mini-batch training on arbitrary targets. The first `frozen_layers` dense
/// layers keep their weights. Batch order is drawn from the `shuffle` stream
/// of `cfg.seed`.
pub fn train_on(
    model: &Model,
    inputs: &[Vec<f64>],
    targets: Targets<'_>,
    cfg: &TrainConfig,
    frozen_layers: usize,
) -> Result<Model> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Input(format!("{} inputs but {} targets", inputs.len(), targets.len())));
    }
    if frozen_layers >= model.layers().len() && frozen_layers > 0 {
        return Err(Error::Config(format!("cannot freeze {frozen_layers} of {} dense layers", model.layers().len())));
    }

    let mut layers = model.layers().to_vec();
    let mut adam = match cfg.optimizer {
        Optimizer::Adam { .. } => Some(AdamState {
            m: layers.iter().map(|p| DenseParams::zeros(p.in_dim, p.out_dim)).collect(),
            v: layers.iter().map(|p| DenseParams::zeros(p.in_dim, p.out_dim)).collect(),
            t: 0,
        }),
        Optimizer::Sgd => None,
    };
    let mut rng = rng::stream(cfg.seed, "shuffle");
    let mut batch_x: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    let mut batch_hard: Vec<usize> = Vec::with_capacity(cfg.batch_size);
    let mut batch_soft: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let order = rng::permutation(&mut rng, inputs.len());
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch_x.clear();
            batch_x.extend(chunk.iter().map(|&i| inputs[i].clone()));
            let current = model.with_layers(layers.clone());
            let (loss, grads) = match targets {
                Targets::Hard(t) => {
                    batch_hard.clear();
                    batch_hard.extend(chunk.iter().map(|&i| t[i]));
                    current.loss_and_param_grads(&batch_x, Targets::Hard(&batch_hard), cfg.loss)?
                }
                Targets::Soft(t) => {
                    batch_soft.clear();
                    batch_soft.extend(chunk.iter().map(|&i| t[i].clone()));
                    current.loss_and_param_grads(&batch_x, Targets::Soft(&batch_soft), cfg.loss)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch });
            }
            step(&mut layers, &grads, cfg, &mut adam, frozen_layers);
        }
    }

    if let Some((i, _)) =
        layers.iter().enumerate().find(|(_, p)| !p.weights.iter().chain(&p.bias).all(|v| v.is_finite()))
    {
        return Err(Error::Divergence { epoch: cfg.epochs - 1, batch: i });
    }
    let mut trained = model.with_layers(layers);
    if trained.provenance().lineage.is_empty() {
        trained = trained.push_lineage(Lineage::TrainedFresh);
    }
    Ok(trained)
}
