//! Dense network parameters, inference and exact gradients.

use serde::{Deserialize, Serialize};

use crate::artifact::{self, hex_vec};
use crate::error::{Error, Result};
use crate::nnet::spec::{LayerSpec, ModelSpec};
use crate::rng;

/// Weight matrix (row-major, `out_dim x in_dim`) and bias of one dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(with = "hex_vec")]
    pub weights: Vec<f64>,
    #[serde(with = "hex_vec")]
    pub bias: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseParams { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, &b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            out.push(b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// One step in a model's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Lineage {
    TrainedFresh,
    Extracted { attack: String, victim: String },
    Blurred { method: String, parent: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub seed: u64,
    /// Oldest first.
    pub lineage: Vec<Lineage>,
}

/// Network with provenance. Treated as immutable: every transformation
/// returns a new model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<DenseParams>,
    provenance: Provenance,
}

/// Training targets for a batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Hard(&'a [usize]),
    Soft(&'a [Vec<f64>]),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(t) => t.len(),
            Targets::Soft(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    HardLabelCrossEntropy,
    /// Cross-entropy against soft targets with the model's logits divided by
    /// `temperature` before the softmax.
    SoftLabelCrossEntropy {
        temperature: f64,
    },
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Outputs of every layer for one input, `outputs[0]` being the input.
struct Trace {
    outputs: Vec<Vec<f64>>,
}

impl Model {
    /// Glorot-uniform weights, zero biases, drawn from the `init` stream of
    /// `seed`. The lineage stays empty until the model is trained.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = rng::stream(seed, "init");
        let layers = spec
            .dense_shapes()
            .map(|(in_dim, out_dim)| {
                let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
                let weights = (0..in_dim * out_dim).map(|_| rng::uniform(&mut rng, -limit, limit)).collect();
                DenseParams { in_dim, out_dim, weights, bias: vec![0.0; out_dim] }
            })
            .collect();
        Ok(Model {
            spec,
            layers,
            provenance: Provenance { id: format!("model-{seed:016x}"), seed, lineage: Vec::new() },
        })
    }

    /// Builds a model from explicit parameters, checking shapes and finiteness.
    pub fn from_parts(spec: ModelSpec, layers: Vec<DenseParams>, provenance: Provenance) -> Result<Model> {
        spec.validate()?;
        let shapes: Vec<_> = spec.dense_shapes().collect();
        if shapes.len() != layers.len() {
            return Err(Error::Spec(format!(
                "spec has {} dense layers but {} parameter blocks were given",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((in_dim, out_dim), p)) in shapes.iter().zip(&layers).enumerate() {
            if p.in_dim != *in_dim
                || p.out_dim != *out_dim
                || p.weights.len() != in_dim * out_dim
                || p.bias.len() != *out_dim
            {
                return Err(Error::Spec(format!("dense layer {i} parameters do not match {in_dim}x{out_dim}")));
            }
            if !p.weights.iter().chain(&p.bias).all(|v| v.is_finite()) {
                return Err(Error::Spec(format!("dense layer {i} contains non-finite values")));
            }
        }
        Ok(Model { spec, layers, provenance })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[DenseParams] {
        &self.layers
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn id(&self) -> &str {
        &self.provenance.id
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.spec.output_classes
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Model {
        self.provenance.id = id.into();
        self
    }

    pub(crate) fn with_layers(&self, layers: Vec<DenseParams>) -> Model {
        Model { spec: self.spec.clone(), layers, provenance: self.provenance.clone() }
    }

    pub(crate) fn push_lineage(mut self, step: Lineage) -> Model {
        self.provenance.lineage.push(step);
        self
    }

    pub(crate) fn with_provenance(mut self, provenance: Provenance) -> Model {
        self.provenance = provenance;
        self
    }

    /// All dense weights and biases are exactly equal.
    pub fn same_weights(&self, other: &Model) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.bias.iter().zip(&b.bias).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Input(format!(
                "model {} expects {} features, got {}",
                self.provenance.id,
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut outputs = Vec::with_capacity(self.spec.layers.len() + 1);
        outputs.push(x.to_vec());
        let mut dense = 0;
        for layer in &self.spec.layers {
            let prev = outputs.last().expect("trace starts with the input");
            let mut next = Vec::new();
            match layer {
                LayerSpec::Dense { .. } => {
                    self.layers[dense].apply(prev, &mut next);
                    dense += 1;
                }
                LayerSpec::Activation(act) => next.extend(prev.iter().map(|&z| act.apply(z))),
            }
            outputs.push(next);
        }
        Trace { outputs }
    }

    /// Backpropagates `delta` (gradient at the logits) through the network.
    /// Accumulates parameter gradients into `grads` when given and returns the
    /// gradient with respect to the input.
    fn backward(&self, trace: &Trace, mut delta: Vec<f64>, mut grads: Option<&mut [DenseParams]>) -> Vec<f64> {
        let mut dense = self.layers.len();
        for (li, layer) in self.spec.layers.iter().enumerate().rev() {
            let input = &trace.outputs[li];
            match layer {
                LayerSpec::Activation(act) => {
                    let out = &trace.outputs[li + 1];
                    for (d, &y) in delta.iter_mut().zip(out) {
                        *d *= act.derivative_from_output(y);
                    }
                }
                LayerSpec::Dense { .. } => {
                    dense -= 1;
                    let p = &self.layers[dense];
                    if let Some(g) = grads.as_deref_mut() {
                        let g = &mut g[dense];
                        for (r, &d) in delta.iter().enumerate() {
                            if d == 0.0 {
                                continue;
                            }
                            g.bias[r] += d;
                            let row = &mut g.weights[r * p.in_dim..(r + 1) * p.in_dim];
                            for (gw, &v) in row.iter_mut().zip(input) {
                                *gw += d * v;
                            }
                        }
                    }
                    let mut prev = vec![0.0; p.in_dim];
                    for (r, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let row = &p.weights[r * p.in_dim..(r + 1) * p.in_dim];
                        for (pv, &w) in prev.iter_mut().zip(row) {
                            *pv += d * w;
                        }
                    }
                    delta = prev;
                }
            }
        }
        delta
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).outputs.pop().expect("non-empty trace"))
    }

    /// Softmax confidences for one input.
    pub fn confidences(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.logits(x).map(|z| softmax(&z))
    }

    /// Softmax confidences for a batch.
    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|x| self.confidences(x)).collect()
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<usize> {
        self.logits(x).map(|z| argmax(&z))
    }

    /// Argmax labels; ties resolve to the lowest class index.
    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        inputs.iter().map(|x| self.predict_one(x)).collect()
    }

    /// Fraction of `inputs` labelled `labels[i]`.
    pub fn accuracy(&self, inputs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let preds = self.predict(inputs)?;
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// Per-sample loss and gradient at the logits.
    fn loss_at_logits(&self, logits: &[f64], target: TargetRef<'_>, loss: LossKind) -> (f64, Vec<f64>) {
        match (target, loss) {
            (TargetRef::Hard(y), _) => {
                let lse = log_sum_exp(logits);
                let mut d = softmax(logits);
                d[y] -= 1.0;
                (lse - logits[y], d)
            }
            (TargetRef::Soft(q), LossKind::SoftLabelCrossEntropy { temperature }) => {
                let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                let lse = log_sum_exp(&scaled);
                let p = softmax(&scaled);
                let qsum: f64 = q.iter().sum();
                let loss = q.iter().zip(&scaled).map(|(qk, s)| if *qk == 0.0 { 0.0 } else { -qk * (s - lse) }).sum();
                let d = p.iter().zip(q).map(|(pk, qk)| (pk * qsum - qk) / temperature).collect();
                (loss, d)
            }
            (TargetRef::Soft(q), LossKind::HardLabelCrossEntropy) => {
                let lse = log_sum_exp(logits);
                let p = softmax(logits);
                let qsum: f64 = q.iter().sum();
                let loss = q.iter().zip(logits).map(|(qk, z)| if *qk == 0.0 { 0.0 } else { -qk * (z - lse) }).sum();
                let d = p.iter().zip(q).map(|(pk, qk)| pk * qsum - qk).collect();
                (loss, d)
            }
        }
    }

    fn check_targets(&self, inputs: &[Vec<f64>], targets: Targets<'_>, loss: LossKind) -> Result<()> {
        if inputs.len() != targets.len() {
            return Err(Error::Input(format!("{} inputs but {} targets", inputs.len(), targets.len())));
        }
        if inputs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let k = self.classes();
        match (targets, loss) {
            (Targets::Hard(t), LossKind::HardLabelCrossEntropy) => {
                if let Some(bad) = t.iter().find(|&&y| y >= k) {
                    return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
                }
            }
            (Targets::Soft(t), LossKind::SoftLabelCrossEntropy { temperature }) => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
                }
                if let Some(bad) = t.iter().find(|q| q.len() != k) {
                    return Err(Error::Input(format!("soft target has {} entries, expected {k}", bad.len())));
                }
            }
            _ => return Err(Error::Input("target kind does not match the loss".into())),
        }
        for x in inputs {
            self.check_input(x)?;
        }
        Ok(())
    }

    /// Mean cross-entropy over the batch and its exact gradient with respect
    /// to every weight and bias.
    pub fn loss_and_param_grads(
        &self,
        inputs: &[Vec<f64>],
        targets: Targets<'_>,
        loss: LossKind,
    ) -> Result<(f64, Vec<DenseParams>)> {
        self.check_targets(inputs, targets, loss)?;
        let mut grads: Vec<DenseParams> = self.layers.iter().map(|p| DenseParams::zeros(p.in_dim, p.out_dim)).collect();
        let mut total = 0.0;
        for (i, x) in inputs.iter().enumerate() {
            let trace = self.trace(x);
            let logits = trace.outputs.last().expect("non-empty trace");
            let (l, d) = self.loss_at_logits(logits, targets.at(i), loss);
            total += l;
            self.backward(&trace, d, Some(&mut grads));
        }
        let scale = 1.0 / inputs.len() as f64;
        for g in &mut grads {
            g.weights.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= scale);
        }
        Ok((total * scale, grads))
    }

    /// Hard-label cross-entropy loss at `x` for class `target`.
    pub fn loss_at(&self, x: &[f64], target: usize) -> Result<f64> {
        let z = self.logits(x)?;
        Ok(log_sum_exp(&z) - z[target])
    }

    /// Gradient of the hard-label cross-entropy towards `target` with respect
    /// to the input.
    pub fn input_gradient(&self, x: &[f64], target: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if target >= self.classes() {
            return Err(Error::Input(format!("label {target} out of range for {} classes", self.classes())));
        }
        let trace = self.trace(x);
        let mut d = softmax(trace.outputs.last().expect("non-empty trace"));
        d[target] -= 1.0;
        Ok(self.backward(&trace, d, None))
    }

    pub fn to_artifact(&self) -> Result<String> {
        artifact::encode(MODEL_FORMAT, self)
    }

    pub fn from_artifact(text: &str) -> Result<Model> {
        let m: Model = artifact::decode(MODEL_FORMAT, text)?;
        Model::from_parts(m.spec, m.layers, m.provenance)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_artifact()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Model> {
        Model::from_artifact(&std::fs::read_to_string(path)?)
    }
}

pub(crate) const MODEL_FORMAT: &str = "rawmark-model";

#[derive(Clone, Copy)]
enum TargetRef<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

impl<'a> Targets<'a> {
    fn at(&self, i: usize) -> TargetRef<'a> {
        match *self {
            Targets::Hard(t) => TargetRef::Hard(t[i]),
            Targets::Soft(t) => TargetRef::Soft(&t[i]),
        }
    }
}
