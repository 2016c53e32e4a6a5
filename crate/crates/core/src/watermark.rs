//! Key-set generation, per-watermark verification classifiers, and verification.
//!
//! The offline stage turns inputs the protected model gets wrong into
//! watermarks (after strengthening them with targeted BIM) and keeps the `n`
//! on which extracted and independent models differ most in confidence. One
//! scalar classifier per watermark then learns which confidence values look
//! "extracted". The online stage scores a suspect by the fraction of
//! watermarks its confidences are classified as extracted on.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{bim_batch, BimConfig, BimMode};
use crate::artifact::{self, hex_f64, hex_matrix, hex_vec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::Model;

/// L2 penalty on the logistic slope.
pub const LR_L2: f64 = 1e-4;
/// Newton stops once the gradient norm falls below this.
pub const LR_TOLERANCE: f64 = 1e-8;
const LR_MAX_ITERATIONS: usize = 500;
/// Lower bound on every Gaussian naive Bayes variance.
pub const GNB_VARIANCE_FLOOR: f64 = 1e-9;

/// Where watermark candidates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    /// Inputs the protected model misclassifies.
    #[default]
    Misclassifications,
    /// Inputs on which the protected model disagrees with at least one
    /// non-extracted model.
    Disagreements,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeygenConfig {
    pub size: usize,
    pub bim: BimConfig,
    pub source: CandidateSource,
}

impl Default for KeygenConfig {
    fn default() -> Self {
        KeygenConfig { size: 32, bim: BimConfig::default(), source: CandidateSource::Misclassifications }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySet {
    #[serde(with = "hex_matrix")]
    pub watermarks: Vec<Vec<f64>>,
    /// Protected model's prediction on each (perturbed) watermark.
    pub labels: Vec<usize>,
    /// Row of the source dataset each watermark was derived from.
    pub source_indices: Vec<usize>,
    /// Mean extracted-population confidence per watermark at generation time.
    #[serde(with = "hex_vec")]
    pub extracted_means: Vec<f64>,
    #[serde(with = "hex_vec")]
    pub nonextracted_means: Vec<f64>,
    pub protected_id: String,
    pub config_digest: String,
}

const KEYSET_FORMAT: &str = "rawmark-keyset";

impl KeySet {
    pub fn len(&self) -> usize {
        self.watermarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.watermarks.is_empty()
    }

    pub fn to_artifact(&self) -> Result<String> {
        artifact::encode(KEYSET_FORMAT, self)
    }

    pub fn from_artifact(text: &str) -> Result<KeySet> {
        let ks: KeySet = artifact::decode(KEYSET_FORMAT, text)?;
        let n = ks.watermarks.len();
        if [ks.labels.len(), ks.source_indices.len(), ks.extracted_means.len(), ks.nonextracted_means.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Format("key-set columns have different lengths".into()));
        }
        Ok(ks)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_artifact()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<KeySet> {
        KeySet::from_artifact(&std::fs::read_to_string(path)?)
    }
}

/// One scored candidate, as seen by the selection step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub source_index: usize,
    pub extracted_mean: f64,
    pub nonextracted_mean: f64,
}

impl Candidate {
    pub fn gap(&self) -> f64 {
        (self.extracted_mean - self.nonextracted_mean).abs()
    }
}

/// Positions (into `candidates`) of the `n` largest gaps, largest first,
/// ties broken by ascending source index.
pub fn select_watermarks(candidates: &[Candidate], n: usize) -> Result<Vec<usize>> {
    if n > candidates.len() {
        return Err(Error::InsufficientCandidates { requested: n, available: candidates.len() });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&candidates[a], &candidates[b]);
        cb.gap().total_cmp(&ca.gap()).then(ca.source_index.cmp(&cb.source_index))
    });
    order.truncate(n);
    Ok(order)
}

fn mean_confidence(models: &[Model], inputs: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    let per_model = models
        .par_iter()
        .map(|m| -> Result<Vec<f64>> {
            inputs.iter().zip(labels).map(|(x, &y)| m.confidences(x).map(|c| c[y])).collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..inputs.len()).map(|i| per_model.iter().map(|row| row[i]).sum::<f64>() / models.len() as f64).collect())
}

/// Builds a key-set of `cfg.size` watermarks for `protected`.
pub fn generate_keyset(
    protected: &Model,
    extracted: &[Model],
    nonextracted: &[Model],
    data: &Dataset,
    cfg: &KeygenConfig,
) -> Result<KeySet> {
    if extracted.is_empty() || nonextracted.is_empty() {
        return Err(Error::Input("key-set generation needs non-empty extracted and non-extracted populations".into()));
    }
    if data.dims() != protected.input_dim() {
        return Err(Error::Input(format!(
            "data has {} features, protected model expects {}",
            data.dims(),
            protected.input_dim()
        )));
    }
    let predictions = protected.predict(&data.features)?;
    let candidates: Vec<usize> = match cfg.source {
        CandidateSource::Misclassifications => (0..data.len()).filter(|&i| predictions[i] != data.labels[i]).collect(),
        CandidateSource::Disagreements => {
            let others = nonextracted.par_iter().map(|m| m.predict(&data.features)).collect::<Result<Vec<_>>>()?;
            (0..data.len()).filter(|&i| others.iter().any(|row| row[i] != predictions[i])).collect()
        }
    };
    if candidates.is_empty() {
        return Err(Error::NoWatermarkMaterial);
    }

    let bim_cfg = BimConfig { mode: BimMode::Targeted, ..cfg.bim.clone() };
    let inputs: Vec<Vec<f64>> = candidates.iter().map(|&i| data.features[i].clone()).collect();
    let targets: Vec<usize> = candidates.iter().map(|&i| predictions[i]).collect();
    let perturbed = bim_batch(protected, &inputs, &targets, &bim_cfg)?;
    let post = protected.predict(&perturbed)?;

    let keep: Vec<usize> = (0..candidates.len())
        .filter(|&k| cfg.source != CandidateSource::Misclassifications || post[k] != data.labels[candidates[k]])
        .collect();
    if keep.is_empty() {
        return Err(Error::NoWatermarkMaterial);
    }
    let kept_inputs: Vec<Vec<f64>> = keep.iter().map(|&k| perturbed[k].clone()).collect();
    let kept_labels: Vec<usize> = keep.iter().map(|&k| post[k]).collect();
    let conf_e = mean_confidence(extracted, &kept_inputs, &kept_labels)?;
    let conf_ne = mean_confidence(nonextracted, &kept_inputs, &kept_labels)?;
    let scored: Vec<Candidate> = keep
        .iter()
        .enumerate()
        .map(|(j, &k)| Candidate {
            source_index: candidates[k],
            extracted_mean: conf_e[j],
            nonextracted_mean: conf_ne[j],
        })
        .collect();
    let chosen = select_watermarks(&scored, cfg.size)?;

    Ok(KeySet {
        watermarks: chosen.iter().map(|&j| kept_inputs[j].clone()).collect(),
        labels: chosen.iter().map(|&j| kept_labels[j]).collect(),
        source_indices: chosen.iter().map(|&j| scored[j].source_index).collect(),
        extracted_means: chosen.iter().map(|&j| conf_e[j]).collect(),
        nonextracted_means: chosen.iter().map(|&j| conf_ne[j]).collect(),
        protected_id: protected.id().to_owned(),
        config_digest: artifact::digest(cfg)?,
    })
}

/// Softmax probability `model` assigns to each watermark's label.
pub fn confidence_profile(model: &Model, keyset: &KeySet) -> Result<Vec<f64>> {
    if let Some(w) = keyset.watermarks.first() {
        if w.len() != model.input_dim() {
            return Err(Error::Input(format!(
                "watermarks have {} features, model {} expects {}",
                w.len(),
                model.id(),
                model.input_dim()
            )));
        }
    }
    keyset
        .watermarks
        .iter()
        .zip(&keyset.labels)
        .map(|(x, &y)| {
            if y >= model.classes() {
                return Err(Error::Input(format!("watermark label {y} out of range for {} classes", model.classes())));
            }
            model.confidences(x).map(|c| c[y])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    #[default]
    Lr,
    Gnb,
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Lr => "lr",
            ClassifierKind::Gnb => "gnb",
        })
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(ClassifierKind::Lr),
            "gnb" => Ok(ClassifierKind::Gnb),
            other => Err(Error::Config(format!("unknown classifier kind {other:?} (expected lr or gnb)"))),
        }
    }
}

/// A binary classifier over one scalar confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WatermarkClassifier {
    /// `P(extracted | x) = sigmoid(weight * x + bias)`.
    Logistic {
        #[serde(with = "hex_f64")]
        weight: f64,
        #[serde(with = "hex_f64")]
        bias: f64,
    },
    GaussianNb {
        extracted: GaussianClass,
        nonextracted: GaussianClass,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianClass {
    #[serde(with = "hex_f64")]
    pub mean: f64,
    #[serde(with = "hex_f64")]
    pub variance: f64,
    #[serde(with = "hex_f64")]
    pub prior: f64,
}

impl GaussianClass {
    fn log_joint(&self, x: f64) -> f64 {
        let d = x - self.mean;
        self.prior.ln() - 0.5 * (2.0 * std::f64::consts::PI * self.variance).ln() - d * d / (2.0 * self.variance)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl WatermarkClassifier {
    pub fn probability_extracted(&self, x: f64) -> f64 {
        match self {
            WatermarkClassifier::Logistic { weight, bias } => sigmoid(weight * x + bias),
            WatermarkClassifier::GaussianNb { extracted, nonextracted } => {
                sigmoid(extracted.log_joint(x) - nonextracted.log_joint(x))
            }
        }
    }

    /// Ties count as extracted.
    pub fn is_extracted(&self, x: f64) -> bool {
        match self {
            WatermarkClassifier::Logistic { weight, bias } => weight * x + bias >= 0.0,
            WatermarkClassifier::GaussianNb { extracted, nonextracted } => {
                extracted.log_joint(x) >= nonextracted.log_joint(x)
            }
        }
    }
}

fn check_two_classes(samples: &[f64], extracted: &[bool]) -> Result<()> {
    if samples.len() != extracted.len() {
        return Err(Error::Input(format!("{} samples but {} labels", samples.len(), extracted.len())));
    }
    if let Some(v) = samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite sample {v}")));
    }
    if !extracted.iter().any(|&e| e) || extracted.iter().all(|&e| e) {
        return Err(Error::Input("both classes must be present".into()));
    }
    Ok(())
}

/// Mean logistic loss plus `LR_L2 / 2 * w^2`.
fn lr_objective(samples: &[f64], extracted: &[bool], w: f64, b: f64) -> f64 {
    let n = samples.len() as f64;
    let data: f64 = samples
        .iter()
        .zip(extracted)
        .map(|(&x, &y)| {
            let z = w * x + b;
            softplus(z) - if y { z } else { 0.0 }
        })
        .sum();
    data / n + 0.5 * LR_L2 * w * w
}

/// L2-regularized logistic regression (the bias is not penalized), fitted by
/// damped Newton until the gradient norm is below [`LR_TOLERANCE`].
pub fn fit_lr(samples: &[f64], extracted: &[bool]) -> Result<WatermarkClassifier> {
    check_two_classes(samples, extracted)?;
    let n = samples.len() as f64;
    let (mut w, mut b) = (0.0, 0.0);
    for _ in 0..LR_MAX_ITERATIONS {
        let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in samples.iter().zip(extracted) {
            let p = sigmoid(w * x + b);
            let r = p - if y { 1.0 } else { 0.0 };
            let s = p * (1.0 - p);
            gw += r * x;
            gb += r;
            hww += s * x * x;
            hwb += s * x;
            hbb += s;
        }
        gw = gw / n + LR_L2 * w;
        gb /= n;
        let (hww, hwb, hbb) = (hww / n + LR_L2, hwb / n, hbb / n);
        if gw.hypot(gb) < LR_TOLERANCE {
            return Ok(WatermarkClassifier::Logistic { weight: w, bias: b });
        }
        let det = hww * hbb - hwb * hwb;
        let (mut dw, mut db) = if det > 0.0 && det.is_finite() {
            (-(hbb * gw - hwb * gb) / det, -(hww * gb - hwb * gw) / det)
        } else {
            (-gw, -gb)
        };
        let slope = gw * dw + gb * db;
        if slope >= 0.0 {
            (dw, db) = (-gw, -gb);
        }
        let slope = gw * dw + gb * db;
        let current = lr_objective(samples, extracted, w, b);
        let mut t = 1.0;
        while lr_objective(samples, extracted, w + t * dw, b + t * db) > current + 1e-4 * t * slope && t > 1e-12 {
            t *= 0.5;
        }
        w += t * dw;
        b += t * db;
    }
    Err(Error::Input(format!("logistic regression did not converge in {LR_MAX_ITERATIONS} Newton steps")))
}

/// Gaussian naive Bayes with empirical priors and population variances
/// floored at [`GNB_VARIANCE_FLOOR`].
pub fn fit_gnb(samples: &[f64], extracted: &[bool]) -> Result<WatermarkClassifier> {
    check_two_classes(samples, extracted)?;
    let class = |want: bool| {
        let xs: Vec<f64> = samples.iter().zip(extracted).filter(|(_, &e)| e == want).map(|(&x, _)| x).collect();
        let k = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / k;
        let variance = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k;
        GaussianClass { mean, variance: variance.max(GNB_VARIANCE_FLOOR), prior: k / samples.len() as f64 }
    };
    Ok(WatermarkClassifier::GaussianNb { extracted: class(true), nonextracted: class(false) })
}

fn fit(kind: ClassifierKind, samples: &[f64], extracted: &[bool]) -> Result<WatermarkClassifier> {
    match kind {
        ClassifierKind::Lr => fit_lr(samples, extracted),
        ClassifierKind::Gnb => fit_gnb(samples, extracted),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationModel {
    pub kind: ClassifierKind,
    /// Index-aligned with the key-set's watermarks.
    pub classifiers: Vec<WatermarkClassifier>,
    pub keyset_digest: String,
}

const VERIFIER_FORMAT: &str = "rawmark-verifier";

impl VerificationModel {
    pub fn len(&self) -> usize {
        self.classifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classifiers.is_empty()
    }

    pub fn to_artifact(&self) -> Result<String> {
        artifact::encode(VERIFIER_FORMAT, self)
    }

    pub fn from_artifact(text: &str) -> Result<VerificationModel> {
        artifact::decode(VERIFIER_FORMAT, text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_artifact()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<VerificationModel> {
        VerificationModel::from_artifact(&std::fs::read_to_string(path)?)
    }
}

/// Fits one classifier per watermark on the populations' confidence profiles.
pub fn build_verifier(
    extracted: &[Model],
    nonextracted: &[Model],
    keyset: &KeySet,
    kind: ClassifierKind,
) -> Result<VerificationModel> {
    if extracted.is_empty() || nonextracted.is_empty() {
        return Err(Error::Input("verifier fitting needs non-empty extracted and non-extracted populations".into()));
    }
    let profiles = extracted
        .par_iter()
        .chain(nonextracted.par_iter())
        .map(|m| confidence_profile(m, keyset))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = (0..profiles.len()).map(|i| i < extracted.len()).collect();
    let classifiers = (0..keyset.len())
        .into_par_iter()
        .map(|w| {
            let samples: Vec<f64> = profiles.iter().map(|p| p[w]).collect();
            fit(kind, &samples, &labels).map_err(|e| Error::Fit { index: w, reason: e.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerificationModel { kind, classifiers, keyset_digest: artifact::digest(keyset)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Fraction of watermarks classified as extracted.
    pub score: f64,
    pub decisions: Vec<bool>,
    pub confidences: Vec<f64>,
}

impl Verdict {
    pub fn from_decisions(decisions: Vec<bool>, confidences: Vec<f64>) -> Verdict {
        let hits = decisions.iter().filter(|&&d| d).count();
        let score = if decisions.is_empty() { 0.0 } else { hits as f64 / decisions.len() as f64 };
        Verdict { score, decisions, confidences }
    }
}

pub fn verify(suspect: &Model, verifier: &VerificationModel, keyset: &KeySet) -> Result<Verdict> {
    if verifier.len() != keyset.len() {
        return Err(Error::Input(format!(
            "verifier has {} classifiers but the key-set has {} watermarks",
            verifier.len(),
            keyset.len()
        )));
    }
    let profile = confidence_profile(suspect, keyset)?;
    let decisions = verifier.classifiers.iter().zip(&profile).map(|(c, &x)| c.is_extracted(x)).collect();
    Ok(Verdict::from_decisions(decisions, profile))
}
