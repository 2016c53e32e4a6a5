//! Evaluation configuration, read from TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::BimConfig;
use crate::artifact;
use crate::attacks::{AttackKind, BlurConfig, ExtractionConfig};
use crate::data::GenSpec;
use crate::error::{Error, Result};
use crate::nnet::{Families, FamilyId, ModelSpec, TrainConfig};
use crate::watermark::{CandidateSource, ClassifierKind, KeygenConfig};

/// Keygen BIM budget. Small on purpose: larger budgets push watermarks deep
/// into the protected model's region, where independent models of other
/// families also become confident and the verifier loses its margin.
pub const KEYGEN_EPSILON: f64 = 0.02;

/// Which blurring step, if any, follows an extraction. Strengths come from
/// [`BlurDefaults`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlurMethod {
    Pruning,
    Quantization,
}

/// An extraction attack optionally followed by blurring, written `RET`,
/// `WP(DIS)`, `WQ(RET)` and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AttackRecipe {
    pub attack: AttackKind,
    pub blur: Option<BlurMethod>,
}

impl AttackRecipe {
    pub const fn plain(attack: AttackKind) -> AttackRecipe {
        AttackRecipe { attack, blur: None }
    }
}

impl fmt::Display for AttackRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.blur {
            None => write!(f, "{}", self.attack),
            Some(BlurMethod::Pruning) => write!(f, "WP({})", self.attack),
            Some(BlurMethod::Quantization) => write!(f, "WQ({})", self.attack),
        }
    }
}

impl FromStr for AttackRecipe {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let Some(open) = s.find('(') else {
            return Ok(AttackRecipe::plain(s.parse()?));
        };
        let inner = s[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| Error::Config(format!("unbalanced parentheses in attack {s:?}")))?;
        let blur = match s[..open].trim().to_ascii_uppercase().as_str() {
            "WP" => BlurMethod::Pruning,
            "WQ" => BlurMethod::Quantization,
            other => return Err(Error::Config(format!("unknown blurring method {other:?} in {s:?}"))),
        };
        Ok(AttackRecipe { attack: inner.parse()?, blur: Some(blur) })
    }
}

impl TryFrom<String> for AttackRecipe {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AttackRecipe> for String {
    fn from(r: AttackRecipe) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionDefaults {
    pub query_budget_fraction: f64,
    pub distill_temperature: f64,
    pub frozen_layers: usize,
    pub copycat_probes: usize,
    /// Surrogate family for every attack except cross-architecture retraining.
    pub surrogate_family: FamilyId,
    pub cross_arch_family: FamilyId,
}

impl Default for ExtractionDefaults {
    fn default() -> Self {
        ExtractionDefaults {
            query_budget_fraction: 0.5,
            distill_temperature: 2.0,
            frozen_layers: 1,
            copycat_probes: 1000,
            surrogate_family: FamilyId::A,
            cross_arch_family: FamilyId::C,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlurDefaults {
    pub sparsity: f64,
    pub bits: u32,
}

impl Default for BlurDefaults {
    fn default() -> Self {
        BlurDefaults { sparsity: 0.5, bits: 8 }
    }
}

impl BlurDefaults {
    pub fn config(&self, method: BlurMethod) -> BlurConfig {
        match method {
            BlurMethod::Pruning => BlurConfig::WeightPruning { sparsity: self.sparsity },
            BlurMethod::Quantization => BlurConfig::WeightQuantization { bits: self.bits },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSizes {
    pub train_extracted: usize,
    pub train_nonextracted: usize,
    pub test_extracted: usize,
    pub test_nonextracted: usize,
}

impl Default for PopulationSizes {
    fn default() -> Self {
        PopulationSizes { train_extracted: 10, train_nonextracted: 10, test_extracted: 6, test_nonextracted: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub master_seed: u64,
    pub data: GenSpec,
    /// Share of the generated data held out; key-sets are mined from it.
    pub test_fraction: f64,
    pub families: Families,
    pub protected_family: FamilyId,
    /// Used for every model; per-model seeds are derived from `master_seed`.
    pub train: TrainConfig,
    pub extraction: ExtractionDefaults,
    pub seen_attacks: Vec<AttackRecipe>,
    pub unseen_attacks: Vec<AttackRecipe>,
    pub populations: PopulationSizes,
    pub repetitions: usize,
    /// Cycled through when building non-extracted populations.
    pub nonextracted_families: Vec<FamilyId>,
    pub classifier: ClassifierKind,
    pub keygen: KeygenConfig,
    pub blur: BlurDefaults,
    /// Reject configs whose seen and unseen attack lists overlap.
    pub strict_unseen: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            master_seed: 7,
            data: GenSpec::default(),
            test_fraction: 0.5,
            families: Families::default(),
            protected_family: FamilyId::A,
            train: TrainConfig::default(),
            extraction: ExtractionDefaults::default(),
            seen_attacks: vec![AttackRecipe::plain(AttackKind::Retraining)],
            unseen_attacks: vec![AttackRecipe::plain(AttackKind::Retraining)],
            populations: PopulationSizes::default(),
            repetitions: 5,
            nonextracted_families: vec![FamilyId::A, FamilyId::B, FamilyId::C],
            classifier: ClassifierKind::Gnb,
            keygen: KeygenConfig {
                size: 32,
                bim: BimConfig::with_budget(KEYGEN_EPSILON, 20),
                source: CandidateSource::Misclassifications,
            },
            blur: BlurDefaults::default(),
            strict_unseen: false,
        }
    }
}

impl EvaluationConfig {
    pub fn from_toml(text: &str) -> Result<EvaluationConfig> {
        let cfg: EvaluationConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EvaluationConfig> {
        EvaluationConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Short content hash used to tag output files.
    pub fn digest(&self) -> Result<String> {
        artifact::digest(self)
    }

    pub fn surrogate_spec(&self, attack: AttackKind) -> ModelSpec {
        let family = match attack {
            AttackKind::CrossArchRetraining => self.extraction.cross_arch_family,
            _ => self.extraction.surrogate_family,
        };
        self.families.spec(family, self.data.dims, self.data.classes)
    }

    pub fn extraction_config(&self, attack: AttackKind, seed: u64) -> ExtractionConfig {
        ExtractionConfig {
            kind: attack,
            query_budget_fraction: self.extraction.query_budget_fraction,
            surrogate_spec: self.surrogate_spec(attack),
            train_cfg: self.train.clone().with_seed(seed),
            distill_temperature: (attack == AttackKind::Distillation).then_some(self.extraction.distill_temperature),
            frozen_layers: (attack == AttackKind::TransferLearning).then_some(self.extraction.frozen_layers),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.keygen.bim.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        let p = &self.populations;
        if [p.train_extracted, p.train_nonextracted, p.test_extracted, p.test_nonextracted].contains(&0) {
            return Err(Error::Config("population sizes must be positive".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        if self.keygen.size == 0 {
            return Err(Error::Config("key-set size must be positive".into()));
        }
        if self.seen_attacks.is_empty() || self.unseen_attacks.is_empty() {
            return Err(Error::Config("seen and unseen attack lists must be non-empty".into()));
        }
        if self.nonextracted_families.is_empty() {
            return Err(Error::Config("nonextracted_families must be non-empty".into()));
        }
        if self.strict_unseen {
            if let Some(r) = self.unseen_attacks.iter().find(|r| self.seen_attacks.contains(r)) {
                return Err(Error::Config(format!("attack {r} is both seen and unseen")));
            }
        }
        for recipe in self.seen_attacks.iter().chain(&self.unseen_attacks) {
            self.extraction_config(recipe.attack, 0).validate()?;
            if let Some(m) = recipe.blur {
                self.blur.config(m).validate()?;
            }
        }
        if self.extraction.copycat_probes == 0 {
            return Err(Error::Config("copycat_probes must be positive".into()));
        }
        Ok(())
    }
}
