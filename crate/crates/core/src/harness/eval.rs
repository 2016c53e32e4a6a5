//! The repeated train/extract/keygen/verify loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{blur, extract, AttackKind, BlurConfig, ExtractionConfig};
use crate::data::{self, Dataset, FEATURE_RANGE};
use crate::error::{Error, Result};
use crate::harness::config::{AttackRecipe, EvaluationConfig};
use crate::harness::roc::{roc_auc, sign_test, RocCurve, SignTest};
use crate::nnet::{train, FamilyId, Model};
use crate::rng::derive_seed;
use crate::watermark::{build_verifier, confidence_profile, generate_keyset, verify, KeySet, VerificationModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub repetition: usize,
    pub model_id: String,
    pub extracted: bool,
    /// Attack recipe for extracted models, spec family otherwise.
    pub origin: String,
    pub score: f64,
}

/// Per-watermark confidences of the test populations for one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDump {
    pub repetition: usize,
    pub labels: Vec<usize>,
    /// One profile (length = key-set size) per model.
    pub extracted: Vec<Vec<f64>>,
    pub nonextracted: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_digest: String,
    /// Sorted by repetition, then model id.
    pub scores: Vec<ScoreRecord>,
    pub repetition_aucs: Vec<f64>,
    /// Pooled over all repetitions.
    pub roc: RocCurve,
    pub sign_test: SignTest,
    pub mean_extracted_score: f64,
    pub mean_nonextracted_score: f64,
    pub dumps: Vec<ConfidenceDump>,
}

impl EvaluationReport {
    pub fn positive_scores(&self) -> Vec<f64> {
        self.scores.iter().filter(|s| s.extracted).map(|s| s.score).collect()
    }

    pub fn negative_scores(&self) -> Vec<f64> {
        self.scores.iter().filter(|s| !s.extracted).map(|s| s.score).collect()
    }
}

/// Everything one repetition built, for callers that want the artifacts.
#[derive(Debug, Clone)]
pub struct RepetitionOutcome {
    pub protected: Model,
    pub keyset: KeySet,
    pub verifier: VerificationModel,
    pub scores: Vec<ScoreRecord>,
    pub dump: ConfidenceDump,
}

/// Shared, repetition-independent inputs.
pub struct Workspace {
    pub train: Dataset,
    pub test: Dataset,
    /// Source task for transfer-learning pretrained models.
    pub pretrain: Dataset,
}

impl Workspace {
    pub fn new(cfg: &EvaluationConfig) -> Result<Workspace> {
        cfg.validate()?;
        let full = data::generate(&cfg.data, derive_seed(cfg.master_seed, "dataset"))?;
        let (train, test) = data::split(&full, cfg.test_fraction, derive_seed(cfg.master_seed, "split"))?;
        let pretrain = data::generate(&cfg.data, derive_seed(cfg.master_seed, "pretrain-dataset"))?;
        Ok(Workspace { train, test, pretrain })
    }
}

/// Fresh model of `family` trained on `data` with `seed` for both
/// initialization and batch order.
pub fn train_fresh(cfg: &EvaluationConfig, family: FamilyId, data: &Dataset, seed: u64) -> Result<Model> {
    let spec = cfg.families.spec(family, cfg.data.dims, cfg.data.classes);
    train(&Model::init(spec, seed)?, data, &cfg.train.clone().with_seed(seed))
}

/// Extraction followed by blurring; the provenance records both stages.
pub fn informed_attack_pipeline(
    victim: &Model,
    inputs: &[Vec<f64>],
    extraction: &ExtractionConfig,
    pretrained: Option<&Model>,
    blur_cfg: &BlurConfig,
) -> Result<Model> {
    blur(&extract(victim, inputs, extraction, pretrained)?, blur_cfg)
}

/// Builds the model an attacker following `recipe` would end up with.
pub fn run_recipe(
    cfg: &EvaluationConfig,
    ws: &Workspace,
    victim: &Model,
    recipe: AttackRecipe,
    seed: u64,
) -> Result<Model> {
    let extraction = cfg.extraction_config(recipe.attack, seed);
    let pretrained = match recipe.attack {
        AttackKind::TransferLearning => Some(train(
            &Model::init(extraction.surrogate_spec.clone(), derive_seed(seed, "pretrained"))?,
            &ws.pretrain,
            &cfg.train.clone().with_seed(derive_seed(seed, "pretrained")),
        )?),
        _ => None,
    };
    let probes;
    let inputs = match recipe.attack {
        AttackKind::Copycat => {
            probes = data::random_probe_inputs(
                cfg.extraction.copycat_probes,
                cfg.data.dims,
                FEATURE_RANGE,
                derive_seed(seed, "probes"),
            )?;
            &probes
        }
        _ => &ws.train.features,
    };
    match recipe.blur {
        None => extract(victim, inputs, &extraction, pretrained.as_ref()),
        Some(m) => informed_attack_pipeline(victim, inputs, &extraction, pretrained.as_ref(), &cfg.blur.config(m)),
    }
}

struct Population {
    models: Vec<Model>,
    origins: Vec<String>,
}

fn extracted_population(
    cfg: &EvaluationConfig,
    ws: &Workspace,
    victim: &Model,
    recipes: &[AttackRecipe],
    count: usize,
    tag: &str,
) -> Result<Population> {
    let models = (0..count)
        .into_par_iter()
        .map(|i| {
            run_recipe(cfg, ws, victim, recipes[i % recipes.len()], derive_seed(cfg.master_seed, &format!("{tag}/{i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let origins = (0..count).map(|i| recipes[i % recipes.len()].to_string()).collect();
    Ok(Population { models, origins })
}

fn independent_population(cfg: &EvaluationConfig, ws: &Workspace, count: usize, tag: &str) -> Result<Population> {
    let families = &cfg.nonextracted_families;
    let models = (0..count)
        .into_par_iter()
        .map(|i| {
            train_fresh(
                cfg,
                families[i % families.len()],
                &ws.train,
                derive_seed(cfg.master_seed, &format!("{tag}/{i}")),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let origins = (0..count).map(|i| format!("family-{}", families[i % families.len()])).collect();
    Ok(Population { models, origins })
}

/// One full offline + online round with a freshly seeded protected model.
pub fn run_repetition(cfg: &EvaluationConfig, ws: &Workspace, repetition: usize) -> Result<RepetitionOutcome> {
    let tag = |name: &str| format!("rep{repetition}/{name}");
    let protected = train_fresh(cfg, cfg.protected_family, &ws.train, derive_seed(cfg.master_seed, &tag("protected")))?;
    let p = &cfg.populations;
    let train_ext =
        extracted_population(cfg, ws, &protected, &cfg.seen_attacks, p.train_extracted, &tag("train-extracted"))?;
    let train_non = independent_population(cfg, ws, p.train_nonextracted, &tag("train-nonextracted"))?;
    let keyset = generate_keyset(&protected, &train_ext.models, &train_non.models, &ws.test, &cfg.keygen)?;
    let verifier = build_verifier(&train_ext.models, &train_non.models, &keyset, cfg.classifier)?;

    let test_ext =
        extracted_population(cfg, ws, &protected, &cfg.unseen_attacks, p.test_extracted, &tag("test-extracted"))?;
    let test_non = independent_population(cfg, ws, p.test_nonextracted, &tag("test-nonextracted"))?;
    let mut scores = Vec::new();
    let mut dump =
        ConfidenceDump { repetition, labels: keyset.labels.clone(), extracted: vec![], nonextracted: vec![] };
    for (pop, extracted) in [(&test_ext, true), (&test_non, false)] {
        for (model, origin) in pop.models.iter().zip(&pop.origins) {
            let verdict = verify(model, &verifier, &keyset)?;
            scores.push(ScoreRecord {
                repetition,
                model_id: model.id().to_owned(),
                extracted,
                origin: origin.clone(),
                score: verdict.score,
            });
            if extracted {
                dump.extracted.push(verdict.confidences);
            } else {
                dump.nonextracted.push(verdict.confidences);
            }
        }
    }
    Ok(RepetitionOutcome { protected, keyset, verifier, scores, dump })
}

/// Runs every repetition and aggregates the verdict scores.
pub fn run_raw_evaluation(cfg: &EvaluationConfig) -> Result<EvaluationReport> {
    let ws = Workspace::new(cfg)?;
    let outcomes = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| run_repetition(cfg, &ws, r).map_err(|e| Error::Repetition { repetition: r, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;
    let mut scores: Vec<ScoreRecord> = outcomes.iter().flat_map(|o| o.scores.iter().cloned()).collect();
    scores.sort_by(|a, b| (a.repetition, &a.model_id).cmp(&(b.repetition, &b.model_id)));

    let mut repetition_aucs = Vec::with_capacity(outcomes.len());
    for r in 0..cfg.repetitions {
        let pos: Vec<f64> = scores.iter().filter(|s| s.repetition == r && s.extracted).map(|s| s.score).collect();
        let neg: Vec<f64> = scores.iter().filter(|s| s.repetition == r && !s.extracted).map(|s| s.score).collect();
        repetition_aucs.push(roc_auc(&pos, &neg)?.auc);
    }
    let pos: Vec<f64> = scores.iter().filter(|s| s.extracted).map(|s| s.score).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.extracted).map(|s| s.score).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvaluationReport {
        config_digest: cfg.digest()?,
        roc: roc_auc(&pos, &neg)?,
        sign_test: sign_test(&repetition_aucs, 0.5),
        mean_extracted_score: mean(&pos),
        mean_nonextracted_score: mean(&neg),
        repetition_aucs,
        scores,
        dumps: outcomes.into_iter().map(|o| o.dump).collect(),
    })
}

/// Pooled AUCs when the verifier learns from `narrow` versus `wide` attack
/// sets, both tested on the configured unseen attacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub narrow_auc: f64,
    pub wide_auc: f64,
}

impl OrderingCheck {
    /// Whether training on more attacks did at least as well.
    pub fn holds(&self) -> bool {
        self.wide_auc >= self.narrow_auc
    }
}

pub fn ordering_check(cfg: &EvaluationConfig, narrow: &[AttackRecipe], wide: &[AttackRecipe]) -> Result<OrderingCheck> {
    let run = |seen: &[AttackRecipe]| {
        run_raw_evaluation(&EvaluationConfig { seen_attacks: seen.to_vec(), ..cfg.clone() }).map(|r| r.roc.auc)
    };
    Ok(OrderingCheck { narrow_auc: run(narrow)?, wide_auc: run(wide)? })
}

/// Profiles of each model on the key-set, for dumping.
pub fn population_profiles(models: &[Model], keyset: &KeySet) -> Result<Vec<Vec<f64>>> {
    models.par_iter().map(|m| confidence_profile(m, keyset)).collect()
}
