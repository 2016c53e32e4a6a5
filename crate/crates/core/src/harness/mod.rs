//! End-to-end evaluation: populations, key-sets, verification, ROC.
//!
//! Each repetition trains a protected model, builds extracted ("seen"
//! attacks) and independent training populations, generates a key-set and
//! verifier, then scores fresh test populations (extracted with the "unseen"
//! attacks, plus new independent models). Everything is derived from the
//! config's master seed.

mod config;
mod eval;
mod report;
mod roc;

pub use config::{AttackRecipe, BlurDefaults, BlurMethod, EvaluationConfig, ExtractionDefaults, PopulationSizes};
pub use eval::{
    informed_attack_pipeline, ordering_check, population_profiles, run_raw_evaluation, run_recipe, run_repetition,
    train_fresh, ConfidenceDump, EvaluationReport, OrderingCheck, RepetitionOutcome, ScoreRecord, Workspace,
};
pub use report::{dump_confidences, export_report, read_roc_auc, write_confidence_dump};
pub use roc::{roc_auc, sign_test, trapezoid_area, RocCurve, RocPoint, SignTest};
