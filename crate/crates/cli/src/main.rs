//! `rawmark` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rawmark::adversarial::BimConfig;
use rawmark::attacks::{blur, BlurConfig};
use rawmark::boundary::{run_strategy_analysis, write_subset_table, Strategy};
use rawmark::harness::{
    dump_confidences, export_report, run_raw_evaluation, run_recipe, train_fresh, write_confidence_dump, AttackRecipe,
    EvaluationConfig, Workspace,
};
use rawmark::nnet::{FamilyId, Model};
use rawmark::rng::derive_seed;
use rawmark::watermark::{build_verifier, generate_keyset, verify, ClassifierKind, KeySet, VerificationModel};
use rawmark::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "rawmark", version, about = "Seed-derived decision-boundary watermarks for classifiers")]
struct Cli {
    /// TOML evaluation config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    results: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Populations {
    /// Extracted model files.
    #[arg(long, num_args = 1.., required = true)]
    extracted: Vec<PathBuf>,
    /// Non-extracted model files.
    #[arg(long, num_args = 1.., required = true)]
    nonextracted: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train independently seeded models on the configured data.
    TrainPopulation {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value = "A")]
        family: FamilyId,
        /// Distinguishes the seeds of separate populations.
        #[arg(long, default_value = "population")]
        tag: String,
    },
    /// Extract a surrogate from a victim model, optionally blurred (e.g. `WP(RET)`).
    Extract {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        attack: AttackRecipe,
        #[arg(long, default_value_t = 0)]
        attack_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune or quantize a model.
    Blur {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Disagreement, unique and transferable shares for every BIM strategy.
    Analyze {
        /// Protected models; trained from the config when omitted.
        #[arg(long, num_args = 1..)]
        protected: Vec<PathBuf>,
        /// One extracted partner per protected model, in the same order.
        #[arg(long, num_args = 1..)]
        partners: Vec<PathBuf>,
        /// Population size when training from the config.
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Generate a watermark key-set for a protected model.
    Keygen {
        #[arg(long)]
        protected: PathBuf,
        #[command(flatten)]
        populations: Populations,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the per-watermark classifiers.
    BuildVerifier {
        #[arg(long)]
        keyset: PathBuf,
        #[command(flatten)]
        populations: Populations,
        #[arg(long)]
        classifier: Option<ClassifierKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a suspect model against a key-set and verifier.
    Verify {
        #[arg(long)]
        suspect: PathBuf,
        #[arg(long)]
        verifier: PathBuf,
        #[arg(long)]
        keyset: PathBuf,
    },
    /// Run the full repeated evaluation and write the report CSVs.
    Evaluate,
    /// Write per-watermark confidences of two populations.
    DumpConfidences {
        #[arg(long)]
        keyset: PathBuf,
        #[command(flatten)]
        populations: Populations,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Context {
    cfg: EvaluationConfig,
    digest: String,
    results: PathBuf,
}

impl Context {
    fn output(&self, explicit: Option<PathBuf>, stem: &str, ext: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.results)?;
        Ok(explicit.unwrap_or_else(|| self.results.join(format!("{stem}_{}.{ext}", self.digest))))
    }

    fn workspace(&self) -> Result<Workspace> {
        Workspace::new(&self.cfg)
    }
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Model>> {
    paths.iter().map(Model::load).collect()
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut cfg = match &cli.config {
        Some(p) => EvaluationConfig::load(p)?,
        None => EvaluationConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    let ctx = Context { digest: cfg.digest()?, cfg, results: cli.results };

    match cli.command {
        Command::TrainPopulation { count, family, tag } => {
            let ws = ctx.workspace()?;
            let dir = ctx.results.join(format!("models_{}", ctx.digest));
            std::fs::create_dir_all(&dir)?;
            let train_path = ctx.output(None, "train", "csv")?;
            let test_path = ctx.output(None, "test", "csv")?;
            ws.train.save(&train_path)?;
            ws.test.save(&test_path)?;
            let mut files = Vec::new();
            for i in 0..count {
                let seed = derive_seed(ctx.cfg.master_seed, &format!("{tag}/{i}"));
                let model = train_fresh(&ctx.cfg, family, &ws.train, seed)?;
                let path = dir.join(format!("{}.json", model.id()));
                model.save(&path)?;
                files.push(json!({
                    "path": path_str(&path),
                    "test_accuracy": model.accuracy(&ws.test.features, &ws.test.labels)?,
                }));
            }
            Ok(json!({ "train": path_str(&train_path), "test": path_str(&test_path), "models": files }))
        }
        Command::Extract { victim, attack, attack_seed, out } => {
            let ws = ctx.workspace()?;
            let victim = Model::load(victim)?;
            let model = run_recipe(&ctx.cfg, &ws, &victim, attack, attack_seed)?;
            let path = ctx.output(out, &model.id().replace('+', "_"), "json")?;
            model.save(&path)?;
            Ok(json!({
                "model": path_str(&path),
                "id": model.id(),
                "test_accuracy": model.accuracy(&ws.test.features, &ws.test.labels)?,
            }))
        }
        Command::Blur { model, sparsity, bits, out } => {
            let cfg = match (sparsity, bits) {
                (Some(s), None) => BlurConfig::WeightPruning { sparsity: s },
                (None, Some(b)) => BlurConfig::WeightQuantization { bits: b },
                _ => return Err(Error::Config("give exactly one of --sparsity or --bits".into())),
            };
            let blurred = blur(&Model::load(model)?, &cfg)?;
            let path = ctx.output(out, &blurred.id().replace('+', "_"), "json")?;
            blurred.save(&path)?;
            Ok(json!({ "model": path_str(&path), "id": blurred.id() }))
        }
        Command::Analyze { protected, partners, count } => {
            let ws = ctx.workspace()?;
            let (protected, partners) = if protected.is_empty() {
                let retraining = AttackRecipe::plain(rawmark::attacks::AttackKind::Retraining);
                let mut ps = Vec::new();
                let mut es = Vec::new();
                for i in 0..count {
                    let seed = derive_seed(ctx.cfg.master_seed, &format!("analysis/{i}"));
                    let p = train_fresh(&ctx.cfg, ctx.cfg.protected_family, &ws.train, seed)?;
                    es.push(run_recipe(&ctx.cfg, &ws, &p, retraining, derive_seed(seed, "partner"))?);
                    ps.push(p);
                }
                (ps, es)
            } else {
                (load_models(&protected)?, load_models(&partners)?)
            };
            let reports = Strategy::ALL
                .iter()
                .map(|&s| run_strategy_analysis(&protected, &partners, &ws.test, s, &BimConfig::default()))
                .collect::<Result<Vec<_>>>()?;
            let path = ctx.output(None, "subsets", "csv")?;
            write_subset_table(&reports, &path)?;
            Ok(json!({ "table": path_str(&path), "strategies": reports }))
        }
        Command::Keygen { protected, populations, size, out } => {
            let ws = ctx.workspace()?;
            let protected = Model::load(protected)?;
            let mut keygen = ctx.cfg.keygen.clone();
            if let Some(n) = size {
                keygen.size = n;
            }
            let ks = generate_keyset(
                &protected,
                &load_models(&populations.extracted)?,
                &load_models(&populations.nonextracted)?,
                &ws.test,
                &keygen,
            )?;
            let path = ctx.output(out, "keyset", "json")?;
            ks.save(&path)?;
            Ok(json!({ "keyset": path_str(&path), "size": ks.len() }))
        }
        Command::BuildVerifier { keyset, populations, classifier, out } => {
            let ks = KeySet::load(keyset)?;
            let verifier = build_verifier(
                &load_models(&populations.extracted)?,
                &load_models(&populations.nonextracted)?,
                &ks,
                classifier.unwrap_or(ctx.cfg.classifier),
            )?;
            let path = ctx.output(out, "verifier", "json")?;
            verifier.save(&path)?;
            Ok(json!({ "verifier": path_str(&path), "classifiers": verifier.len() }))
        }
        Command::Verify { suspect, verifier, keyset } => {
            let verdict = verify(&Model::load(suspect)?, &VerificationModel::load(verifier)?, &KeySet::load(keyset)?)?;
            Ok(json!({
                "score": verdict.score,
                "extracted": verdict.score >= 0.5,
                "decisions": verdict.decisions,
            }))
        }
        Command::Evaluate => {
            let report = run_raw_evaluation(&ctx.cfg)?;
            let [roc, summary, scores] = export_report(&report, ctx.output(None, "roc", "csv")?)?;
            let mut dumps = Vec::new();
            for d in &report.dumps {
                let path = ctx.output(None, &format!("confidences_rep{}", d.repetition), "csv")?;
                write_confidence_dump(d, &path)?;
                dumps.push(path_str(&path));
            }
            let config_path = ctx.output(None, "config", "toml")?;
            std::fs::write(&config_path, ctx.cfg.to_toml()?)?;
            Ok(json!({
                "auc": report.roc.auc,
                "tpr_at_fpr0": report.roc.tpr_at_fpr0,
                "fpr_at_tpr1": report.roc.fpr_at_tpr1,
                "repetition_aucs": report.repetition_aucs,
                "mean_extracted_score": report.mean_extracted_score,
                "mean_nonextracted_score": report.mean_nonextracted_score,
                "sign_test_p": report.sign_test.p_value,
                "files": [path_str(&roc), path_str(&summary), path_str(&scores), path_str(&config_path)],
                "confidence_dumps": dumps,
            }))
        }
        Command::DumpConfidences { keyset, populations, out } => {
            let ks = KeySet::load(keyset)?;
            let path = ctx.output(out, "confidences", "csv")?;
            dump_confidences(
                &load_models(&populations.extracted)?,
                &load_models(&populations.nonextracted)?,
                &ks,
                &path,
            )?;
            Ok(json!({ "dump": path_str(&path), "rows": ks.len() }))
        }
    }
}

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            error_line("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("{}", serde_json::to_string_pretty(&out).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
