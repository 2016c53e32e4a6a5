//! Acceptance suite: one line per criterion, nonzero exit on any failure.
#![allow(clippy::field_reassign_with_default)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;
use rawmark::adversarial::{bim_batch, BimConfig};
use rawmark::attacks::{blur_prune, blur_quantize, extract, AttackKind};
use rawmark::boundary::{
    disagreement_confidence_shift, find_disagreements, find_transferable, find_unique_disagreements,
    run_strategy_analysis, PopulationPredictions, Strategy,
};
use rawmark::data::Dataset;
use rawmark::harness::{
    export_report, ordering_check, roc_auc, run_raw_evaluation, run_recipe, run_repetition, train_fresh, AttackRecipe,
    EvaluationConfig, Workspace,
};
use rawmark::nnet::{Activation, FamilyId, LossKind, Model, Targets};
use rawmark::rng::derive_seed;
use rawmark::watermark::{fit_gnb, fit_lr, generate_keyset, Candidate, KeygenConfig, WatermarkClassifier, LR_L2};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn recipes(list: &str) -> Vec<AttackRecipe> {
    list.split(',').map(|s| s.parse().unwrap()).collect()
}

fn gradient_correctness() -> Outcome {
    let mut r = rng(1);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for m in 0..20 {
        let input = r.random_range(2..6);
        let hidden: Vec<usize> = (0..r.random_range(1..3)).map(|_| r.random_range(3..7)).collect();
        let act = if m % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let classes = r.random_range(2..5);
        let model = random_model(&mut r, input, &hidden, act, classes, 1.0);
        // Keep relu units away from their kink, where differences are meaningless.
        let mut inputs = Vec::new();
        while inputs.len() < 3 {
            let x: Vec<f64> = (0..input).map(|_| r.random_range(-1.0..1.0)).collect();
            let pre = pre_activations(&model, &x);
            if pre[..pre.len() - 1].iter().flatten().all(|z| z.abs() > 1e-3) {
                inputs.push(x);
            }
        }
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..classes)).collect();
        let soft: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let v: Vec<f64> = (0..classes).map(|_| r.random_range(0.05..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|p| p / s).collect()
            })
            .collect();
        worst = worst.max(param_gradient_error(
            &model,
            &inputs,
            Targets::Hard(&labels),
            LossKind::HardLabelCrossEntropy,
            h,
        ));
        worst = worst.max(param_gradient_error(
            &model,
            &inputs,
            Targets::Soft(&soft),
            LossKind::SoftLabelCrossEntropy { temperature: 2.5 },
            h,
        ));
        for (x, &y) in inputs.iter().zip(&labels) {
            worst = worst.max(input_gradient_error(&model, x, y, h));
        }
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.3e}"))?;
    Ok(format!("max relative error {worst:.3e} over 20 models"))
}

fn tiny_config() -> EvaluationConfig {
    let mut cfg = EvaluationConfig::default();
    cfg.master_seed = 99;
    cfg.data.samples_per_class = 80;
    cfg.train.epochs = 10;
    cfg.populations.train_extracted = 3;
    cfg.populations.train_nonextracted = 3;
    cfg.populations.test_extracted = 2;
    cfg.populations.test_nonextracted = 2;
    cfg.repetitions = 2;
    cfg.keygen.size = 6;
    cfg.extraction.copycat_probes = 200;
    cfg.seen_attacks = recipes("RET,DIS,TRL");
    cfg.unseen_attacks = recipes("CAR,WP(RET),WQ(DIS),CPY");
    cfg
}

fn determinism() -> Outcome {
    let cfg = tiny_config();
    let ws = Workspace::new(&cfg).map_err(|e| e.to_string())?;
    let ws2 = Workspace::new(&cfg).map_err(|e| e.to_string())?;
    ensure(ws.train == ws2.train && ws.test == ws2.test && ws.pretrain == ws2.pretrain, "datasets differ")?;

    let a = train_fresh(&cfg, FamilyId::B, &ws.train, 5).unwrap();
    let b = train_fresh(&cfg, FamilyId::B, &ws.train, 5).unwrap();
    ensure(a.same_weights(&b) && a.provenance() == b.provenance(), "fresh training differs")?;
    for recipe in cfg.seen_attacks.iter().chain(&cfg.unseen_attacks) {
        let x = run_recipe(&cfg, &ws, &a, *recipe, 17).unwrap();
        let y = run_recipe(&cfg, &ws, &a, *recipe, 17).unwrap();
        ensure(x.same_weights(&y) && x.provenance() == y.provenance(), format!("{recipe} extraction differs"))?;
    }

    let population: Vec<Model> = (0..3).map(|s| train_fresh(&cfg, FamilyId::A, &ws.train, 100 + s).unwrap()).collect();
    let partners: Vec<Model> =
        population.iter().map(|m| run_recipe(&cfg, &ws, m, recipes("RET")[0], 7).unwrap()).collect();
    let bim = BimConfig::with_budget(0.3, 5);
    let s1 = run_strategy_analysis(&population, &partners, &ws.test, Strategy::Disagreements, &bim).unwrap();
    let s2 = run_strategy_analysis(&population, &partners, &ws.test, Strategy::Disagreements, &bim).unwrap();
    ensure(s1 == s2, "boundary report differs")?;

    let r1 = run_repetition(&cfg, &ws, 0).map_err(|e| e.to_string())?;
    let r2 = run_repetition(&cfg, &ws, 0).map_err(|e| e.to_string())?;
    ensure(r1.protected.same_weights(&r2.protected), "protected model differs")?;
    ensure(
        r1.keyset == r2.keyset && r1.keyset.to_artifact().unwrap() == r2.keyset.to_artifact().unwrap(),
        "key-set differs",
    )?;
    ensure(r1.verifier == r2.verifier, "verifier differs")?;

    let e1 = run_raw_evaluation(&cfg).map_err(|e| e.to_string())?;
    let e2 = run_raw_evaluation(&cfg).map_err(|e| e.to_string())?;
    ensure(e1 == e2, "evaluation report differs")?;
    let dir = tempfile::tempdir().unwrap();
    let f1 = export_report(&e1, dir.path().join("a.csv")).unwrap();
    let f2 = export_report(&e2, dir.path().join("b.csv")).unwrap();
    for (x, y) in f1.iter().zip(&f2) {
        ensure(std::fs::read(x).unwrap() == std::fs::read(y).unwrap(), "exported CSV differs")?;
    }
    Ok(format!("{} test scores, pooled AUC {:.3}", e1.scores.len(), e1.roc.auc))
}

struct Population {
    cfg: EvaluationConfig,
    ws: Workspace,
    protected: Vec<Model>,
}

fn population(size: usize) -> Population {
    let cfg = EvaluationConfig::default();
    let ws = Workspace::new(&cfg).unwrap();
    let protected = (0..size)
        .map(|i| {
            train_fresh(&cfg, FamilyId::A, &ws.train, derive_seed(cfg.master_seed, &format!("acceptance/{i}"))).unwrap()
        })
        .collect();
    Population { cfg, ws, protected }
}

fn subset_chain(pop: &PopulationPredictions, partners: &[Vec<usize>]) -> Result<(usize, usize, usize), String> {
    let dis = find_disagreements(pop).unwrap();
    let (mut unique_total, mut trans_total) = (0, 0);
    for (m, partner) in partners.iter().enumerate() {
        let unique = find_unique_disagreements(pop, m).unwrap();
        let trans = find_transferable(&unique, &pop.labels[m], partner, &pop.truth);
        ensure(unique.iter().all(|i| dis.contains(i)), format!("model {m}: unique not within disagreements"))?;
        ensure(trans.iter().all(|i| unique.contains(i)), format!("model {m}: transferable not within unique"))?;
        unique_total += unique.len();
        trans_total += trans.len();
    }
    Ok((dis.len(), unique_total, trans_total))
}

fn seed_uniqueness() -> Outcome {
    let p = population(10);
    let partners: Vec<Model> = p
        .protected
        .iter()
        .enumerate()
        .map(|(i, m)| {
            run_recipe(&p.cfg, &p.ws, m, AttackRecipe::plain(AttackKind::Retraining), 1000 + i as u64).unwrap()
        })
        .collect();
    let test = &p.ws.test;
    let pop = PopulationPredictions::from_models(&p.protected, &test.features, &test.labels).unwrap();
    let partner_labels: Vec<Vec<usize>> = partners.iter().map(|m| m.predict(&test.features).unwrap()).collect();
    subset_chain(&pop, &partner_labels)?;

    // Same chain on a BIM-perturbed copy of the set for the first model.
    let adv = bim_batch(&p.protected[0], &test.features, &pop.labels[0], &BimConfig::default()).unwrap();
    let pop_adv = PopulationPredictions::from_models(&p.protected, &adv, &test.labels).unwrap();
    let adv_partners: Vec<Vec<usize>> = partners.iter().map(|m| m.predict(&adv).unwrap()).collect();
    subset_chain(&pop_adv, &adv_partners)?;

    let mut lines = Vec::new();
    for strategy in Strategy::ALL {
        let r = run_strategy_analysis(&p.protected, &partners, test, strategy, &BimConfig::default()).unwrap();
        ensure(
            r.transferable_share <= r.unique_share && r.unique_share <= r.disagreement_share,
            format!("{strategy}: share ordering violated"),
        )?;
        if strategy == Strategy::None {
            ensure(r.disagreement_share > 0.0, "no disagreements")?;
            ensure(r.unique_share > 0.0, "no unique disagreements")?;
            ensure(r.transferable_share > 0.0, "no transferable disagreements")?;
        }
        lines.push(format!(
            "{strategy}: dis {:.3} uniq {:.4} trans {:.4} conf {:.2}",
            r.disagreement_share, r.unique_share, r.transferable_share, r.mean_transferable_confidence
        ));
    }
    Ok(lines.join("; "))
}

fn bim_strengthening() -> Outcome {
    let p = population(10);
    let (pre, post) =
        disagreement_confidence_shift(&p.protected, &p.ws.test, &BimConfig::with_budget(0.3, 20)).unwrap();
    ensure(post > pre, format!("confidence {pre:.3} -> {post:.3}"))?;
    Ok(format!("confidence on disagreements {pre:.3} -> {post:.3}"))
}

/// Recomputes a key-set from scratch with rank-based selection.
fn keyset_oracle(
    protected: &Model,
    ext: &[Model],
    non: &[Model],
    data: &Dataset,
    cfg: &KeygenConfig,
) -> (Vec<usize>, Vec<usize>) {
    let preds = protected.predict(&data.features).unwrap();
    let cand: Vec<usize> = (0..data.len()).filter(|&i| preds[i] != data.labels[i]).collect();
    let mut scored = Vec::new();
    let mut labels = Vec::new();
    for &i in &cand {
        let adv = rawmark::adversarial::bim(protected, &data.features[i], preds[i], &cfg.bim).unwrap();
        let label = protected.predict_one(&adv).unwrap();
        if label == data.labels[i] {
            continue;
        }
        let mean = |ms: &[Model]| ms.iter().map(|m| m.confidences(&adv).unwrap()[label]).sum::<f64>() / ms.len() as f64;
        scored.push(Candidate { source_index: i, extracted_mean: mean(ext), nonextracted_mean: mean(non) });
        labels.push(label);
    }
    let chosen = selection_by_rank(&scored, cfg.size.min(scored.len()));
    (chosen.iter().map(|&j| scored[j].source_index).collect(), chosen.iter().map(|&j| labels[j]).collect())
}

fn keyset_selection() -> Outcome {
    let mut r = rng(5);
    let mut checked = 0;
    for instance in 0..20 {
        let dims = r.random_range(2..5);
        let classes = r.random_range(2..5);
        let rows = r.random_range(10..=50);
        let data = Dataset {
            features: (0..rows).map(|_| (0..dims).map(|_| r.random_range(-1.0..1.0)).collect()).collect(),
            labels: (0..rows).map(|_| r.random_range(0..classes)).collect(),
            class_count: classes,
            name: format!("instance-{instance}"),
            seed: instance,
        };
        let protected = random_model(&mut r, dims, &[6], Activation::Tanh, classes, 1.5);
        let ext: Vec<Model> =
            (0..3).map(|_| random_model(&mut r, dims, &[5], Activation::Relu, classes, 1.5)).collect();
        let non: Vec<Model> =
            (0..2).map(|_| random_model(&mut r, dims, &[5], Activation::Tanh, classes, 1.5)).collect();
        let mut cfg = KeygenConfig { size: 1, bim: BimConfig::with_budget(0.2, 5), ..KeygenConfig::default() };
        let (all, _) = keyset_oracle(&protected, &ext, &non, &data, &KeygenConfig { size: usize::MAX, ..cfg.clone() });
        if all.is_empty() {
            continue;
        }
        cfg.size = r.random_range(1..=all.len());
        let ks = generate_keyset(&protected, &ext, &non, &data, &cfg).unwrap();
        let (want_idx, want_labels) = keyset_oracle(&protected, &ext, &non, &data, &cfg);
        ensure(ks.source_indices == want_idx, format!("instance {instance}: selection differs"))?;
        ensure(ks.labels == want_labels, format!("instance {instance}: labels differ"))?;
        cfg.size = all.len() + 1;
        ensure(generate_keyset(&protected, &ext, &non, &data, &cfg).is_err(), "oversized request accepted")?;
        checked += 1;
    }
    ensure(checked == 20, format!("only {checked} instances had candidates"))?;
    Ok(format!("{checked} instances match the rank oracle"))
}

fn classifier_oracles() -> Outcome {
    let mut r = rng(9);
    let mut instances: Vec<(Vec<f64>, Vec<bool>)> = vec![
        (vec![0.9, 0.8, 0.85, 0.1, 0.2, 0.15], vec![true, true, true, false, false, false]),
        (vec![0.6, 0.4, 0.55, 0.5, 0.45, 0.3, 0.7], vec![true, false, true, false, true, false, true]),
    ];
    for k in 0..6 {
        let separable = k % 2 == 0;
        let xs: Vec<f64> = (0..20).map(|_| r.random_range(0.0..1.0)).collect();
        let ys: Vec<bool> =
            xs.iter().map(|&x| if separable { x > 0.5 } else { r.random_range(0.0..1.0) < x }).collect();
        if ys.iter().all(|&y| y) || !ys.iter().any(|&y| y) {
            continue;
        }
        instances.push((xs, ys));
    }
    let mut lr_worst: f64 = 0.0;
    for (xs, ys) in &instances {
        let WatermarkClassifier::Logistic { weight, bias } = fit_lr(xs, ys).unwrap() else { unreachable!() };
        let (w, b) = lr_oracle(xs, ys, LR_L2);
        lr_worst = lr_worst.max((weight - w).abs()).max((bias - b).abs());
    }
    ensure(lr_worst < 1e-4, format!("LR parameter gap {lr_worst:.2e}"))?;

    let gnb_cases: Vec<(Vec<f64>, Vec<bool>)> = vec![
        (vec![0.9, 0.7, 0.8, 0.2, 0.4, 0.3], vec![true, true, true, false, false, false]),
        (vec![0.6, 0.65, 0.1, 0.5, 0.3, 0.2], vec![true, true, false, false, false, false]),
        (vec![0.2, 0.9, 0.5, 0.45, 0.55, 0.1], vec![true, true, false, false, true, false]),
    ];
    let mut gnb_worst: f64 = 0.0;
    for (xs, ys) in &gnb_cases {
        let c = fit_gnb(xs, ys).unwrap();
        for i in 0..=20 {
            let x = i as f64 / 20.0;
            gnb_worst = gnb_worst.max((c.probability_extracted(x) - gnb_posterior(xs, ys, x)).abs());
        }
    }
    ensure(gnb_worst < 1e-9, format!("GNB posterior gap {gnb_worst:.2e}"))?;
    Ok(format!("LR gap {lr_worst:.1e} on {} instances, GNB gap {gnb_worst:.1e}", instances.len()))
}

fn roc_oracle() -> Outcome {
    let mut r = rng(13);
    let mut worst: f64 = 0.0;
    for set in 0..100 {
        let draw = |r: &mut rand_chacha::ChaCha8Rng| {
            let v: f64 = r.random_range(0.0..1.0);
            if set % 2 == 0 {
                (v * 10.0).round() / 10.0
            } else {
                v
            }
        };
        let pos: Vec<f64> = (0..r.random_range(1..25)).map(|_| draw(&mut r)).collect();
        let neg: Vec<f64> = (0..r.random_range(1..25)).map(|_| draw(&mut r)).collect();
        let curve = roc_auc(&pos, &neg).unwrap();
        worst = worst.max((curve.auc - pairwise_auc(&pos, &neg)).abs());

        let rate = |s: &[f64], t: f64| s.iter().filter(|&&v| v >= t).count() as f64 / s.len() as f64;
        let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
        thresholds.push(f64::INFINITY);
        let best_tpr = thresholds.iter().filter(|&&t| rate(&neg, t) == 0.0).map(|&t| rate(&pos, t)).fold(0.0, f64::max);
        let best_fpr = thresholds.iter().filter(|&&t| rate(&pos, t) == 1.0).map(|&t| rate(&neg, t)).fold(1.0, f64::min);
        ensure(curve.tpr_at_fpr0 == best_tpr, format!("set {set}: tpr_at_fpr0"))?;
        ensure(curve.fpr_at_tpr1 == best_fpr, format!("set {set}: fpr_at_tpr1"))?;
        for p in &curve.points {
            ensure(p.fpr == rate(&neg, p.threshold) && p.tpr == rate(&pos, p.threshold), format!("set {set}: point"))?;
        }
        ensure(curve.points.iter().any(|p| p.fpr == 0.0 && p.tpr == best_tpr), "tpr_at_fpr0 not on curve")?;
        ensure(curve.points.iter().any(|p| p.tpr == 1.0 && p.fpr == best_fpr), "fpr_at_tpr1 not on curve")?;
    }
    ensure(worst <= 1e-12, format!("AUC gap {worst:.2e}"))?;
    Ok(format!("max AUC gap {worst:.1e} over 100 sets"))
}

fn evaluation(seen: &str, unseen: &str) -> Result<rawmark::harness::EvaluationReport, String> {
    let cfg = EvaluationConfig {
        seen_attacks: recipes(seen),
        unseen_attacks: recipes(unseen),
        ..EvaluationConfig::default()
    };
    run_raw_evaluation(&cfg).map_err(|e| e.to_string())
}

fn summary(r: &rawmark::harness::EvaluationReport) -> String {
    format!(
        "AUC {:.3} (per rep {:?}), scores {:.3} vs {:.3}, sign test p {:.4}",
        r.roc.auc,
        r.repetition_aucs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        r.mean_extracted_score,
        r.mean_nonextracted_score,
        r.sign_test.p_value
    )
}

fn naive_attacker() -> Outcome {
    let r = evaluation("RET", "RET")?;
    ensure(r.roc.auc >= 0.85, summary(&r))?;
    ensure(r.mean_extracted_score > r.mean_nonextracted_score, summary(&r))?;
    Ok(summary(&r))
}

fn unseen_attack() -> Outcome {
    let r = evaluation("TRL,DIS", "RET")?;
    let pass = r.roc.auc >= 0.75 && r.sign_test.p_value < 0.05;
    let base = EvaluationConfig { unseen_attacks: recipes("RET"), strict_unseen: true, ..EvaluationConfig::default() };
    let order = ordering_check(&base, &recipes("TRL"), &recipes("TRL,DIS")).map_err(|e| e.to_string())?;
    let note = format!(
        "{}; ordering check TRL {:.3} vs TRL,DIS {:.3} ({})",
        summary(&r),
        order.narrow_auc,
        order.wide_auc,
        if order.holds() { "holds" } else { "does not hold, logged only" }
    );
    ensure(pass, note.clone())?;
    Ok(note)
}

fn informed_attacker() -> Outcome {
    let cfg = EvaluationConfig::default();
    let ws = Workspace::new(&cfg).unwrap();
    let victim = train_fresh(&cfg, FamilyId::A, &ws.train, 77).unwrap();
    let mut worst_drop: f64 = 0.0;
    for attack in [AttackKind::Retraining, AttackKind::Distillation] {
        let parent = extract(&victim, &ws.train.features, &cfg.extraction_config(attack, 31), None).unwrap();
        let parent_acc = parent.accuracy(&ws.test.features, &ws.test.labels).unwrap();

        let pruned = blur_prune(&parent, 0.5).unwrap();
        let count: usize = parent.layers().iter().map(|l| l.weights.len()).sum();
        let zeros: usize = pruned.layers().iter().flat_map(|l| &l.weights).filter(|&&w| w == 0.0).count();
        ensure(zeros == count / 2, format!("{attack}: {zeros} zero weights of {count}"))?;
        ensure(pruned.provenance().lineage.len() == 2, "pruned lineage lacks a stage")?;

        let quantized = blur_quantize(&parent, 8).unwrap();
        for (q, p) in quantized.layers().iter().zip(parent.layers()) {
            let all: Vec<f64> = p.weights.iter().chain(&p.bias).copied().collect();
            let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let half = (hi - lo) / 255.0 / 2.0;
            for (a, b) in q.weights.iter().chain(&q.bias).zip(&all) {
                ensure(
                    (a - b).abs() <= half * (1.0 + 1e-9),
                    format!("{attack}: quantization error beyond half a step"),
                )?;
            }
        }
        for blurred in [&pruned, &quantized] {
            let acc = blurred.accuracy(&ws.test.features, &ws.test.labels).unwrap();
            worst_drop = worst_drop.max(parent_acc - acc);
        }
    }
    ensure(worst_drop <= 0.10, format!("blurring costs {worst_drop:.3} accuracy"))?;
    let r = evaluation("WQ(RET),DIS", "WP(RET)")?;
    ensure(r.roc.auc > 0.7, summary(&r))?;
    Ok(format!("largest accuracy drop {worst_drop:.3}; WQ(RET),DIS -> WP(RET) {}", summary(&r)))
}

fn cross_architecture() -> Outcome {
    let r = evaluation("TRL", "CAR")?;
    ensure(r.roc.auc >= 0.75, summary(&r))?;
    Ok(summary(&r))
}

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "determinism", determinism),
        (3, "seed uniqueness", seed_uniqueness),
        (4, "BIM strengthening", bim_strengthening),
        (5, "key-set selection oracle", keyset_selection),
        (6, "classifier oracles", classifier_oracles),
        (7, "ROC oracle", roc_oracle),
        (8, "naive attacker", naive_attacker),
        (9, "unseen attack", unseen_attack),
        (10, "informed attacker", informed_attacker),
        (11, "cross-architecture", cross_architecture),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {id:>2} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
