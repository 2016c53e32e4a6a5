//! CSV output for reports and confidence dumps.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::eval::{population_profiles, ConfidenceDump, EvaluationReport};
use crate::harness::roc::trapezoid_area;
use crate::nnet::Model;
use crate::watermark::KeySet;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}_{suffix}.csv"))
}

/// Writes the ROC points to `path` (`threshold,fpr,tpr`), plus
/// `<stem>_summary.csv` and `<stem>_scores.csv` next to it. Returns the three
/// paths.
pub fn export_report(report: &EvaluationReport, path: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["threshold", "fpr", "tpr"]).map_err(csv_err)?;
    for p in &report.roc.points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;

    let summary_path = sibling(path, "summary");
    let mut w = csv::Writer::from_path(&summary_path).map_err(csv_err)?;
    w.write_record(["metric", "value"]).map_err(csv_err)?;
    let mut rows = vec![
        ("config_digest".to_string(), report.config_digest.clone()),
        ("auc".into(), report.roc.auc.to_string()),
        ("tpr_at_fpr0".into(), report.roc.tpr_at_fpr0.to_string()),
        ("fpr_at_tpr1".into(), report.roc.fpr_at_tpr1.to_string()),
        ("mean_extracted_score".into(), report.mean_extracted_score.to_string()),
        ("mean_nonextracted_score".into(), report.mean_nonextracted_score.to_string()),
        ("sign_test_above".into(), report.sign_test.above.to_string()),
        ("sign_test_below".into(), report.sign_test.below.to_string()),
        ("sign_test_p".into(), report.sign_test.p_value.to_string()),
    ];
    for (r, auc) in report.repetition_aucs.iter().enumerate() {
        rows.push((format!("auc_rep{r}"), auc.to_string()));
    }
    for (k, v) in rows {
        w.write_record([k, v]).map_err(csv_err)?;
    }
    w.flush()?;

    let scores_path = sibling(path, "scores");
    let mut w = csv::Writer::from_path(&scores_path).map_err(csv_err)?;
    w.write_record(["repetition", "model_id", "extracted", "origin", "score"]).map_err(csv_err)?;
    for s in &report.scores {
        w.write_record([
            s.repetition.to_string(),
            s.model_id.clone(),
            s.extracted.to_string(),
            s.origin.clone(),
            s.score.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok([path.to_path_buf(), summary_path, scores_path])
}

/// Re-reads a ROC CSV written by [`export_report`] and integrates it.
pub fn read_roc_auc(path: impl AsRef<Path>) -> Result<f64> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Format("short ROC row".into()))?
                .parse()
                .map_err(|e| Error::Format(format!("bad ROC value: {e}")))
        };
        points.push((field(1)?, field(2)?));
    }
    Ok(trapezoid_area(&points))
}

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// One row per watermark:
/// `watermark,label,extracted_mean,nonextracted_mean,extracted,nonextracted`,
/// where the last two columns hold `;`-separated per-model confidences.
pub fn write_confidence_dump(dump: &ConfidenceDump, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["watermark", "label", "extracted_mean", "nonextracted_mean", "extracted", "nonextracted"])
        .map_err(csv_err)?;
    for (i, label) in dump.labels.iter().enumerate() {
        let e: Vec<f64> = dump.extracted.iter().map(|p| p[i]).collect();
        let n: Vec<f64> = dump.nonextracted.iter().map(|p| p[i]).collect();
        w.write_record([
            i.to_string(),
            label.to_string(),
            mean(&e).to_string(),
            mean(&n).to_string(),
            join(e.into_iter()),
            join(n.into_iter()),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Computes both populations' profiles on `keyset` and writes them.
pub fn dump_confidences(
    extracted: &[Model],
    nonextracted: &[Model],
    keyset: &KeySet,
    path: impl AsRef<Path>,
) -> Result<()> {
    let dump = ConfidenceDump {
        repetition: 0,
        labels: keyset.labels.clone(),
        extracted: population_profiles(extracted, keyset)?,
        nonextracted: population_profiles(nonextracted, keyset)?,
    };
    write_confidence_dump(&dump, path)
}
