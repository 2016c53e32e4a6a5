//! Population decision-boundary analysis.
//!
//! Over a shared evaluation set:
//!
//! - *disagreements* are inputs on which the population does not agree;
//! - a *unique disagreement* of model `i` is an input model `i` gets wrong
//!   while every other model gets it right;
//! - a *transferable* disagreement is a unique one that model `i`'s extracted
//!   partner gets wrong in the same way.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversarial::{bim_batch, BimConfig, BimMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::{argmax, Model};

/// Predictions of every model on one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationPredictions {
    /// `labels[m][i]`: model `m`'s predicted class for input `i`.
    pub labels: Vec<Vec<usize>>,
    /// `confidences[m][i]`: model `m`'s softmax output for input `i`.
    pub confidences: Vec<Vec<Vec<f64>>>,
    pub truth: Vec<usize>,
}

impl PopulationPredictions {
    pub fn from_models(models: &[Model], inputs: &[Vec<f64>], truth: &[usize]) -> Result<Self> {
        if inputs.len() != truth.len() {
            return Err(Error::Input(format!("{} inputs but {} ground-truth labels", inputs.len(), truth.len())));
        }
        let confidences = models.par_iter().map(|m| m.forward(inputs)).collect::<Result<Vec<_>>>()?;
        let labels = confidences.iter().map(|rows| rows.iter().map(|c| argmax(c)).collect()).collect();
        Ok(PopulationPredictions { labels, confidences, truth: truth.to_vec() })
    }

    /// Builds a table from labels alone; confidences are one-hot.
    pub fn from_labels(labels: Vec<Vec<usize>>, truth: Vec<usize>, classes: usize) -> Result<Self> {
        let confidences = labels
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&l| {
                        let mut c = vec![0.0; classes];
                        c[l] = 1.0;
                        c
                    })
                    .collect()
            })
            .collect();
        let pop = PopulationPredictions { labels, confidences, truth };
        pop.validate()?;
        Ok(pop)
    }

    pub fn models(&self) -> usize {
        self.labels.len()
    }

    pub fn inputs(&self) -> usize {
        self.truth.len()
    }

    fn validate(&self) -> Result<()> {
        if let Some(bad) = self.labels.iter().position(|row| row.len() != self.truth.len()) {
            return Err(Error::Input(format!(
                "model {bad} has {} predictions for {} inputs",
                self.labels[bad].len(),
                self.truth.len()
            )));
        }
        Ok(())
    }
}

/// Inputs on which at least two models predict different classes.
pub fn find_disagreements(pop: &PopulationPredictions) -> Result<Vec<usize>> {
    if pop.models() < 2 {
        return Err(Error::Input("disagreements need at least two models".into()));
    }
    pop.validate()?;
    Ok((0..pop.inputs())
        .filter(|&i| {
            let first = pop.labels[0][i];
            pop.labels.iter().any(|row| row[i] != first)
        })
        .collect())
}

/// Inputs that model `model_index` misclassifies while every other model
/// classifies them correctly.
pub fn find_unique_disagreements(pop: &PopulationPredictions, model_index: usize) -> Result<Vec<usize>> {
    if model_index >= pop.models() {
        return Err(Error::Input(format!("model index {model_index} out of range for {} models", pop.models())));
    }
    pop.validate()?;
    Ok((0..pop.inputs())
        .filter(|&i| {
            let truth = pop.truth[i];
            pop.labels[model_index][i] != truth
                && pop.labels.iter().enumerate().all(|(m, row)| m == model_index || row[i] == truth)
        })
        .collect())
}

/// The part of `unique_set` where the extracted model repeats the protected
/// model's mistake exactly.
pub fn find_transferable(
    unique_set: &[usize],
    protected: &[usize],
    extracted: &[usize],
    truth: &[usize],
) -> Vec<usize> {
    unique_set.iter().copied().filter(|&i| extracted[i] == protected[i] && protected[i] != truth[i]).collect()
}

/// Where to apply BIM before recomputing the subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Unique,
    Disagreements,
    EntireSet,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Unique, Strategy::Disagreements, Strategy::EntireSet];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::Unique => "unique",
            Strategy::Disagreements => "disagreements",
            Strategy::EntireSet => "entire_set",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "unique" => Ok(Strategy::Unique),
            "disagreements" => Ok(Strategy::Disagreements),
            "entire_set" => Ok(Strategy::EntireSet),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub strategy: Strategy,
    pub disagreement_share: f64,
    /// Mean over protected models of their unique-disagreement share.
    pub unique_share: f64,
    /// Mean over protected models of their transferable share.
    pub transferable_share: f64,
    /// Mean over all transferable points of the protected model's confidence
    /// in its own (wrong) prediction; 0 when there are none.
    pub mean_transferable_confidence: f64,
    pub transferable_count: usize,
}

struct ModelSubsets {
    disagreements: usize,
    unique: usize,
    transferable: usize,
    confidences: Vec<f64>,
}

/// Applies BIM according to `strategy`, recomputes the three subsets for
/// every protected model on its own perturbed copy of the evaluation set,
/// and averages the shares over the population.
///
/// BIM for model `i` targets model `i`'s own predictions, so each protected
/// model sees a different perturbed set; with `Strategy::None` all sets are
/// the original one and the disagreement share is the population share.
pub fn run_strategy_analysis(
    protected: &[Model],
    extracted: &[Model],
    eval: &Dataset,
    strategy: Strategy,
    bim_cfg: &BimConfig,
) -> Result<SubsetReport> {
    if protected.len() < 2 {
        return Err(Error::Input("strategy analysis needs at least two protected models".into()));
    }
    if extracted.len() != protected.len() {
        return Err(Error::Input(format!(
            "{} protected models but {} extracted partners",
            protected.len(),
            extracted.len()
        )));
    }
    let bim_cfg = BimConfig { mode: BimMode::Targeted, ..bim_cfg.clone() };
    let base = PopulationPredictions::from_models(protected, &eval.features, &eval.labels)?;
    let disagreements = find_disagreements(&base)?;
    let n = eval.len();

    let per_model = (0..protected.len())
        .into_par_iter()
        .map(|m| -> Result<ModelSubsets> {
            let targets: Vec<usize> = match strategy {
                Strategy::None => Vec::new(),
                Strategy::Unique => find_unique_disagreements(&base, m)?,
                Strategy::Disagreements => disagreements.clone(),
                Strategy::EntireSet => (0..n).collect(),
            };
            let mut inputs = eval.features.clone();
            if !targets.is_empty() {
                let xs: Vec<Vec<f64>> = targets.iter().map(|&i| eval.features[i].clone()).collect();
                let ys: Vec<usize> = targets.iter().map(|&i| base.labels[m][i]).collect();
                for (&i, adv) in targets.iter().zip(bim_batch(&protected[m], &xs, &ys, &bim_cfg)?) {
                    inputs[i] = adv;
                }
            }
            let pop = if targets.is_empty() {
                base.clone()
            } else {
                PopulationPredictions::from_models(protected, &inputs, &eval.labels)?
            };
            let dis = if targets.is_empty() { disagreements.len() } else { find_disagreements(&pop)?.len() };
            let unique = find_unique_disagreements(&pop, m)?;
            let partner = extracted[m].predict(&inputs)?;
            let transferable = find_transferable(&unique, &pop.labels[m], &partner, &eval.labels);
            let confidences = transferable.iter().map(|&i| pop.confidences[m][i][pop.labels[m][i]]).collect();
            Ok(ModelSubsets { disagreements: dis, unique: unique.len(), transferable: transferable.len(), confidences })
        })
        .collect::<Result<Vec<_>>>()?;

    let models = per_model.len() as f64;
    let share =
        |f: &dyn Fn(&ModelSubsets) -> usize| per_model.iter().map(|s| f(s) as f64 / n as f64).sum::<f64>() / models;
    let confidences: Vec<f64> = per_model.iter().flat_map(|s| s.confidences.iter().copied()).collect();
    Ok(SubsetReport {
        strategy,
        disagreement_share: share(&|s| s.disagreements),
        unique_share: share(&|s| s.unique),
        transferable_share: share(&|s| s.transferable),
        mean_transferable_confidence: if confidences.is_empty() {
            0.0
        } else {
            confidences.iter().sum::<f64>() / confidences.len() as f64
        },
        transferable_count: confidences.len(),
    })
}

/// Mean confidence each protected model places on its own prediction over
/// the population's disagreement subset, before and after targeted BIM
/// towards that prediction. Returns `(before, after)`.
pub fn disagreement_confidence_shift(protected: &[Model], eval: &Dataset, bim_cfg: &BimConfig) -> Result<(f64, f64)> {
    let base = PopulationPredictions::from_models(protected, &eval.features, &eval.labels)?;
    let dis = find_disagreements(&base)?;
    if dis.is_empty() {
        return Err(Error::Input("the population never disagrees".into()));
    }
    let bim_cfg = BimConfig { mode: BimMode::Targeted, ..bim_cfg.clone() };
    let xs: Vec<Vec<f64>> = dis.iter().map(|&i| eval.features[i].clone()).collect();
    let sums = protected
        .par_iter()
        .enumerate()
        .map(|(m, model)| -> Result<(f64, f64)> {
            let ys: Vec<usize> = dis.iter().map(|&i| base.labels[m][i]).collect();
            let adv = bim_batch(model, &xs, &ys, &bim_cfg)?;
            let before: f64 = dis.iter().zip(&ys).map(|(&i, &y)| base.confidences[m][i][y]).sum();
            let after: f64 =
                adv.iter().zip(&ys).map(|(x, &y)| model.confidences(x).map(|c| c[y])).sum::<Result<f64>>()?;
            Ok((before, after))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = (dis.len() * protected.len()) as f64;
    let (before, after) = sums.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    Ok((before / count, after / count))
}

/// Writes one row per strategy:
/// `strategy,disagreements,unique,transferable,confidence,transferable_count`.
pub fn write_subset_table(reports: &[SubsetReport], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["strategy", "disagreements", "unique", "transferable", "confidence", "transferable_count"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for r in reports {
        w.write_record([
            r.strategy.to_string(),
            r.disagreement_share.to_string(),
            r.unique_share.to_string(),
            r.transferable_share.to_string(),
            r.mean_transferable_confidence.to_string(),
            r.transferable_count.to_string(),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
