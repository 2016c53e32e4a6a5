//! Basic Iterative Method (BIM).
//!
//! Each iteration takes a signed-gradient step of size `step_size` on the
//! hard-label cross-entropy, clips to the feature range, then projects back
//! into the L-infinity ball of radius `epsilon` around the starting point.
//! Targeted mode descends the loss of the target class; untargeted mode ascends
//! the loss of the given (true) class.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FEATURE_RANGE;
use crate::error::{Error, Result};
use crate::nnet::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BimMode {
    Targeted,
    Untargeted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BimConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub epsilon: f64,
    pub clip_range: (f64, f64),
    pub mode: BimMode,
}

impl Default for BimConfig {
    fn default() -> Self {
        BimConfig::with_budget(0.3, 20)
    }
}

impl BimConfig {
    /// Targeted BIM with `step_size = epsilon / iterations`.
    pub fn with_budget(epsilon: f64, iterations: usize) -> BimConfig {
        BimConfig {
            iterations,
            step_size: if iterations == 0 { 0.0 } else { epsilon / iterations as f64 },
            epsilon,
            clip_range: FEATURE_RANGE,
            mode: BimMode::Targeted,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("BIM epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(self.step_size >= 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::Config(format!(
                "BIM step size {} must lie in [0, epsilon = {}]",
                self.step_size, self.epsilon
            )));
        }
        if self.clip_range.0.partial_cmp(&self.clip_range.1) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Config(format!("empty clip range {:?}", self.clip_range)));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Perturbs `input` towards (targeted) or away from (untargeted) `label`.
pub fn bim(model: &Model, input: &[f64], label: usize, cfg: &BimConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if input.len() != model.input_dim() {
        return Err(Error::Input(format!(
            "BIM input has {} features, model expects {}",
            input.len(),
            model.input_dim()
        )));
    }
    let (lo, hi) = cfg.clip_range;
    if let Some(v) = input.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::Input(format!("BIM input value {v} lies outside the clip range [{lo}, {hi}]")));
    }
    let direction = match cfg.mode {
        BimMode::Targeted => -1.0,
        BimMode::Untargeted => 1.0,
    };
    let mut x = input.to_vec();
    for _ in 0..cfg.iterations {
        let grad = model.input_gradient(&x, label)?;
        for ((xi, &x0), g) in x.iter_mut().zip(input).zip(grad) {
            let stepped = (*xi + direction * cfg.step_size * sign(g)).clamp(lo, hi);
            *xi = stepped.clamp(x0 - cfg.epsilon, x0 + cfg.epsilon);
        }
    }
    Ok(x)
}

/// Element-wise [`bim`], order-preserving.
pub fn bim_batch(model: &Model, inputs: &[Vec<f64>], labels: &[usize], cfg: &BimConfig) -> Result<Vec<Vec<f64>>> {
    if inputs.len() != labels.len() {
        return Err(Error::Input(format!("{} BIM inputs but {} labels", inputs.len(), labels.len())));
    }
    inputs.par_iter().zip(labels.par_iter()).map(|(x, &y)| bim(model, x, y, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_probe_inputs;
    use crate::nnet::{Activation, ModelSpec};

    fn model() -> Model {
        Model::init(ModelSpec::mlp(4, &[16], Activation::Relu, 3), 21).unwrap()
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = model();
        let x = vec![0.1, -0.3, 0.5, 0.9];
        let cfg = BimConfig { epsilon: 0.0, step_size: 0.0, ..BimConfig::default() };
        assert_eq!(bim(&m, &x, 2, &cfg).unwrap(), x);
    }

    #[test]
    fn outputs_stay_in_ball_and_range() {
        let m = model();
        let xs = random_probe_inputs(50, 4, (-1.0, 1.0), 3).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let eps = 0.05 + 0.01 * i as f64;
            let cfg = BimConfig {
                mode: if i % 2 == 0 { BimMode::Targeted } else { BimMode::Untargeted },
                ..BimConfig::with_budget(eps, 7)
            };
            let adv = bim(&m, x, i % 3, &cfg).unwrap();
            for (a, b) in adv.iter().zip(x) {
                assert!((a - b).abs() <= eps + 1e-12);
                assert!((-1.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn targeted_steps_raise_target_confidence() {
        let m = model();
        let xs = random_probe_inputs(40, 4, (-1.0, 1.0), 8).unwrap();
        let cfg = BimConfig::default();
        let (mut before, mut after) = (0.0, 0.0);
        for x in &xs {
            before += m.confidences(x).unwrap()[1];
            after += m.confidences(&bim(&m, x, 1, &cfg).unwrap()).unwrap()[1];
        }
        assert!(after > before);
    }

    #[test]
    fn batch_matches_single_calls() {
        let m = model();
        let xs = random_probe_inputs(10, 4, (-1.0, 1.0), 8).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let cfg = BimConfig::default();
        let batch = bim_batch(&m, &xs, &labels, &cfg).unwrap();
        for ((x, &y), b) in xs.iter().zip(&labels).zip(&batch) {
            assert_eq!(&bim(&m, x, y, &cfg).unwrap(), b);
        }
        assert!(bim_batch(&m, &[], &[], &cfg).unwrap().is_empty());
        assert!(bim_batch(&m, &xs, &labels[..3], &cfg).is_err());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = model();
        let cfg = BimConfig::default();
        assert!(bim(&m, &[0.0; 3], 0, &cfg).is_err());
        assert!(bim(&m, &[0.0, 0.0, 0.0, 1.5], 0, &cfg).is_err());
        let bad = BimConfig { step_size: 0.5, epsilon: 0.1, ..cfg };
        assert!(bim(&m, &[0.0; 4], 0, &bad).is_err());
    }
}
