//! Deterministic synthetic classification data.
//!
//! Every feature lies in `[-1, 1]`. Gaussian blobs place one centre per class
//! uniformly in `[-0.6, 0.6]^D` and draw `center + spread * N(0, I)`, clamped
//! to the feature range. Ring classes place class `k` on a circle of radius
//! `0.15 + 0.7 k / (K - 1)` in the first two dimensions with isotropic noise
//! everywhere.
//!
//! On-disk format is CSV. The first record is a header
//! `rawmark-dataset,1,dims=D,classes=K,rows=N,seed=S,name=NAME`; every
//! following record is `x_0,...,x_{D-1},label` with decimals written in
//! shortest round-trip form.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Inclusive bounds of every feature.
pub const FEATURE_RANGE: (f64, f64) = (-1.0, 1.0);

/// Blob spread used by the default desk-scale configuration. Large enough that
/// independently seeded models disagree on a material share of test points.
pub const DEFAULT_SPREAD: f64 = 0.45;

const CENTER_BOUND: f64 = 0.6;
const DATASET_FORMAT: &str = "rawmark-dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    GaussianBlobs,
    RingClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub kind: DataKind,
    pub classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    pub spread: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec { kind: DataKind::GaussianBlobs, classes: 4, dims: 8, samples_per_class: 250, spread: DEFAULT_SPREAD }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.dims < 2 {
            return Err(Error::Config(format!("need at least 2 dimensions, got {}", self.dims)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Config(format!("spread must be positive, got {}", self.spread)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn subset(&self, idx: &[usize], suffix: &str) -> Dataset {
        Dataset {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: format!("{}/{suffix}", self.name),
            seed: self.seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Format("dataset has no rows".into()));
        }
        if self.features.len() != self.labels.len() {
            return Err(Error::Format("feature and label counts differ".into()));
        }
        let d = self.dims();
        for (i, (x, &y)) in self.features.iter().zip(&self.labels).enumerate() {
            if x.len() != d {
                return Err(Error::Format(format!("row {i} has {} features, expected {d}", x.len())));
            }
            if y >= self.class_count {
                return Err(Error::Format(format!("row {i} label {y} exceeds class count {}", self.class_count)));
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Format(format!("row {i} has non-finite features")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(csv_err)?;
        let header = [
            DATASET_FORMAT.to_string(),
            "1".to_string(),
            format!("dims={}", self.dims()),
            format!("classes={}", self.class_count),
            format!("rows={}", self.len()),
            format!("seed={}", self.seed),
            format!("name={}", self.name),
        ];
        w.write_record(&header).map_err(csv_err)?;
        for (x, y) in self.features.iter().zip(&self.labels) {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        Dataset::from_csv(&text)
    }

    pub fn from_csv(text: &str) -> Result<Dataset> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
        let mut records = r.records();
        let header = records.next().ok_or_else(|| Error::Format("empty dataset file".into()))?.map_err(csv_err)?;
        if header.get(0) != Some(DATASET_FORMAT) {
            return Err(Error::Format("missing rawmark-dataset header".into()));
        }
        match header.get(1) {
            Some("1") => {}
            Some(v) => return Err(Error::Format(format!("unsupported dataset version {v}"))),
            None => return Err(Error::Format("dataset header has no version".into())),
        }
        let field = |key: &str| -> Result<String> {
            header
                .iter()
                .skip(2)
                .find_map(|f| f.strip_prefix(key).and_then(|rest| rest.strip_prefix('=')))
                .map(str::to_owned)
                .ok_or_else(|| Error::Format(format!("dataset header is missing {key}")))
        };
        let num = |key: &str| -> Result<u64> {
            field(key)?.parse().map_err(|e| Error::Format(format!("bad {key} in dataset header: {e}")))
        };
        let dims = num("dims")? as usize;
        let classes = num("classes")? as usize;
        let rows = num("rows")? as usize;
        let seed = num("seed")?;
        let name = field("name")?;

        let mut features = Vec::with_capacity(rows);
        let mut labels = Vec::with_capacity(rows);
        for (i, rec) in records.enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != dims + 1 {
                return Err(Error::Format(format!("row {i} has {} fields, expected {}", rec.len(), dims + 1)));
            }
            let x = rec
                .iter()
                .take(dims)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("row {i}: {e}")))?;
            let y = rec[dims].trim().parse::<usize>().map_err(|e| Error::Format(format!("row {i} label: {e}")))?;
            features.push(x);
            labels.push(y);
        }
        if features.len() != rows {
            return Err(Error::Format(format!("dataset declares {rows} rows but contains {}", features.len())));
        }
        let ds = Dataset { features, labels, class_count: classes, name, seed };
        ds.validate()?;
        Ok(ds)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn clamp_feature(v: f64) -> f64 {
    v.clamp(FEATURE_RANGE.0, FEATURE_RANGE.1)
}

/// Generates a class-balanced dataset (exactly `samples_per_class` rows per
/// class) in shuffled order.
pub fn generate(spec: &GenSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.classes;
    let d = spec.dims;
    let mut center_rng = rng::stream(seed, "data-centers");
    let mut noise = rng::stream(seed, "data-samples");
    let mut gauss = |s: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut noise);
        s * z
    };

    let mut features: Vec<Vec<f64>> = Vec::with_capacity(k * spec.samples_per_class);
    let mut labels = Vec::with_capacity(k * spec.samples_per_class);
    match spec.kind {
        DataKind::GaussianBlobs => {
            let centers: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..d).map(|_| rng::uniform(&mut center_rng, -CENTER_BOUND, CENTER_BOUND)).collect())
                .collect();
            for (class, c) in centers.iter().enumerate() {
                for _ in 0..spec.samples_per_class {
                    features.push(c.iter().map(|&m| clamp_feature(m + gauss(spec.spread))).collect());
                    labels.push(class);
                }
            }
        }
        DataKind::RingClasses => {
            for class in 0..k {
                let radius = 0.15 + 0.7 * class as f64 / (k - 1) as f64;
                for _ in 0..spec.samples_per_class {
                    let angle = rng::uniform(&mut center_rng, 0.0, std::f64::consts::TAU);
                    let mut x: Vec<f64> = (0..d).map(|_| gauss(spec.spread)).collect();
                    x[0] += radius * angle.cos();
                    x[1] += radius * angle.sin();
                    features.push(x.into_iter().map(clamp_feature).collect());
                    labels.push(class);
                }
            }
        }
    }

    let order = rng::permutation(&mut rng::stream(seed, "data-order"), labels.len());
    let name = match spec.kind {
        DataKind::GaussianBlobs => "gaussian_blobs",
        DataKind::RingClasses => "ring_classes",
    };
    Ok(Dataset {
        features: order.iter().map(|&i| features[i].clone()).collect(),
        labels: order.iter().map(|&i| labels[i]).collect(),
        class_count: k,
        name: name.to_string(),
        seed,
    })
}

fn count_for(fraction: f64, n: usize) -> usize {
    // Guard against representation error such as 0.29 * 100 = 28.999...
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Disjoint, union-complete train/test split.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n = dataset.len();
    let n_test = count_for(test_fraction, n);
    if n_test == 0 || n_test == n {
        return Err(Error::Config(format!("test_fraction {test_fraction} leaves an empty part of {n} rows")));
    }
    let order = rng::permutation(&mut rng::stream(seed, "split"), n);
    let (test_idx, train_idx) = order.split_at(n_test);
    Ok((dataset.subset(train_idx, "train"), dataset.subset(test_idx, "test")))
}

/// Indices of a uniform sample without replacement of `floor(fraction * n)`
/// rows, in sampled order.
pub fn sample_indices(n: usize, budget_fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::Config(format!("budget fraction must lie in (0, 1], got {budget_fraction}")));
    }
    let mut order = rng::permutation(&mut rng::stream(seed, "queries"), n);
    order.truncate(count_for(budget_fraction, n));
    Ok(order)
}

/// Query inputs drawn from a dataset without replacement.
pub fn sample_queries(dataset: &Dataset, budget_fraction: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(sample_indices(dataset.len(), budget_fraction, seed)?.into_iter().map(|i| dataset.features[i].clone()).collect())
}

/// `count` i.i.d. points, uniform per dimension in `[range.0, range.1)`.
pub fn random_probe_inputs(count: usize, dims: usize, range: (f64, f64), seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::Config("probe count must be positive".into()));
    }
    if !range.0.is_finite() || !range.1.is_finite() || range.0 >= range.1 {
        return Err(Error::Config(format!("empty probe range [{}, {}]", range.0, range.1)));
    }
    let mut r = rng::stream(seed, "probes");
    Ok((0..count).map(|_| (0..dims).map(|_| rng::uniform(&mut r, range.0, range.1)).collect()).collect())
}
