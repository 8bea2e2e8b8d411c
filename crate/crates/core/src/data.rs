//! Datasets: CSV ingestion, unit-interval normalisation and the synthetic
//! CGM generator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column '{column}': cannot parse '{value}' as a number")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("column '{0}' not found in header")]
    MissingColumn(String),
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("dataset has no rows")]
    Empty,
    #[error("split fraction {fraction} leaves an empty side for {n} rows")]
    EmptySplit { fraction: f64, n: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

/// Outputs of a dataset. Class labels are stored zero-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<S> {
    Labels { y: Vec<usize>, n_classes: usize },
    Real(Vec<S>),
}

/// Per-dimension affine map `x_norm = (x - offset) / scale`.
///
/// A zero `scale` marks a constant column, which normalises to 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    /// Min-max map fitted to row-major `raw` data with `n_x` columns.
    pub fn fit(raw: &[f64], n_x: usize) -> Self {
        let mut lo = vec![f64::INFINITY; n_x];
        let mut hi = vec![f64::NEG_INFINITY; n_x];
        for row in raw.chunks_exact(n_x) {
            for (d, &v) in row.iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        let mut scale = Vec::with_capacity(n_x);
        for d in 0..n_x {
            let range = hi[d] - lo[d];
            if range > 0.0 {
                scale.push(range);
            } else {
                log::warn!("input dimension {d} is constant; mapping it to 0.5");
                scale.push(0.0);
            }
        }
        Normalization { offset: lo, scale }
    }

    pub fn identity(n_x: usize) -> Self {
        Normalization { offset: vec![0.0; n_x], scale: vec![1.0; n_x] }
    }

    /// Normalise one value; results outside `[0, 1]` (unseen test inputs) are clamped.
    pub fn apply(&self, d: usize, v: f64) -> f64 {
        if self.scale[d] == 0.0 {
            0.5
        } else {
            ((v - self.offset[d]) / self.scale[d]).clamp(0.0, 1.0)
        }
    }

    pub fn invert(&self, d: usize, v: f64) -> f64 {
        if self.scale[d] == 0.0 {
            self.offset[d]
        } else {
            v * self.scale[d] + self.offset[d]
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<S> {
    n_x: usize,
    /// Row-major original-unit inputs.
    raw: Vec<f64>,
    /// Row-major normalised inputs in `[0, 1]`.
    x: Vec<S>,
    targets: Targets<S>,
    normalization: Normalization,
    pub feature_names: Vec<String>,
    /// Original label strings by zero-based class index (classification only).
    pub class_names: Vec<String>,
}

impl<S: Scalar> Dataset<S> {
    /// Build a dataset from original-unit inputs, fitting a fresh min-max map.
    pub fn new(raw: Vec<f64>, n_x: usize, targets: Targets<S>) -> Result<Self, DataError> {
        let norm = Normalization::fit(&raw, n_x);
        Self::with_normalization(raw, n_x, targets, norm)
    }

    /// Build a dataset from inputs that are already on the unit interval.
    pub fn from_normalized(x: Vec<f64>, n_x: usize, targets: Targets<S>) -> Result<Self, DataError> {
        Self::with_normalization(x, n_x, targets, Normalization::identity(n_x))
    }

    /// Build a dataset normalised with an existing (e.g. training-split) map.
    pub fn with_normalization(
        raw: Vec<f64>,
        n_x: usize,
        targets: Targets<S>,
        normalization: Normalization,
    ) -> Result<Self, DataError> {
        if n_x == 0 {
            return Err(DataError::Invalid("dataset needs at least one input column".into()));
        }
        if raw.len() % n_x != 0 {
            return Err(DataError::Invalid("input length is not a multiple of n_x".into()));
        }
        let n = raw.len() / n_x;
        if n == 0 {
            return Err(DataError::Empty);
        }
        let n_targets = match &targets {
            Targets::Labels { y, n_classes } => {
                if let Some(&bad) = y.iter().find(|&&c| c >= *n_classes) {
                    return Err(DataError::Invalid(format!("label {bad} outside 0..{n_classes}")));
                }
                y.len()
            }
            Targets::Real(y) => y.len(),
        };
        if n_targets != n {
            return Err(DataError::Invalid(format!("{n} input rows but {n_targets} outputs")));
        }
        let x = raw
            .chunks_exact(n_x)
            .flat_map(|row| row.iter().enumerate().map(|(d, &v)| S::c(normalization.apply(d, v))))
            .collect();
        Ok(Dataset {
            n_x,
            raw,
            x,
            targets,
            normalization,
            feature_names: (0..n_x).map(|d| format!("x{d}")).collect(),
            class_names: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn task(&self) -> Task {
        match self.targets {
            Targets::Labels { .. } => Task::Classification,
            Targets::Real(_) => Task::Regression,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.targets {
            Targets::Labels { n_classes, .. } => n_classes,
            Targets::Real(_) => 0,
        }
    }

    /// Normalised input row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.x[i * self.n_x..(i + 1) * self.n_x]
    }

    pub fn raw_row(&self, i: usize) -> &[f64] {
        &self.raw[i * self.n_x..(i + 1) * self.n_x]
    }

    pub fn inputs(&self) -> &[S] {
        &self.x
    }

    pub fn targets(&self) -> &Targets<S> {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels { y, .. } => Some(y),
            Targets::Real(_) => None,
        }
    }

    pub fn real_targets(&self) -> Option<&[S]> {
        match &self.targets {
            Targets::Real(y) => Some(y),
            Targets::Labels { .. } => None,
        }
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Subset of rows, keeping this dataset's normalisation.
    pub fn select(&self, rows: &[usize]) -> Self {
        let raw = rows.iter().flat_map(|&i| self.raw_row(i).iter().copied()).collect();
        let targets = match &self.targets {
            Targets::Labels { y, n_classes } => {
                Targets::Labels { y: rows.iter().map(|&i| y[i]).collect(), n_classes: *n_classes }
            }
            Targets::Real(y) => Targets::Real(rows.iter().map(|&i| y[i]).collect()),
        };
        let mut out = Self::with_normalization(raw, self.n_x, targets, self.normalization.clone())
            .expect("row subset of a valid dataset");
        out.feature_names = self.feature_names.clone();
        out.class_names = self.class_names.clone();
        out
    }

    /// Re-normalise with a new map (inputs are recomputed from original units).
    pub fn renormalized(&self, normalization: Normalization) -> Self {
        let mut out = Self::with_normalization(self.raw.clone(), self.n_x, self.targets.clone(), normalization)
            .expect("renormalising a valid dataset");
        out.feature_names = self.feature_names.clone();
        out.class_names = self.class_names.clone();
        out
    }
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: String,
    /// Input columns; `None` uses every column except the target.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    pub task: Task,
}

/// Read a headed, comma-separated file. Inputs are min-max normalised over
/// the rows of this file.
pub fn load_csv<S: Scalar>(path: &Path, schema: &CsvSchema) -> Result<Dataset<S>, DataError> {
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let target_col = col(&schema.target)?;
    let feature_names: Vec<String> = match &schema.features {
        Some(f) => f.clone(),
        None => header.iter().filter(|h| **h != schema.target).cloned().collect(),
    };
    let feature_cols = feature_names.iter().map(|f| col(f)).collect::<Result<Vec<_>, _>>()?;
    let n_x = feature_cols.len();

    let mut raw = Vec::new();
    let mut target_strings = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // header is line 1
        let row = r + 2;
        if record.len() != header.len() {
            return Err(DataError::RaggedRow { row, expected: header.len(), found: record.len() });
        }
        for (&c, name) in feature_cols.iter().zip(&feature_names) {
            let cell = record[c].trim();
            let v: f64 = cell.parse().map_err(|_| DataError::NotNumeric {
                row,
                column: name.clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NotNumeric { row, column: name.clone(), value: cell.to_string() });
            }
            raw.push(v);
        }
        target_strings.push((row, record[target_col].trim().to_string()));
    }
    if target_strings.is_empty() {
        return Err(DataError::Empty);
    }

    let (targets, class_names) = match schema.task {
        Task::Regression => {
            let mut y = Vec::with_capacity(target_strings.len());
            for (row, s) in &target_strings {
                let v: f64 = s.parse().map_err(|_| DataError::NotNumeric {
                    row: *row,
                    column: schema.target.clone(),
                    value: s.clone(),
                })?;
                y.push(S::c(v));
            }
            (Targets::Real(y), Vec::new())
        }
        Task::Classification => {
            let labels: Vec<String> = target_strings.into_iter().map(|(_, s)| s).collect();
            let (y, names) = relabel(&labels);
            (Targets::Labels { y, n_classes: names.len() }, names)
        }
    };
    let mut ds = Dataset::new(raw, n_x, targets)?;
    ds.feature_names = feature_names;
    ds.class_names = class_names;
    Ok(ds)
}

/// Re-express a separately loaded test set in the training set's terms:
/// the training normalization and the training class indices.
pub fn align_to_train<S: Scalar>(train: &Dataset<S>, test: &Dataset<S>) -> Result<Dataset<S>, DataError> {
    if train.task() != test.task() || train.n_x != test.n_x {
        return Err(DataError::Invalid("test set differs from training set in task or inputs".into()));
    }
    if train.feature_names != test.feature_names {
        return Err(DataError::Invalid("test set columns differ from training columns".into()));
    }
    let targets = match &test.targets {
        Targets::Labels { y, .. } => {
            let index: BTreeMap<&str, usize> =
                train.class_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let mut mapped = Vec::with_capacity(y.len());
            for &c in y {
                let name = &test.class_names[c];
                let k = index
                    .get(name.as_str())
                    .ok_or_else(|| DataError::Invalid(format!("test label {name:?} not seen in training data")))?;
                mapped.push(*k);
            }
            Targets::Labels { y: mapped, n_classes: train.n_classes() }
        }
        Targets::Real(y) => Targets::Real(y.clone()),
    };
    let mut out = Dataset::with_normalization(test.raw.clone(), test.n_x, targets, train.normalization.clone())?;
    out.feature_names = train.feature_names.clone();
    out.class_names = train.class_names.clone();
    Ok(out)
}

/// Map label strings to contiguous zero-based classes. Classes are ordered
/// numerically when every label parses as a number, lexicographically otherwise.
pub fn relabel(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let distinct: BTreeSet<&String> = labels.iter().collect();
    let mut names: Vec<String> = distinct.into_iter().cloned().collect();
    if names.iter().all(|s| s.parse::<f64>().is_ok()) {
        names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let y = labels.iter().map(|s| index[s.as_str()]).collect();
    (y, names)
}

/// Shuffle rows and split them into `(train, test)` with `fraction` of the
/// rows in the training side. Both sides use a map fitted on the training rows.
pub fn split<S: Scalar, R: Rng + ?Sized>(
    data: &Dataset<S>,
    fraction: f64,
    rng: &mut R,
) -> Result<(Dataset<S>, Dataset<S>), DataError> {
    let n = data.len();
    let n_train = (fraction * n as f64).round() as usize;
    if !(fraction > 0.0 && fraction < 1.0) || n_train == 0 || n_train == n {
        return Err(DataError::EmptySplit { fraction, n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let train = data.select(&idx[..n_train]);
    let norm = Normalization::fit(&train.raw, data.n_x);
    let test = data.select(&idx[n_train..]).renormalized(norm.clone());
    Ok((train.renormalized(norm), test))
}

/// Input law and noise for the synthetic CGM generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgmConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub sigma: f64,
    /// Inputs are drawn uniformly from `[low, high]` in both dimensions.
    pub low: f64,
    pub high: f64,
}

impl Default for CgmConfig {
    fn default() -> Self {
        CgmConfig { n_train: 800, n_test: 800, sigma: 0.2, low: 0.0, high: 10.0 }
    }
}

/// Leaf mean of the generating tree: split on `x1 < 4`, then on `x0`.
pub fn cgm_mean(x0: f64, x1: f64) -> f64 {
    if x1 < 4.0 {
        if x0 < 3.0 {
            1.0
        } else if x0 < 7.0 {
            5.0
        } else {
            8.0
        }
    } else if x0 < 5.0 {
        8.0
    } else {
        2.0
    }
}

/// Generate `(train, test)`; the test set is normalised with the training map.
pub fn synth_cgm<S: Scalar, R: Rng + ?Sized>(
    cfg: &CgmConfig,
    rng: &mut R,
) -> Result<(Dataset<S>, Dataset<S>), DataError> {
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(DataError::Empty);
    }
    if !(cfg.sigma >= 0.0) || !(cfg.high > cfg.low) {
        return Err(DataError::Invalid("need sigma >= 0 and high > low".into()));
    }
    let mut draw = |n: usize| {
        let mut raw = Vec::with_capacity(2 * n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x0 = rng.random_range(cfg.low..cfg.high);
            let x1 = rng.random_range(cfg.low..cfg.high);
            let noise = if cfg.sigma > 0.0 { Normal::new(0.0, cfg.sigma).unwrap().sample(rng) } else { 0.0 };
            raw.extend([x0, x1]);
            y.push(S::c(cgm_mean(x0, x1) + noise));
        }
        (raw, y)
    };
    let (raw_train, y_train) = draw(cfg.n_train);
    let (raw_test, y_test) = draw(cfg.n_test);
    let train = Dataset::new(raw_train, 2, Targets::Real(y_train))?;
    let test = Dataset::with_normalization(raw_test, 2, Targets::Real(y_test), train.normalization.clone())?;
    Ok((train, test))
}

/// Everything needed to rebuild a dataset exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub task: Task,
    pub n_rows: usize,
    pub feature_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

impl<S: Scalar> Dataset<S> {
    pub fn manifest(&self, source: impl Into<String>, split_seed: Option<u64>) -> DatasetManifest {
        DatasetManifest {
            source: source.into(),
            task: self.task(),
            n_rows: self.len(),
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            normalization: self.normalization.clone(),
            split_seed,
        }
    }

    /// Write a headed CSV in original units (labels written by name).
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push("y".to_string());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.raw_row(i).iter().map(|v| v.to_string()).collect();
            rec.push(match &self.targets {
                Targets::Real(y) => y[i].to_string(),
                Targets::Labels { y, .. } => {
                    self.class_names.get(y[i]).cloned().unwrap_or_else(|| (y[i] + 1).to_string())
                }
            });
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
        Ok(())
    }
}
