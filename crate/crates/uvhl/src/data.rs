//! Dataset ingestion, min-max normalization, stratified fold planning and
//! synthetic data generation.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UvhlError};

/// Case label. Class 0 is COVID-19 (the positive class), class 1 is CAP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Covid,
    Cap,
    Unlabeled,
}

impl Label {
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Covid => Some(0),
            Label::Cap => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn from_class_index(c: usize) -> Label {
        if c == 0 {
            Label::Covid
        } else {
            Label::Cap
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Covid => "COVID",
            Label::Cap => "CAP",
            Label::Unlabeled => "UNKNOWN",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "COVID" => Some(Label::Covid),
            "CAP" => Some(Label::Cap),
            "UNKNOWN" => Some(Label::Unlabeled),
            _ => None,
        }
    }
}

/// A named contiguous column range of the feature matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub cols: Range<usize>,
}

/// A set of cases: ids, feature matrix, feature-group layout and labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub features: DMatrix<f64>,
    pub groups: Vec<FeatureGroup>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn new(
        ids: Vec<String>,
        features: DMatrix<f64>,
        groups: Vec<FeatureGroup>,
        labels: Vec<Label>,
    ) -> Result<Dataset> {
        let n = features.nrows();
        let d = features.ncols();
        if n == 0 {
            return Err(UvhlError::Integrity("dataset has no rows".into()));
        }
        if ids.len() != n || labels.len() != n {
            return Err(UvhlError::Shape(format!(
                "ids ({}), labels ({}) and feature rows ({}) disagree",
                ids.len(),
                labels.len(),
                n
            )));
        }
        let mut covered = vec![false; d];
        for g in &groups {
            if g.cols.end > d {
                return Err(UvhlError::Schema(format!(
                    "group {} range {:?} exceeds {} columns",
                    g.name, g.cols, d
                )));
            }
            for c in g.cols.clone() {
                if covered[c] {
                    return Err(UvhlError::Schema(format!(
                        "column {} claimed by more than one group",
                        c
                    )));
                }
                covered[c] = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(UvhlError::Schema("groups do not cover all columns".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(UvhlError::Integrity("non-finite feature value".into()));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(UvhlError::Integrity(format!("duplicate id `{}`", id)));
            }
        }
        Ok(Dataset {
            ids,
            features,
            groups,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.labels[i] != Label::Unlabeled)
            .collect()
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.labels[i].class_index() == Some(class))
            .collect()
    }

    pub fn group(&self, name: &str) -> Option<&FeatureGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Restrict the dataset to the given rows, preserving their order.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        if rows.iter().any(|&r| r >= self.n()) {
            return Err(UvhlError::Argument("row index out of range".into()));
        }
        Dataset::new(
            rows.iter().map(|&r| self.ids[r].clone()).collect(),
            self.features.select_rows(rows),
            self.groups.clone(),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    /// Restrict the dataset to the named groups, preserving declared order.
    pub fn select_groups(&self, names: &[String]) -> Result<Dataset> {
        let mut groups = Vec::new();
        let mut cols: Vec<usize> = Vec::new();
        for g in &self.groups {
            if names.iter().any(|n| n == &g.name) {
                let start = cols.len();
                cols.extend(g.cols.clone());
                groups.push(FeatureGroup {
                    name: g.name.clone(),
                    cols: start..cols.len(),
                });
            }
        }
        if groups.is_empty() {
            return Err(UvhlError::Argument(format!(
                "no matching feature groups among {:?}",
                names
            )));
        }
        let features = self.features.select_columns(&cols);
        Dataset::new(
            self.ids.clone(),
            features,
            groups,
            self.labels.clone(),
        )
    }
}

/// Maps feature-column name prefixes to group names. Columns matching no
/// prefix fall into the `fallback` group.
#[derive(Debug, Clone)]
pub struct GroupSchema {
    pub prefixes: Vec<(String, String)>,
    pub fallback: String,
}

impl Default for GroupSchema {
    fn default() -> Self {
        GroupSchema {
            prefixes: vec![
                ("regional".into(), "reg_".into()),
                ("radiomics".into(), "rad_".into()),
            ],
            fallback: "demographic".into(),
        }
    }
}

impl GroupSchema {
    fn group_of(&self, col_name: &str) -> &str {
        for (name, prefix) in &self.prefixes {
            if col_name.starts_with(prefix.as_str()) {
                return name;
            }
        }
        &self.fallback
    }
}

/// Load a dataset from CSV: header with `id`, `label` and feature columns,
/// labels in {COVID, CAP, UNKNOWN}. Groups are inferred from column-name
/// prefixes and must be contiguous.
pub fn load_dataset(path: &Path, schema: &GroupSchema) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let id_col = headers.iter().position(|h| h == "id");
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| UvhlError::Schema("missing `label` column".into()))?;
    let id_col = id_col.ok_or_else(|| UvhlError::Schema("missing `id` column".into()))?;

    let feature_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != id_col && *i != label_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if feature_cols.is_empty() {
        return Err(UvhlError::Schema("no feature columns".into()));
    }

    // Group layout from column order; each group must be one contiguous run.
    let mut groups: Vec<FeatureGroup> = Vec::new();
    for (j, (_, name)) in feature_cols.iter().enumerate() {
        let gname = schema.group_of(name).to_string();
        match groups.last_mut() {
            Some(last) if last.name == gname => last.cols.end = j + 1,
            _ => {
                if groups.iter().any(|g| g.name == gname) {
                    return Err(UvhlError::Schema(format!(
                        "group `{}` columns are not contiguous",
                        gname
                    )));
                }
                groups.push(FeatureGroup {
                    name: gname,
                    cols: j..j + 1,
                });
            }
        }
    }

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        ids.push(record[id_col].to_string());
        let raw = &record[label_col];
        labels.push(Label::parse(raw).ok_or_else(|| UvhlError::Parse {
            row: row_idx,
            col: "label".into(),
            msg: format!("unknown label `{}`", raw),
        })?);
        for (col, name) in &feature_cols {
            let cell = &record[*col];
            let v: f64 = cell.parse().map_err(|_| UvhlError::Parse {
                row: row_idx,
                col: name.clone(),
                msg: format!("non-numeric value `{}`", cell),
            })?;
            if !v.is_finite() {
                return Err(UvhlError::Parse {
                    row: row_idx,
                    col: name.clone(),
                    msg: "non-finite value".into(),
                });
            }
            values.push(v);
        }
    }
    let n = ids.len();
    let d = feature_cols.len();
    let features = DMatrix::from_row_slice(n, d, &values);
    Dataset::new(ids, features, groups, labels)
}

/// Write a dataset in the same CSV layout `load_dataset` reads.
pub fn write_dataset(dataset: &Dataset, path: &Path, col_names: &[String]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(col_names.iter().cloned());
    writer.write_record(&header)?;
    for i in 0..dataset.n() {
        let mut rec = vec![dataset.ids[i].clone(), dataset.labels[i].as_str().to_string()];
        for j in 0..dataset.d() {
            rec.push(format!("{}", dataset.features[(i, j)]));
        }
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// Default column names for a dataset's group layout: `<prefix>0`, `<prefix>1`, ...
pub fn default_col_names(dataset: &Dataset) -> Vec<String> {
    let mut names = vec![String::new(); dataset.d()];
    for g in &dataset.groups {
        let prefix = match g.name.as_str() {
            "regional" => "reg_",
            "radiomics" => "rad_",
            other => other,
        };
        for (k, c) in g.cols.clone().enumerate() {
            names[c] = format!("{}{}", prefix, k);
        }
    }
    names
}

/// Train-fitted per-column min/max for [0,1] scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub fitted_on: usize,
}

pub fn fit_normalization(dataset: &Dataset, train_rows: &[usize]) -> Result<NormalizationParams> {
    if train_rows.is_empty() {
        return Err(UvhlError::Argument("empty train-row set".into()));
    }
    let d = dataset.d();
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for &i in train_rows {
        for j in 0..d {
            let v = dataset.features[(i, j)];
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    Ok(NormalizationParams {
        min,
        max,
        fitted_on: train_rows.len(),
    })
}

/// Column-wise (v - min) / (max - min). Constant columns map to 0; values
/// outside the fitted range are not clamped.
pub fn apply_normalization(params: &NormalizationParams, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if features.ncols() != params.min.len() {
        return Err(UvhlError::Shape(format!(
            "{} feature columns, params fitted on {}",
            features.ncols(),
            params.min.len()
        )));
    }
    let mut out = features.clone();
    for j in 0..out.ncols() {
        let lo = params.min[j];
        let range = params.max[j] - lo;
        for i in 0..out.nrows() {
            out[(i, j)] = if range == 0.0 {
                0.0
            } else {
                (out[(i, j)] - lo) / range
            };
        }
    }
    Ok(out)
}

/// Stratified fold assignment over labeled cases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold index per case; None for unlabeled cases.
    pub assignments: Vec<Option<usize>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == Some(fold))
            .collect()
    }

    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| matches!(self.assignments[i], Some(f) if f != fold))
            .collect()
    }
}

pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(UvhlError::Argument(format!("fold count {} < 2", k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![None; dataset.n()];
    for class in 0..2 {
        let mut members = dataset.class_indices(class);
        if members.len() < k {
            return Err(UvhlError::Argument(format!(
                "class {} has {} labeled cases, fewer than {} folds",
                class,
                members.len(),
                k
            )));
        }
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            assignments[i] = Some(pos % k);
        }
    }
    Ok(FoldPlan {
        k,
        assignments,
        seed,
    })
}

/// Synthetic two-class Gaussian-cluster generator with controlled label and
/// feature noise.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub mean0: Vec<f64>,
    pub mean1: Vec<f64>,
    pub cov0: DMatrix<f64>,
    pub cov1: DMatrix<f64>,
    /// Group layout as (name, dimension count); dims must sum to d.
    pub groups: Vec<(String, usize)>,
    pub n_per_class: usize,
    pub label_noise: f64,
    pub feature_noise: f64,
    /// Standard-deviation multiplier applied to feature-noise rows.
    pub feature_noise_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Two isotropic clusters at Euclidean distance `separation`, feature
    /// space split into regional/radiomics halves.
    pub fn two_cluster(
        d: usize,
        separation: f64,
        n_per_class: usize,
        label_noise: f64,
        feature_noise: f64,
        seed: u64,
    ) -> SynthSpec {
        let shift = separation / (d as f64).sqrt();
        let half = d / 2;
        SynthSpec {
            mean0: vec![0.0; d],
            mean1: vec![shift; d],
            cov0: DMatrix::identity(d, d),
            cov1: DMatrix::identity(d, d),
            groups: vec![
                ("regional".into(), half),
                ("radiomics".into(), d - half),
            ],
            n_per_class,
            label_noise,
            feature_noise,
            feature_noise_scale: 5.0,
            seed,
        }
    }
}

/// Which rows were corrupted by the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseMask {
    pub flipped: Vec<bool>,
    pub feature_noise: Vec<bool>,
}

fn exact_count_mask(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let count = (rate * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut mask = vec![false; n];
    for &i in idx.iter().take(count) {
        mask[i] = true;
    }
    mask
}

pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, NoiseMask)> {
    if spec.n_per_class < 1 {
        return Err(UvhlError::Argument("n_per_class must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) || !(0.0..=1.0).contains(&spec.feature_noise) {
        return Err(UvhlError::Argument("noise rates must lie in [0,1]".into()));
    }
    let d = spec.mean0.len();
    if spec.mean1.len() != d || spec.cov0.nrows() != d || spec.cov1.nrows() != d {
        return Err(UvhlError::Shape("mean/covariance dimensions disagree".into()));
    }
    if spec.groups.iter().map(|(_, w)| w).sum::<usize>() != d {
        return Err(UvhlError::Schema("group dims do not sum to d".into()));
    }
    let chol0 = spec
        .cov0
        .clone()
        .cholesky()
        .ok_or_else(|| UvhlError::Argument("cov0 is not positive definite".into()))?;
    let chol1 = spec
        .cov1
        .clone()
        .cholesky()
        .ok_or_else(|| UvhlError::Argument("cov1 is not positive definite".into()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = 2 * spec.n_per_class;
    let mut features = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);

    let mut flipped = vec![false; n];
    let mut feat_noise = vec![false; n];
    for class in 0..2 {
        let flip_mask = exact_count_mask(spec.n_per_class, spec.label_noise, &mut rng);
        let noise_mask = exact_count_mask(spec.n_per_class, spec.feature_noise, &mut rng);
        let (mean, chol) = if class == 0 {
            (&spec.mean0, &chol0)
        } else {
            (&spec.mean1, &chol1)
        };
        let l = chol.l();
        for r in 0..spec.n_per_class {
            let row = class * spec.n_per_class + r;
            let scale = if noise_mask[r] {
                spec.feature_noise_scale
            } else {
                1.0
            };
            let z: Vec<f64> = (0..d)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let dev = &l * nalgebra::DVector::from_vec(z);
            for j in 0..d {
                features[(row, j)] = mean[j] + scale * dev[j];
            }
            let true_label = Label::from_class_index(class);
            labels.push(if flip_mask[r] {
                Label::from_class_index(1 - class)
            } else {
                true_label
            });
            ids.push(format!("case_{:05}", row));
            flipped[row] = flip_mask[r];
            feat_noise[row] = noise_mask[r];
        }
    }

    let mut groups = Vec::new();
    let mut start = 0;
    for (name, width) in &spec.groups {
        groups.push(FeatureGroup {
            name: name.clone(),
            cols: start..start + width,
        });
        start += width;
    }
    let dataset = Dataset::new(ids, features, groups, labels)?;
    Ok((
        dataset,
        NoiseMask {
            flipped,
            feature_noise: feat_noise,
        },
    ))
}

/// Sidecar noise-mask CSV: `id,flipped,feature_noise`.
pub fn write_noise_mask(dataset: &Dataset, mask: &NoiseMask, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["id", "flipped", "feature_noise"])?;
    for i in 0..dataset.n() {
        writer.write_record([
            dataset.ids[i].as_str(),
            if mask.flipped[i] { "1" } else { "0" },
            if mask.feature_noise[i] { "1" } else { "0" },
        ])?;
    }
    writer.flush()?;
    Ok(())
}
