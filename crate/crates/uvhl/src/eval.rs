//! Confusion-matrix metrics, the cross-validation harness, nested k
//! selection, ablation runs and significance testing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{self, Dataset};
use crate::error::{Result, UvhlError};
use crate::hypergraph::{build_incidence, knn_hyperedges};
use crate::solver::{initial_labels, predict_labels, solve_closed_form};
use crate::uncertainty::{self, normalize_scores, TrainConfig, VertexWeights};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Counts with COVID-19 (class 0) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

pub fn confusion(pred: &[usize], truth: &[usize]) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(UvhlError::Argument(format!(
            "{} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mut cm = ConfusionMatrix {
        tp: 0,
        fn_: 0,
        fp: 0,
        tn: 0,
    };
    for (&p, &t) in pred.iter().zip(truth) {
        match (t, p) {
            (0, 0) => cm.tp += 1,
            (0, _) => cm.fn_ += 1,
            (_, 0) => cm.fp += 1,
            _ => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// The six summary metrics; a zero denominator leaves the metric undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spec: Option<f64>,
    pub bac: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let sen = ratio(cm.tp, cm.tp + cm.fn_);
    let spec = ratio(cm.tn, cm.tn + cm.fp);
    Metrics {
        acc: ratio(cm.tp + cm.tn, cm.total()),
        sen,
        spec,
        bac: match (sen, spec) {
            (Some(s), Some(p)) => Some((s + p) / 2.0),
            _ => None,
        },
        ppv: ratio(cm.tp, cm.tp + cm.fp),
        npv: ratio(cm.tn, cm.tn + cm.fn_),
    }
}

impl Metrics {
    pub fn named(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("ACC", self.acc),
            ("SEN", self.sen),
            ("SPEC", self.spec),
            ("BAC", self.bac),
            ("PPV", self.ppv),
            ("NPV", self.npv),
        ]
    }
}

/// Two-sided Welch two-sample t-test. Two zero-variance samples with equal
/// means yield p = 1 by convention (p = 0 when the means differ).
pub fn welch_t_test(runs_a: &[f64], runs_b: &[f64]) -> Result<f64> {
    if runs_a.len() < 2 || runs_b.len() < 2 {
        return Err(UvhlError::Argument("each sample needs >= 2 values".into()));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let var = |s: &[f64], m: f64| {
        s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64
    };
    let (ma, mb) = (mean(runs_a), mean(runs_b));
    let (va, vb) = (var(runs_a, ma), var(runs_b, mb));
    let (na, nb) = (runs_a.len() as f64, runs_b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| UvhlError::Argument(format!("t distribution: {}", e)))?;
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}

/// Vertex-weighting scheme under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// All vertex weights 1 (classical transductive hypergraph learning).
    EqualWeight,
    /// Weights from the aleatoric score alone.
    AleatoricOnly,
    /// Weights from the MC prediction-variance part alone.
    EpistemicOnly,
    /// Weights from the combined epistemic score.
    Uvhl,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::EqualWeight,
        Method::AleatoricOnly,
        Method::EpistemicOnly,
        Method::Uvhl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::EqualWeight => "equal-weight",
            Method::AleatoricOnly => "aleatoric-only",
            Method::EpistemicOnly => "epistemic-only",
            Method::Uvhl => "uvhl",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "equal-weight" => Some(Method::EqualWeight),
            "aleatoric-only" => Some(Method::AleatoricOnly),
            "epistemic-only" => Some(Method::EpistemicOnly),
            "uvhl" => Some(Method::Uvhl),
            _ => None,
        }
    }

    fn needs_uncertainty(&self) -> bool {
        !matches!(self, Method::EqualWeight)
    }
}

/// Neighborhood size: fixed, or chosen per outer fold by nested 5-fold CV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KChoice {
    Fixed(usize),
    Pool(Vec<usize>),
}

impl Default for KChoice {
    fn default() -> Self {
        KChoice::Fixed(5)
    }
}

/// Candidate pool from the evaluation protocol: [2, 3, ..., 20].
pub fn default_k_pool() -> Vec<usize> {
    (2..=20).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
    pub master_seed: u64,
    pub method: Method,
    /// Subset of feature-group names to use; None = all groups.
    pub groups: Option<Vec<String>>,
    pub k_nn: KChoice,
    pub lambda_u: f64,
    pub lambda_r: f64,
    pub mc_passes: usize,
    pub train: TrainConfig,
    /// Few-label knob: cap on labeled training cases per class.
    pub train_per_class: Option<usize>,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 10,
            repeats: 1,
            master_seed: 0,
            method: Method::Uvhl,
            groups: None,
            k_nn: KChoice::default(),
            lambda_u: -1.0,
            lambda_r: 1.0,
            mc_passes: 20,
            train: TrainConfig::default(),
            train_per_class: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldRecord {
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    pub k_nn: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// Mean vertex weight over this fold's hypergraph.
    pub mean_vertex_weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub defined_rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: CvConfig,
    pub rows: Vec<FoldRecord>,
    pub summary: Vec<MetricSummary>,
}

impl EvalReport {
    fn summarize(config: CvConfig, rows: Vec<FoldRecord>) -> EvalReport {
        let names = ["ACC", "SEN", "SPEC", "BAC", "PPV", "NPV"];
        let summary = names
            .iter()
            .map(|&name| {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| {
                        r.metrics
                            .named()
                            .iter()
                            .find(|(n, _)| *n == name)
                            .and_then(|(_, v)| *v)
                    })
                    .collect();
                let n = vals.len();
                let mean = if n == 0 {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / n as f64
                };
                let std = if n < 2 {
                    0.0
                } else {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                };
                MetricSummary {
                    name: name.to_string(),
                    mean,
                    std,
                    defined_rows: n,
                }
            })
            .collect();
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config,
            rows,
            summary,
        }
    }

    pub fn metric_values(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| {
                r.metrics
                    .named()
                    .iter()
                    .find(|(n, _)| *n == name)
                    .and_then(|(_, v)| *v)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<EvalReport> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "repeat", "fold", "seed", "k_nn", "tp", "fn", "fp", "tn", "acc", "sen", "spec",
            "bac", "ppv", "npv",
        ])?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{}", x)).unwrap_or_else(|| "NA".into());
        for r in &self.rows {
            w.write_record([
                r.repeat.to_string(),
                r.fold.to_string(),
                r.seed.to_string(),
                r.k_nn.to_string(),
                r.confusion.tp.to_string(),
                r.confusion.fn_.to_string(),
                r.confusion.fp.to_string(),
                r.confusion.tn.to_string(),
                fmt(r.metrics.acc),
                fmt(r.metrics.sen),
                fmt(r.metrics.spec),
                fmt(r.metrics.bac),
                fmt(r.metrics.ppv),
                fmt(r.metrics.npv),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| UvhlError::Schema(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn mix_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut x = master
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x
}

/// Per-case uncertainty outputs for one trained fold model.
pub struct FoldScores {
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
}

fn weights_for(method: Method, scores: Option<&FoldScores>, n: usize, lambda_u: f64) -> Result<VertexWeights> {
    match method {
        Method::EqualWeight => Ok(VertexWeights::equal(n)),
        Method::AleatoricOnly => {
            let s = scores.expect("scores required");
            normalize_scores(&s.aleatoric, &s.aleatoric, lambda_u)
        }
        Method::EpistemicOnly => {
            let s = scores.expect("scores required");
            let variance_part: Vec<f64> = s
                .epistemic
                .iter()
                .zip(&s.aleatoric)
                .map(|(e, a)| e - a)
                .collect();
            normalize_scores(&s.aleatoric, &variance_part, lambda_u)
        }
        Method::Uvhl => {
            let s = scores.expect("scores required");
            normalize_scores(&s.aleatoric, &s.epistemic, lambda_u)
        }
    }
}

/// One train/test split evaluated for several weighting methods with a
/// single shared model. Returns per-method predictions for the test rows
/// (in `test` order) plus the mean vertex weight used.
pub fn run_split(
    dataset: &Dataset,
    train: &[usize],
    test: &[usize],
    k_nn: usize,
    config: &CvConfig,
    methods: &[Method],
    seed: u64,
) -> Result<Vec<(Method, Vec<usize>, f64)>> {
    // vertex order: train rows then test rows
    let mut vertices: Vec<usize> = train.to_vec();
    vertices.extend_from_slice(test);
    let n = vertices.len();

    let params = data::fit_normalization(dataset, train)?;
    let all_rows = dataset.features.select_rows(&vertices);
    let normalized = data::apply_normalization(&params, &all_rows)?;

    let train_rows: Vec<usize> = (0..train.len()).collect();
    let train_features = normalized.select_rows(&train_rows);
    let train_labels: Vec<usize> = train
        .iter()
        .map(|&i| {
            dataset.labels[i]
                .class_index()
                .ok_or_else(|| UvhlError::Argument(format!("case {} is unlabeled", i)))
        })
        .collect::<Result<_>>()?;

    let needs_model = methods.iter().any(|m| m.needs_uncertainty());
    let scores = if needs_model {
        let mut train_cfg = config.train.clone();
        train_cfg.seed = mix_seed(seed, 1, 0);
        let model = uncertainty::train(&train_features, &train_labels, &train_cfg)?;
        let (aleatoric, epistemic, _) =
            uncertainty::score_all(&model, &normalized, config.mc_passes, mix_seed(seed, 2, 0))?;
        Some(FoldScores {
            aleatoric,
            epistemic,
        })
    } else {
        None
    };

    // per-group kNN hyperedges on normalized features
    let mut edge_groups = Vec::new();
    for g in &dataset.groups {
        let cols: Vec<usize> = g.cols.clone().collect();
        let group_features = normalized.select_columns(&cols);
        edge_groups.push((g.name.clone(), knn_hyperedges(&group_features, k_nn)?));
    }

    let y_labels: Vec<Option<usize>> = (0..n)
        .map(|pos| {
            if pos < train.len() {
                Some(train_labels[pos])
            } else {
                None
            }
        })
        .collect();
    let y = initial_labels(&y_labels, 2);
    let test_positions: Vec<usize> = (train.len()..n).collect();

    let mut out = Vec::new();
    for &method in methods {
        let weights = weights_for(method, scores.as_ref(), n, config.lambda_u)?;
        let hg = build_incidence(&edge_groups, &weights)?;
        let theta = hg.theta()?;
        let f = solve_closed_form(&theta, &hg.vertex_weights, &y, config.lambda_r)?;
        let preds = predict_labels(&f, &test_positions)?;
        let mean_w = weights.weights.iter().sum::<f64>() / n as f64;
        out.push((method, preds, mean_w));
    }
    Ok(out)
}

/// Pick the pool member with the highest mean inner 5-fold accuracy on the
/// training subset; ties resolve to the smallest k.
pub fn select_k(
    dataset: &Dataset,
    train_subset: &[usize],
    pool: &[usize],
    config: &CvConfig,
    seed: u64,
) -> Result<usize> {
    if pool.is_empty() {
        return Err(UvhlError::Argument("empty k pool".into()));
    }
    if pool.len() == 1 {
        return Ok(pool[0]);
    }
    let inner = dataset.subset(train_subset)?;
    let plan = data::stratified_kfold(&inner, 5, mix_seed(seed, 3, 0))?;
    let mut best: Option<(usize, f64)> = None;
    for &k in pool {
        let mut accs = Vec::new();
        for fold in 0..5 {
            let test = plan.fold_members(fold);
            let train = plan.complement(fold);
            if k >= train.len() + test.len() {
                continue;
            }
            let results = run_split(
                &inner,
                &train,
                &test,
                k,
                config,
                &[config.method],
                mix_seed(seed, 4, fold as u64),
            )?;
            let (_, preds, _) = &results[0];
            let truth: Vec<usize> = test
                .iter()
                .map(|&i| inner.labels[i].class_index().unwrap())
                .collect();
            let cm = confusion(preds, &truth)?;
            if let Some(acc) = metrics(&cm).acc {
                accs.push(acc);
            }
        }
        if accs.is_empty() {
            continue;
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let better = match best {
            None => true,
            Some((bk, bacc)) => mean > bacc || (mean == bacc && k < bk),
        };
        if better {
            best = Some((k, mean));
        }
    }
    best.map(|(k, _)| k)
        .ok_or_else(|| UvhlError::Argument("no usable k in pool".into()))
}

fn subsample_per_class(
    dataset: &Dataset,
    train: &[usize],
    cap: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for class in 0..2 {
        let mut members: Vec<usize> = train
            .iter()
            .copied()
            .filter(|&i| dataset.labels[i].class_index() == Some(class))
            .collect();
        members.shuffle(&mut rng);
        members.truncate(cap);
        kept.extend(members);
    }
    kept.sort_unstable();
    kept
}

/// Repeated stratified cross-validation for several methods at once; every
/// method shares the per-fold trained model and hypergraph neighborhoods.
pub fn cross_validate_multi(
    dataset: &Dataset,
    config: &CvConfig,
    methods: &[Method],
) -> Result<Vec<(Method, EvalReport)>> {
    let working = match &config.groups {
        Some(names) => dataset.select_groups(names)?,
        None => dataset.clone(),
    };
    let mut rows: Vec<Vec<FoldRecord>> = methods.iter().map(|_| Vec::new()).collect();
    for repeat in 0..config.repeats {
        let repeat_seed = mix_seed(config.master_seed, 10, repeat as u64);
        let plan = data::stratified_kfold(&working, config.folds, repeat_seed)?;
        for fold in 0..config.folds {
            let fold_seed = mix_seed(repeat_seed, 20, fold as u64);
            let annotate = |e: UvhlError| UvhlError::Fold {
                fold,
                source: Box::new(e),
            };
            let test = plan.fold_members(fold);
            let mut train = plan.complement(fold);
            if let Some(cap) = config.train_per_class {
                train = subsample_per_class(&working, &train, cap, mix_seed(fold_seed, 5, 0));
            }
            let k_nn = match &config.k_nn {
                KChoice::Fixed(k) => *k,
                KChoice::Pool(pool) => {
                    select_k(&working, &train, pool, config, fold_seed).map_err(annotate)?
                }
            };
            let results = run_split(
                &working,
                &train,
                &test,
                k_nn,
                config,
                methods,
                fold_seed,
            )
            .map_err(annotate)?;
            let truth: Vec<usize> = test
                .iter()
                .map(|&i| working.labels[i].class_index().unwrap())
                .collect();
            for (slot, (_, preds, mean_w)) in results.iter().enumerate() {
                let cm = confusion(preds, &truth).map_err(annotate)?;
                rows[slot].push(FoldRecord {
                    repeat,
                    fold,
                    seed: fold_seed,
                    k_nn,
                    confusion: cm,
                    metrics: metrics(&cm),
                    mean_vertex_weight: *mean_w,
                });
            }
        }
    }
    Ok(methods
        .iter()
        .zip(rows)
        .map(|(&method, rows)| {
            let mut cfg = config.clone();
            cfg.method = method;
            (method, EvalReport::summarize(cfg, rows))
        })
        .collect())
}

/// Cross-validate the configured method alone.
pub fn cross_validate(dataset: &Dataset, config: &CvConfig) -> Result<EvalReport> {
    let mut results = cross_validate_multi(dataset, config, &[config.method])?;
    Ok(results.remove(0).1)
}

/// Ranking quality of a score against a binary mask: probability that a
/// positive row outranks a negative one (ties count half).
pub fn ranking_auc(scores: &[f64], positives: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if !positives[i] {
            continue;
        }
        for j in 0..scores.len() {
            if positives[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        0.5
    } else {
        wins / pairs
    }
}
