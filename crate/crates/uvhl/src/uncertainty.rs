//! Dual-head perceptron with an attenuated classification loss, Monte-Carlo
//! dropout scoring and sigmoid-normalized vertex weights.
//!
//! The network maps a feature vector through ReLU hidden layers to a softmax
//! class head and a scalar log-variance head. The loss per case is
//! `0.5 * exp(-alpha) * CE + 0.5 * alpha`, so the log-variance head learns to
//! down-weight cases whose labels the class head cannot fit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UvhlError};

const LOG_EPS: f64 = 1e-12;

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![64, 32],
            dropout: 0.5,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> LayerParams {
        LayerParams {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DVector::zeros(self.b.nrows()),
        }
    }
}

/// Trained dual-head network. Immutable after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyModel {
    pub hidden: Vec<LayerParams>,
    pub class_head: LayerParams,
    pub alpha_head: LayerParams,
    pub dropout: f64,
    pub seed: u64,
}

/// One stochastic forward pass: softmax probabilities and the log-variance.
pub type Pass = (DVector<f64>, f64);

fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let exps = logits.map(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Attenuated loss for one case: `0.5 * exp(-alpha) * CE + 0.5 * alpha`
/// with natural-log cross-entropy; the probability at the true label is
/// clamped at 1e-12 before the log.
pub fn attenuated_loss(prob: &DVector<f64>, alpha: f64, label: usize) -> f64 {
    let ce = -prob[label].max(LOG_EPS).ln();
    0.5 * (-alpha).exp() * ce + 0.5 * alpha
}

struct ForwardCache {
    /// Input followed by each hidden layer's post-mask activation.
    activations: Vec<DVector<f64>>,
    /// Hidden pre-activations.
    pre: Vec<DVector<f64>>,
    prob: DVector<f64>,
    alpha: f64,
}

#[derive(Clone)]
struct Gradients {
    hidden: Vec<LayerParams>,
    class_head: LayerParams,
    alpha_head: LayerParams,
}

impl UncertaintyModel {
    fn init(input_dim: usize, config: &TrainConfig, rng: &mut ChaCha8Rng) -> UncertaintyModel {
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden);
        let mut he_layer = |rows: usize, cols: usize| {
            let std = (2.0 / cols as f64).sqrt();
            LayerParams {
                w: DMatrix::from_fn(rows, cols, |_, _| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                }),
                b: DVector::zeros(rows),
            }
        };
        let hidden = (1..dims.len())
            .map(|i| he_layer(dims[i], dims[i - 1]))
            .collect::<Vec<_>>();
        let last = *dims.last().unwrap();
        let class_head = he_layer(2, last);
        // start the log-variance head at alpha = 0 for every input
        let alpha_head = LayerParams {
            w: DMatrix::zeros(1, last),
            b: DVector::zeros(1),
        };
        UncertaintyModel {
            hidden,
            class_head,
            alpha_head,
            dropout: config.dropout,
            seed: config.seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map(|l| l.w.ncols())
            .unwrap_or(self.class_head.w.ncols())
    }

    fn sample_masks(&self, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
        let keep = 1.0 - self.dropout;
        self.hidden
            .iter()
            .map(|l| {
                DVector::from_fn(l.b.nrows(), |_, _| {
                    if self.dropout == 0.0 || rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            })
            .collect()
    }

    fn forward_cached(&self, x: &DVector<f64>, masks: Option<&[DVector<f64>]>) -> ForwardCache {
        let mut activations = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut h = x.clone();
        for (i, layer) in self.hidden.iter().enumerate() {
            let z = &layer.w * &h + &layer.b;
            let mut a = z.map(relu);
            if let Some(masks) = masks {
                a.component_mul_assign(&masks[i]);
            }
            pre.push(z);
            activations.push(a.clone());
            h = a;
        }
        let logits = &self.class_head.w * &h + &self.class_head.b;
        let alpha = (&self.alpha_head.w * &h + &self.alpha_head.b)[0];
        ForwardCache {
            activations,
            pre,
            prob: softmax(&logits),
            alpha,
        }
    }

    /// Deterministic forward pass with dropout disabled.
    pub fn forward(&self, x: &DVector<f64>) -> Pass {
        let cache = self.forward_cached(x, None);
        (cache.prob, cache.alpha)
    }

    /// Loss and parameter gradients for one case under fixed dropout masks.
    fn backprop(
        &self,
        x: &DVector<f64>,
        label: usize,
        masks: Option<&[DVector<f64>]>,
    ) -> (f64, Gradients) {
        let cache = self.forward_cached(x, masks);
        let loss = attenuated_loss(&cache.prob, cache.alpha, label);

        let ce = -cache.prob[label].max(LOG_EPS).ln();
        let att = (-cache.alpha).exp();
        // d loss / d logits = 0.5 * exp(-alpha) * (p - y)
        let mut dlogits = cache.prob.clone();
        dlogits[label] -= 1.0;
        dlogits *= 0.5 * att;
        // d loss / d alpha = 0.5 * (1 - exp(-alpha) * CE)
        let dalpha = 0.5 * (1.0 - att * ce);

        let last_act = cache.activations.last().unwrap();
        let class_grad = LayerParams {
            w: &dlogits * last_act.transpose(),
            b: dlogits.clone(),
        };
        let alpha_grad = LayerParams {
            w: DMatrix::from_fn(1, last_act.nrows(), |_, j| dalpha * last_act[j]),
            b: DVector::from_element(1, dalpha),
        };

        let mut dh = self.class_head.w.transpose() * &dlogits
            + self.alpha_head.w.transpose() * DVector::from_element(1, dalpha);
        let mut hidden_grads: Vec<LayerParams> = self
            .hidden
            .iter()
            .map(|l| l.zeros_like())
            .collect();
        for i in (0..self.hidden.len()).rev() {
            if let Some(masks) = masks {
                dh.component_mul_assign(&masks[i]);
            }
            let dz = DVector::from_fn(dh.nrows(), |r, _| {
                if cache.pre[i][r] > 0.0 {
                    dh[r]
                } else {
                    0.0
                }
            });
            hidden_grads[i].w = &dz * cache.activations[i].transpose();
            hidden_grads[i].b = dz.clone();
            dh = self.hidden[i].w.transpose() * dz;
        }
        (
            loss,
            Gradients {
                hidden: hidden_grads,
                class_head: class_grad,
                alpha_head: alpha_grad,
            },
        )
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.hidden.iter().chain([&self.class_head, &self.alpha_head]) {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        let mut layers: Vec<&mut LayerParams> = self.hidden.iter_mut().collect();
        layers.push(&mut self.class_head);
        layers.push(&mut self.alpha_head);
        for l in layers {
            for v in l.w.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
        }
        assert_eq!(pos, flat.len());
    }

    /// Loss and flattened analytic gradient for one case; dropout disabled.
    /// Exposed for finite-difference verification.
    pub fn loss_and_grad_flat(&self, x: &DVector<f64>, label: usize) -> (f64, Vec<f64>) {
        let (loss, grads) = self.backprop(x, label, None);
        let mut flat = Vec::new();
        for l in grads
            .hidden
            .iter()
            .chain([&grads.class_head, &grads.alpha_head])
        {
            flat.extend(l.w.iter());
            flat.extend(l.b.iter());
        }
        (loss, flat)
    }

    /// Serialize the checkpoint; the JSON round-trips weights bit-exactly.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<UncertaintyModel> {
        Ok(serde_json::from_str(s)?)
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    lr: f64,
}

impl Adam {
    fn new(dim: usize, lr: f64) -> Adam {
        Adam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Train the dual-head network by minimizing the mean attenuated loss with
/// dropout active on hidden layers. Deterministic given the seed.
pub fn train(
    features: &DMatrix<f64>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<UncertaintyModel> {
    let n = features.nrows();
    if n != labels.len() {
        return Err(UvhlError::Shape(format!(
            "{} feature rows vs {} labels",
            n,
            labels.len()
        )));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(UvhlError::Argument(
            "training set must contain both classes".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(UvhlError::Argument("dropout must lie in [0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = UncertaintyModel::init(features.ncols(), config, &mut rng);

    let mut flat = model.params_flat();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        // Fisher-Yates with the shared rng stream
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(config.batch_size) {
            let mut grad_acc = vec![0.0; flat.len()];
            let mut loss_acc = 0.0;
            for &idx in batch {
                let x = DVector::from_iterator(
                    features.ncols(),
                    features.row(idx).iter().copied(),
                );
                let masks = model.sample_masks(&mut rng);
                let (loss, grads) = model.backprop(&x, labels[idx], Some(&masks));
                loss_acc += loss;
                let mut pos = 0;
                for l in grads
                    .hidden
                    .iter()
                    .chain([&grads.class_head, &grads.alpha_head])
                {
                    for v in l.w.iter() {
                        grad_acc[pos] += v;
                        pos += 1;
                    }
                    for v in l.b.iter() {
                        grad_acc[pos] += v;
                        pos += 1;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grad_acc.iter_mut() {
                *g *= scale;
            }
            if !(loss_acc * scale).is_finite() {
                return Err(UvhlError::Training {
                    epoch,
                    msg: "loss is not finite".into(),
                });
            }
            adam.step(&mut flat, &grad_acc);
            model.set_params_flat(&flat);
        }
    }
    Ok(model)
}

/// `T` stochastic forward passes with dropout kept active; deterministic
/// given the seed.
pub fn mc_forward(
    model: &UncertaintyModel,
    x: &DVector<f64>,
    passes: usize,
    seed: u64,
) -> Result<Vec<Pass>> {
    if passes == 0 {
        return Err(UvhlError::Argument("pass count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..passes)
        .map(|_| {
            let masks = model.sample_masks(&mut rng);
            let cache = model.forward_cached(x, Some(&masks));
            (cache.prob, cache.alpha)
        })
        .collect())
}

/// Arithmetic mean of the per-pass probability vectors.
pub fn mean_prediction(passes: &[Pass]) -> Result<DVector<f64>> {
    if passes.is_empty() {
        return Err(UvhlError::Argument("no passes".into()));
    }
    let mut acc = DVector::zeros(passes[0].0.nrows());
    for (p, _) in passes {
        acc += p;
    }
    Ok(acc / passes.len() as f64)
}

/// Mean of `exp(alpha)` over the MC passes.
pub fn aleatoric_score(passes: &[Pass]) -> Result<f64> {
    if passes.is_empty() {
        return Err(UvhlError::Argument("no passes".into()));
    }
    Ok(passes.iter().map(|(_, a)| a.exp()).sum::<f64>() / passes.len() as f64)
}

/// Aleatoric score plus the MC prediction variance:
/// `A + mean(f^T f) - mean(f)^T mean(f)`.
pub fn epistemic_score(passes: &[Pass]) -> Result<f64> {
    let a = aleatoric_score(passes)?;
    let mean = mean_prediction(passes)?;
    let sq = passes.iter().map(|(p, _)| p.dot(p)).sum::<f64>() / passes.len() as f64;
    // The variance term is nonnegative; clamp away rounding-induced negatives.
    Ok(a + (sq - mean.dot(&mean)).max(0.0))
}

/// Per-vertex uncertainty scores and sigmoid-normalized weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VertexWeights {
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub weights: Vec<f64>,
    pub lambda_u: f64,
    pub mu_e: f64,
    pub s_e: f64,
}

impl VertexWeights {
    /// All weights 1, as in the equal-weight baseline.
    pub fn equal(n: usize) -> VertexWeights {
        VertexWeights {
            aleatoric: vec![1.0; n],
            epistemic: vec![1.0; n],
            weights: vec![1.0; n],
            lambda_u: 0.0,
            mu_e: 0.0,
            s_e: 0.0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Standardize the epistemic scores over all vertices and squash through a
/// sigmoid with sharpness `lambda_u`. Zero spread yields all weights 0.5.
pub fn normalize_scores(
    aleatoric: &[f64],
    epistemic: &[f64],
    lambda_u: f64,
) -> Result<VertexWeights> {
    let n = epistemic.len();
    if n == 0 {
        return Err(UvhlError::Argument("no scores".into()));
    }
    if aleatoric.len() != n {
        return Err(UvhlError::Shape("score vectors disagree in length".into()));
    }
    if !lambda_u.is_finite() {
        return Err(UvhlError::Argument("lambda_u must be finite".into()));
    }
    let mu_e = epistemic.iter().sum::<f64>() / n as f64;
    let var = epistemic.iter().map(|e| (e - mu_e).powi(2)).sum::<f64>() / n as f64;
    let s_e = var.sqrt();
    let weights = epistemic
        .iter()
        .map(|&e| {
            let w = if s_e == 0.0 {
                0.5
            } else {
                sigmoid(lambda_u * (e - mu_e) / s_e)
            };
            w.clamp(LOG_EPS, 1.0 - LOG_EPS)
        })
        .collect();
    Ok(VertexWeights {
        aleatoric: aleatoric.to_vec(),
        epistemic: epistemic.to_vec(),
        weights,
        lambda_u,
        mu_e,
        s_e,
    })
}

/// MC-score every row of a feature matrix. Each case draws from an
/// independent RNG stream keyed by (seed, row index).
pub fn score_all(
    model: &UncertaintyModel,
    features: &DMatrix<f64>,
    passes: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<DVector<f64>>)> {
    let mut aleatoric = Vec::with_capacity(features.nrows());
    let mut epistemic = Vec::with_capacity(features.nrows());
    let mut preds = Vec::with_capacity(features.nrows());
    for i in 0..features.nrows() {
        let x = DVector::from_iterator(features.ncols(), features.row(i).iter().copied());
        let case_seed = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1));
        let p = mc_forward(model, &x, passes, case_seed)?;
        aleatoric.push(aleatoric_score(&p)?);
        epistemic.push(epistemic_score(&p)?);
        preds.push(mean_prediction(&p)?);
    }
    Ok((aleatoric, epistemic, preds))
}

/// Fraction of rows whose deterministic argmax matches the label.
pub fn accuracy(model: &UncertaintyModel, features: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let mut correct = 0;
    for i in 0..features.nrows() {
        let x = DVector::from_iterator(features.ncols(), features.row(i).iter().copied());
        let (prob, _) = model.forward(&x);
        let pred = if prob[0] >= prob[1] { 0 } else { 1 };
        if pred == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / features.nrows() as f64
}
