//! End-to-end acceptance suite. Each test prints a single
//! `ACCEPTANCE <n> (<name>): PASS|FAIL` line before asserting, so the
//! verdict survives in captured output either way.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use uvhl::data::{
    fit_normalization, stratified_kfold, synth_generate, SynthSpec,
};
use uvhl::data::apply_normalization;
use uvhl::eval::{
    confusion, cross_validate, cross_validate_multi, metrics, ranking_auc, run_split,
    welch_t_test, CvConfig, KChoice, Method,
};
use uvhl::hypergraph::{build_incidence, knn_hyperedges, Hypergraph};
use uvhl::solver::{
    initial_labels, objective_gradient, predict_labels, solve_closed_form, solve_iterative,
};
use uvhl::uncertainty::{
    attenuated_loss, score_all, train, TrainConfig, UncertaintyModel, VertexWeights,
};

fn verdict(idx: usize, name: &str, ok: bool) {
    println!(
        "ACCEPTANCE {} ({}): {}",
        idx,
        name,
        if ok { "PASS" } else { "FAIL" }
    );
}

/// Random solver instance: a kNN hypergraph over random features with the
/// requested vertex weights, plus a partial one-hot label matrix.
fn random_instance(
    n: usize,
    weights: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> (Hypergraph, DVector<f64>, DMatrix<f64>) {
    let d = rng.gen_range(2..=4);
    let feats = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
    let k_nn = rng.gen_range(1..=3.min(n - 1));
    let groups = vec![
        ("a".to_string(), knn_hyperedges(&feats, k_nn).unwrap()),
        (
            "b".to_string(),
            knn_hyperedges(&feats.columns(0, d - 1).into_owned(), k_nn).unwrap(),
        ),
    ];
    let mut vw = VertexWeights::equal(n);
    vw.weights = weights;
    let hg = build_incidence(&groups, &vw).unwrap();
    let u = DVector::from_vec(vw.weights.clone());
    let labels: Vec<Option<usize>> = (0..n)
        .map(|i| {
            if i % 2 == 0 {
                Some(rng.gen_range(0..2usize))
            } else {
                None
            }
        })
        .collect();
    let y = initial_labels(&labels, 2);
    (hg, u, y)
}

#[test]
fn criterion_1_solver_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.gen_range(6..=50);
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
        let (hg, u, y) = random_instance(n, weights, &mut rng);
        let theta = hg.theta().unwrap();
        let lambda_r = 1.0;
        let f_closed = solve_closed_form(&theta, &u, &y, lambda_r).unwrap();
        let f_iter = solve_iterative(&theta, &u, &y, lambda_r, 1e-10, 200_000).unwrap();
        let diff = (&f_closed - &f_iter).abs().max();
        let grad = objective_gradient(&f_closed, &theta, &u, &y, lambda_r);
        let grad_zero = objective_gradient(&DMatrix::zeros(n, 2), &theta, &u, &y, lambda_r);
        let rel = grad.abs().max() / grad_zero.abs().max();
        if diff > 1e-6 || rel > 1e-8 {
            ok = false;
        }
    }
    let within_time = start.elapsed().as_secs_f64() < 30.0;
    verdict(1, "solver oracle equivalence", ok && within_time);
    assert!(ok, "closed-form and iterative solutions disagree");
    assert!(within_time, "exceeded 30 s budget: {:?}", start.elapsed());
}

/// Independent classical transductive solve with unit vertex weights:
/// `F = lambda_r (I - Theta + lambda_r I)^{-1} Y`, via plain Gaussian
/// elimination with partial pivoting (no shared code with the solver).
fn classical_transductive(theta: &DMatrix<f64>, y: &DMatrix<f64>, lambda_r: f64) -> DMatrix<f64> {
    let n = y.nrows();
    let c = y.ncols();
    let mut a = vec![vec![0.0; n + c]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = -theta[(i, j)];
        }
        a[i][i] += 1.0 + lambda_r;
        for j in 0..c {
            a[i][n + j] = lambda_r * y[(i, j)];
        }
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        let pv = a[col][col];
        for j in col..n + c {
            a[col][j] /= pv;
        }
        for row in 0..n {
            if row != col {
                let factor = a[row][col];
                for j in col..n + c {
                    a[row][j] -= factor * a[col][j];
                }
            }
        }
    }
    DMatrix::from_fn(n, c, |i, j| a[i][n + j])
}

#[test]
fn criterion_2_equal_weight_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut ok = true;
    for _ in 0..50 {
        let n = rng.gen_range(6..=40);
        let (hg, u, y) = random_instance(n, vec![1.0; n], &mut rng);
        let theta = hg.theta().unwrap();
        let f = solve_closed_form(&theta, &u, &y, 1.0).unwrap();
        let oracle = classical_transductive(&theta, &y, 1.0);
        if (&f - &oracle).abs().max() > 1e-10 {
            ok = false;
        }
    }
    verdict(2, "equal-weight reduction", ok);
    assert!(ok, "equal-weight solve deviates from the classical oracle");
}

/// A network with random parameters drawn fresh, obtained by retuning a
/// minimally trained model so every head carries nonzero weights.
fn random_network(d: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> UncertaintyModel {
    let x = DMatrix::from_fn(4, d, |_, _| rng.gen_range(-1.0..1.0));
    let labels = vec![0, 1, 0, 1];
    let cfg = TrainConfig {
        hidden: hidden.to_vec(),
        dropout: 0.0,
        epochs: 1,
        seed: rng.gen(),
        ..TrainConfig::default()
    };
    let mut model = train(&x, &labels, &cfg).unwrap();
    let flat: Vec<f64> = (0..model.params_flat().len())
        .map(|_| rng.gen_range(-0.7..0.7))
        .collect();
    model.set_params_flat(&flat);
    model
}

#[test]
fn criterion_3_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut ok = true;
    for _ in 0..20 {
        let d = rng.gen_range(1..=8);
        let depth = rng.gen_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=8)).collect();
        let model = random_network(d, &hidden, &mut rng);
        let x = DVector::from_fn(d, |_, _| rng.gen_range(-1.5..1.5));
        let label = rng.gen_range(0..2usize);
        let (_, grad) = model.loss_and_grad_flat(&x, label);
        let flat = model.params_flat();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut m = model.clone();
            let mut p = flat.clone();
            p[i] += h;
            m.set_params_flat(&p);
            let (up, alpha_up) = m.forward(&x);
            let up = attenuated_loss(&up, alpha_up, label);
            p[i] -= 2.0 * h;
            m.set_params_flat(&p);
            let (down, alpha_down) = m.forward(&x);
            let down = attenuated_loss(&down, alpha_down, label);
            let fd = (up - down) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-8);
            if (grad[i] - fd).abs() / denom > 1e-4 {
                ok = false;
            }
        }
    }
    verdict(3, "gradient check", ok);
    assert!(ok, "analytic gradient disagrees with central differences");
}

#[test]
fn criterion_4_attenuation_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let step = 1e-3;
    let mut ok = true;
    for _ in 0..10 {
        let logit = rng.gen_range(-4.0..4.0);
        let p0 = 1.0 / (1.0 + (-logit as f64).exp());
        let prob = DVector::from_vec(vec![p0, 1.0 - p0]);
        let label = rng.gen_range(0..2usize);
        let ce = -prob[label].max(1e-12).ln();
        let mut best_alpha = -12.0;
        let mut best = f64::INFINITY;
        let mut alpha = -12.0;
        while alpha <= 12.0 {
            let loss = attenuated_loss(&prob, alpha, label);
            if loss < best {
                best = loss;
                best_alpha = alpha;
            }
            alpha += step;
        }
        if (best_alpha - ce.ln()).abs() > step {
            ok = false;
        }
    }
    verdict(4, "attenuation property", ok);
    assert!(ok, "grid minimizer does not sit at ln(CE)");
}

#[test]
fn criterion_5_noise_detection() {
    let start = Instant::now();
    let seeds = 10u64;
    let mut gap = 0.0;
    let mut auc = 0.0;
    for seed in 0..seeds {
        let spec = SynthSpec::two_cluster(6, 8.0, 200, 0.20, 0.0, seed);
        let (ds, mask) = synth_generate(&spec).unwrap();
        let all: Vec<usize> = (0..ds.features.nrows()).collect();
        let norm = fit_normalization(&ds, &all).unwrap();
        let x = apply_normalization(&norm, &ds.features).unwrap();
        let labels: Vec<usize> = ds.labels.iter().map(|l| l.class_index().unwrap()).collect();
        let cfg = TrainConfig {
            epochs: 150,
            learning_rate: 3e-3,
            seed,
            ..TrainConfig::default()
        };
        let model = train(&x, &labels, &cfg).unwrap();
        let (aleatoric, _, _) = score_all(&model, &x, 20, seed ^ 0x5eed).unwrap();
        let (mut mf, mut nf, mut mc, mut nc) = (0.0, 0, 0.0, 0);
        for (i, &a) in aleatoric.iter().enumerate() {
            if mask.flipped[i] {
                mf += a;
                nf += 1;
            } else {
                mc += a;
                nc += 1;
            }
        }
        gap += mf / nf as f64 - mc / nc as f64;
        auc += ranking_auc(&aleatoric, &mask.flipped) / seeds as f64;
    }
    let ok = gap > 0.0 && auc >= 0.6;
    let within_time = start.elapsed().as_secs_f64() < 120.0;
    println!(
        "  noise detection: mean flipped-minus-clean gap {:.4e}, separation AUC {:.4}",
        gap / seeds as f64,
        auc
    );
    verdict(5, "noise detection", ok && within_time);
    assert!(ok, "gap {:.4e}, AUC {:.4}", gap, auc);
    assert!(within_time, "exceeded 2 min budget: {:?}", start.elapsed());
}

#[test]
fn criterion_6_end_to_end_uncertainty_benefit() {
    let start = Instant::now();
    let seeds = 20u64;
    let mut acc: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for seed in 0..seeds {
        let spec = SynthSpec::two_cluster(6, 8.0, 250, 0.15, 0.10, seed);
        let (ds, _mask) = synth_generate(&spec).unwrap();
        let cfg = CvConfig {
            folds: 3,
            master_seed: seed,
            k_nn: KChoice::Fixed(5),
            lambda_u: -1.0,
            mc_passes: 50,
            train: TrainConfig {
                epochs: 100,
                learning_rate: 3e-3,
                seed,
                ..TrainConfig::default()
            },
            ..CvConfig::default()
        };
        let reports = cross_validate_multi(&ds, &cfg, &Method::ALL).unwrap();
        for (m, r) in &reports {
            assert!(!r.rows.is_empty(), "{} report has no rows", m.name());
            let mean = r.summary.iter().find(|s| s.name == "ACC").unwrap().mean;
            acc.entry(m.name()).or_default().push(mean);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let equal = &acc["equal-weight"];
    let uvhl = &acc["uvhl"];
    let p = welch_t_test(uvhl, equal).unwrap();
    println!(
        "  ablation mean ACC over {} seeds: equal-weight {:.4}, aleatoric-only {:.4}, \
         epistemic-only {:.4}, uvhl {:.4}; Welch p = {:.4}",
        seeds,
        mean(equal),
        mean(&acc["aleatoric-only"]),
        mean(&acc["epistemic-only"]),
        mean(uvhl)
    , p);
    let ok = mean(uvhl) >= mean(equal);
    let within_time = start.elapsed().as_secs_f64() < 300.0;
    verdict(6, "end-to-end uncertainty benefit", ok && within_time);
    assert!(
        ok,
        "uvhl mean ACC {:.4} below equal-weight {:.4} (Welch p = {:.4})",
        mean(uvhl),
        mean(equal),
        p
    );
    assert!(within_time, "exceeded 5 min budget: {:?}", start.elapsed());
}

#[test]
fn criterion_7_epistemic_structure() {
    let spec = SynthSpec::two_cluster(4, 4.0, 60, 0.0, 0.0, 7);
    let (ds, _) = synth_generate(&spec).unwrap();
    let all: Vec<usize> = (0..ds.features.nrows()).collect();
    let norm = fit_normalization(&ds, &all).unwrap();
    let x = apply_normalization(&norm, &ds.features).unwrap();
    let labels: Vec<usize> = ds.labels.iter().map(|l| l.class_index().unwrap()).collect();
    let mut ok = true;
    for dropout in [0.5, 0.0] {
        let cfg = TrainConfig {
            epochs: 60,
            dropout,
            learning_rate: 3e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        let model = train(&x, &labels, &cfg).unwrap();
        let (aleatoric, epistemic, _) = score_all(&model, &x, 20, 77).unwrap();
        for (a, e) in aleatoric.iter().zip(&epistemic) {
            if e < a {
                ok = false;
            }
            if dropout == 0.0 && (e - a).abs() > 1e-12 {
                ok = false;
            }
        }
    }
    verdict(7, "epistemic structure", ok);
    assert!(ok, "epistemic/aleatoric structural relation violated");
}

#[test]
fn criterion_8_hypergraph_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut ok = true;
    for _ in 0..20 {
        let n = rng.gen_range(8..=40);
        let d = rng.gen_range(2..=6);
        let k_nn = rng.gen_range(1..=4.min(n - 1));
        let feats = DMatrix::from_fn(n, d, |_, _| rng.gen_range(-2.0..2.0));
        let groups = vec![
            ("g0".to_string(), knn_hyperedges(&feats, k_nn).unwrap()),
            (
                "g1".to_string(),
                knn_hyperedges(&feats.columns(0, d - 1).into_owned(), k_nn).unwrap(),
            ),
        ];
        let mut vw = VertexWeights::equal(n);
        for w in vw.weights.iter_mut() {
            *w = rng.gen_range(0.01..0.99);
        }
        let hg = build_incidence(&groups, &vw).unwrap();
        if hg.edges.len() != n * groups.len() {
            ok = false;
        }
        for e in &hg.edges {
            if e.vertices.len() != k_nn + 1 {
                ok = false;
            }
        }
        for v in 0..n {
            for e in 0..hg.edges.len() {
                let h = hg.incidence[(v, e)];
                if h != 0.0 && (h - vw.weights[v]).abs() > 0.0 {
                    ok = false;
                }
            }
        }
        let theta = hg.theta().unwrap();
        if (&theta - theta.transpose()).abs().max() > 1e-12 {
            ok = false;
        }
        let unit = build_incidence(&groups, &VertexWeights::equal(n)).unwrap();
        let eig = unit.theta().unwrap().symmetric_eigen();
        for ev in eig.eigenvalues.iter() {
            if *ev < -1.0 - 1e-9 || *ev > 1.0 + 1e-9 {
                ok = false;
            }
        }
    }
    verdict(8, "hypergraph invariants", ok);
    assert!(ok, "a hypergraph invariant failed");
}

#[test]
fn criterion_9_harness_hygiene() {
    let spec = SynthSpec::two_cluster(4, 5.0, 40, 0.1, 0.0, 9);
    let (ds, _) = synth_generate(&spec).unwrap();
    let cfg = CvConfig {
        folds: 4,
        master_seed: 9,
        k_nn: KChoice::Fixed(3),
        mc_passes: 10,
        train: TrainConfig {
            epochs: 30,
            learning_rate: 3e-3,
            seed: 9,
            ..TrainConfig::default()
        },
        ..CvConfig::default()
    };
    let mut ok = true;

    // Poisoning: corrupting every test label changes no prediction.
    let plan = stratified_kfold(&ds, 4, 9).unwrap();
    let test = plan.fold_members(0);
    let train_rows = plan.complement(0);
    let clean = run_split(&ds, &train_rows, &test, 3, &cfg, &[Method::Uvhl], 99).unwrap();
    let mut poisoned_ds = ds.clone();
    for &i in &test {
        let flipped = match poisoned_ds.labels[i].class_index().unwrap() {
            0 => uvhl::data::Label::Cap,
            _ => uvhl::data::Label::Covid,
        };
        poisoned_ds.labels[i] = flipped;
    }
    let dirty = run_split(&poisoned_ds, &train_rows, &test, 3, &cfg, &[Method::Uvhl], 99).unwrap();
    if clean[0].1 != dirty[0].1 {
        ok = false;
    }

    // Determinism: identical seeds give byte-identical reports.
    let r1 = cross_validate(&ds, &cfg).unwrap();
    let r2 = cross_validate(&ds, &cfg).unwrap();
    if r1.to_json().unwrap() != r2.to_json().unwrap() {
        ok = false;
    }

    // Metric identities on every row.
    let mut total = 0usize;
    for row in &r1.rows {
        let c = &row.confusion;
        let m = metrics(c);
        total += c.tp + c.fn_ + c.fp + c.tn;
        if let (Some(bac), Some(sen), Some(spec)) = (m.bac, m.sen, m.spec) {
            if (bac - (sen + spec) / 2.0).abs() > 1e-12 {
                ok = false;
            }
        }
        let recomputed = metrics(c);
        if recomputed.acc != m.acc {
            ok = false;
        }
    }
    if total != ds.features.nrows() {
        ok = false;
    }
    // Counts reconcile against an independent confusion computation.
    let truth: Vec<usize> = test.iter().map(|&i| ds.labels[i].class_index().unwrap()).collect();
    let cm = confusion(&clean[0].1, &truth).unwrap();
    if cm.tp + cm.fn_ + cm.fp + cm.tn != test.len() {
        ok = false;
    }
    let _ = predict_labels(&DMatrix::from_vec(1, 2, vec![0.5, 0.5]), &[0]).unwrap();
    verdict(9, "harness hygiene", ok);
    assert!(ok, "a hygiene check failed");
}
