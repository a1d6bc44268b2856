use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uvhl::data::{
    self, default_col_names, load_dataset, synth_generate, write_dataset, write_noise_mask,
    GroupSchema, SynthSpec,
};
use uvhl::error::{Result, UvhlError};
use uvhl::eval::{
    cross_validate_multi, default_k_pool, CvConfig, EvalReport, KChoice, Method,
};
use uvhl::solver::{initial_labels, predict_labels, solve_closed_form};
use uvhl::uncertainty::{self, normalize_scores, TrainConfig};

#[derive(Parser)]
#[command(name = "uvhl", about = "Uncertainty vertex-weighted hypergraph learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-class dataset with controlled noise.
    Synth(SynthArgs),
    /// Repeated stratified cross-validation.
    Cv(CvArgs),
    /// Train on labeled cases and write per-case uncertainty scores.
    Score(ScoreArgs),
    /// Solve for soft labels and write the F dump.
    Predict(ScoreArgs),
    /// Summarize report files and render comparison plots.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Cases per class.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Feature dimensionality (split into regional/radiomics halves).
    #[arg(long, default_value_t = 10)]
    dims: usize,
    /// Euclidean distance between the class means.
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    feature_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of cases left unlabeled (UNKNOWN), drawn evenly.
    #[arg(long, default_value_t = 0.0)]
    unlabeled: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// uvhl | equal-weight | aleatoric-only | epistemic-only
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    k_nn: Option<usize>,
    /// Select k per fold by nested 5-fold CV over the pool [2..20].
    #[arg(long)]
    k_pool: bool,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    lambda_r: Option<f64>,
    /// Monte-Carlo dropout passes.
    #[arg(long)]
    mc_passes: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Hidden layer sizes, comma-separated.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated feature-group names to use.
    #[arg(long)]
    groups: Option<String>,
    /// Optional flat key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Cap on labeled training cases per class (few-label runs).
    #[arg(long)]
    train_per_class: Option<usize>,
    /// Also evaluate all ablation methods in one run.
    #[arg(long)]
    ablation: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON files to summarize.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var("UVHL_OUT_DIR").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("uvhl_out"))
}

fn parse_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UvhlError::Schema(format!("config line `{}` is not key=value", line)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn resolve_config(args: &PipelineArgs) -> Result<CvConfig> {
    let mut cfg = CvConfig::default();
    let file_vals = match &args.config {
        Some(path) => parse_kv_file(path)?,
        None => Vec::new(),
    };
    let file = |key: &str| -> Option<&str> {
        file_vals
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    };
    let bad = |key: &str, v: &str| UvhlError::Schema(format!("bad config value {}={}", key, v));

    macro_rules! resolve {
        ($flag:expr, $key:literal, $target:expr, $ty:ty) => {
            if let Some(v) = $flag {
                $target = v;
            } else if let Some(v) = file($key) {
                $target = v.parse::<$ty>().map_err(|_| bad($key, v))?;
            }
        };
    }
    let method_str = args.method.clone().or_else(|| file("method").map(String::from));
    if let Some(m) = method_str {
        cfg.method = Method::parse(&m)
            .ok_or_else(|| UvhlError::Argument(format!("unknown method `{}`", m)))?;
    }
    let use_pool = args.k_pool || file("k_pool") == Some("true");
    if use_pool {
        cfg.k_nn = KChoice::Pool(default_k_pool());
    } else {
        let mut k = 5usize;
        resolve!(args.k_nn, "k_nn", k, usize);
        cfg.k_nn = KChoice::Fixed(k);
    }
    resolve!(args.lambda_u, "lambda_u", cfg.lambda_u, f64);
    resolve!(args.lambda_r, "lambda_r", cfg.lambda_r, f64);
    resolve!(args.mc_passes, "mc_passes", cfg.mc_passes, usize);
    resolve!(args.dropout, "dropout", cfg.train.dropout, f64);
    resolve!(args.epochs, "epochs", cfg.train.epochs, usize);
    resolve!(args.seed, "seed", cfg.master_seed, u64);
    let hidden = args.hidden.clone().or_else(|| file("hidden").map(String::from));
    if let Some(h) = hidden {
        cfg.train.hidden = h
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| bad("hidden", s)))
            .collect::<Result<_>>()?;
    }
    let groups = args.groups.clone().or_else(|| file("groups").map(String::from));
    if let Some(g) = groups {
        cfg.groups = Some(g.split(',').map(|s| s.trim().to_string()).collect());
    }
    cfg.train.seed = cfg.master_seed;
    Ok(cfg)
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec::two_cluster(
        args.dims,
        args.separation,
        args.n,
        args.label_noise,
        args.feature_noise,
        args.seed,
    );
    let (mut ds, mask) = synth_generate(&spec)?;
    if args.unlabeled > 0.0 {
        let stride = (1.0 / args.unlabeled).max(1.0) as usize;
        for i in (0..ds.n()).step_by(stride.max(1)) {
            ds.labels[i] = data::Label::Unlabeled;
        }
    }
    let dir = out_dir(&args.out);
    fs::create_dir_all(&dir)?;
    write_dataset(&ds, &dir.join("data.csv"), &default_col_names(&ds))?;
    write_noise_mask(&ds, &mask, &dir.join("mask.csv"))?;
    println!(
        "wrote {} cases ({} flipped) to {}",
        ds.n(),
        mask.flipped.iter().filter(|&&f| f).count(),
        dir.display()
    );
    Ok(())
}

fn run_cv(args: &CvArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.pipeline)?;
    if let Some(f) = args.folds {
        cfg.folds = f;
    }
    if let Some(r) = args.repeats {
        cfg.repeats = r;
    }
    cfg.train_per_class = args.train_per_class;
    let ds = load_dataset(&args.pipeline.dataset, &GroupSchema::default())?;
    let methods: Vec<Method> = if args.ablation {
        Method::ALL.to_vec()
    } else {
        vec![cfg.method]
    };
    let reports = cross_validate_multi(&ds, &cfg, &methods)?;
    let dir = out_dir(&args.pipeline.out);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    for (method, report) in &reports {
        let stem = format!("report_{}", method.name());
        fs::write(dir.join(format!("{}.json", stem)), report.to_json()?)?;
        fs::write(dir.join(format!("{}.csv", stem)), report.to_csv()?)?;
        print_summary(method.name(), report);
    }
    Ok(())
}

fn print_summary(name: &str, report: &EvalReport) {
    let line = report
        .summary
        .iter()
        .map(|s| format!("{} {:.4}±{:.4}", s.name, s.mean, s.std))
        .collect::<Vec<_>>()
        .join("  ");
    println!("{:<16} {}", name, line);
}

/// Train on all labeled cases and score every case; shared by score/predict.
struct Scored {
    ds: data::Dataset,
    weights: uncertainty::VertexWeights,
    normalized: nalgebra::DMatrix<f64>,
}

fn score_dataset(args: &PipelineArgs, cfg: &CvConfig) -> Result<Scored> {
    let full = load_dataset(&args.dataset, &GroupSchema::default())?;
    let ds = match &cfg.groups {
        Some(names) => full.select_groups(names)?,
        None => full,
    };
    let train = ds.labeled_indices();
    let params = data::fit_normalization(&ds, &train)?;
    let normalized = data::apply_normalization(&params, &ds.features)?;
    let train_features = normalized.select_rows(&train);
    let train_labels: Vec<usize> = train
        .iter()
        .map(|&i| ds.labels[i].class_index().unwrap())
        .collect();
    let mut train_cfg: TrainConfig = cfg.train.clone();
    train_cfg.seed = cfg.master_seed;
    let model = uncertainty::train(&train_features, &train_labels, &train_cfg)?;
    let (aleatoric, epistemic, _) =
        uncertainty::score_all(&model, &normalized, cfg.mc_passes, cfg.master_seed)?;
    let weights = normalize_scores(&aleatoric, &epistemic, cfg.lambda_u)?;
    Ok(Scored {
        ds,
        weights,
        normalized,
    })
}

fn run_score(args: &ScoreArgs) -> Result<()> {
    let cfg = resolve_config(&args.pipeline)?;
    let scored = score_dataset(&args.pipeline, &cfg)?;
    let dir = out_dir(&args.pipeline.out);
    fs::create_dir_all(&dir)?;
    let path = dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "aleatoric", "epistemic", "weight"])?;
    for i in 0..scored.ds.n() {
        w.write_record([
            scored.ds.ids[i].clone(),
            format!("{}", scored.weights.aleatoric[i]),
            format!("{}", scored.weights.epistemic[i]),
            format!("{}", scored.weights.weights[i]),
        ])?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_predict(args: &ScoreArgs) -> Result<()> {
    let cfg = resolve_config(&args.pipeline)?;
    let scored = score_dataset(&args.pipeline, &cfg)?;
    let ds = &scored.ds;
    let k_nn = match cfg.k_nn {
        KChoice::Fixed(k) => k,
        KChoice::Pool(_) => 5,
    };
    let mut edge_groups = Vec::new();
    for g in &ds.groups {
        let cols: Vec<usize> = g.cols.clone().collect();
        let group_features = scored.normalized.select_columns(&cols);
        edge_groups.push((
            g.name.clone(),
            uvhl::hypergraph::knn_hyperedges(&group_features, k_nn)?,
        ));
    }
    let weights = if cfg.method == Method::EqualWeight {
        uncertainty::VertexWeights::equal(ds.n())
    } else {
        scored.weights.clone()
    };
    let hg = uvhl::hypergraph::build_incidence(&edge_groups, &weights)?;
    let theta = hg.theta()?;
    let y_labels: Vec<Option<usize>> = ds.labels.iter().map(|l| l.class_index()).collect();
    let y = initial_labels(&y_labels, 2);
    let f = solve_closed_form(&theta, &hg.vertex_weights, &y, cfg.lambda_r)?;
    let all: Vec<usize> = (0..ds.n()).collect();
    let preds = predict_labels(&f, &all)?;

    let dir = out_dir(&args.pipeline.out);
    fs::create_dir_all(&dir)?;
    let path = dir.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "score0", "score1", "prediction"])?;
    for i in 0..ds.n() {
        w.write_record([
            ds.ids[i].clone(),
            format!("{}", f[(i, 0)]),
            format!("{}", f[(i, 1)]),
            data::Label::from_class_index(preds[i]).as_str().to_string(),
        ])?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for path in &args.inputs {
        let text = fs::read_to_string(path)?;
        let report = EvalReport::from_json(&text)?;
        let label = report.config.method.name().to_string();
        reports.push((label, report));
    }
    println!(
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "method", "ACC", "SEN", "SPEC", "BAC", "PPV", "NPV"
    );
    for (label, report) in &reports {
        let cell = |name: &str| {
            report
                .summary
                .iter()
                .find(|s| s.name == name)
                .map(|s| format!("{:.4}", s.mean))
                .unwrap_or_else(|| "NA".into())
        };
        println!(
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            label,
            cell("ACC"),
            cell("SEN"),
            cell("SPEC"),
            cell("BAC"),
            cell("PPV"),
            cell("NPV")
        );
    }
    let dir = out_dir(&args.out);
    fs::create_dir_all(&dir)?;
    let svg = render_acc_chart(&reports);
    let path = dir.join("comparison.svg");
    fs::write(&path, svg)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Bar chart of mean ACC with std whiskers, one bar per report.
fn render_acc_chart(reports: &[(String, EvalReport)]) -> String {
    let width = 120 + reports.len() * 90;
    let height = 320;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        width, height
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str("<text x=\"10\" y=\"20\" font-size=\"14\">mean ACC per method</text>\n");
    let base_y = 280.0;
    let scale = 220.0;
    for tick in 0..=5 {
        let v = tick as f64 * 0.2;
        let y = base_y - v * scale;
        svg.push_str(&format!(
            "<line x1=\"50\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n<text x=\"14\" y=\"{:.1}\" font-size=\"10\">{:.1}</text>\n",
            width - 10,
            y + 3.0,
            v
        ));
    }
    for (i, (label, report)) in reports.iter().enumerate() {
        let (mean, std) = report
            .summary
            .iter()
            .find(|s| s.name == "ACC")
            .map(|s| (s.mean, s.std))
            .unwrap_or((0.0, 0.0));
        let x = 70.0 + i as f64 * 90.0;
        let h = mean * scale;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"50\" height=\"{:.1}\" fill=\"#4878a8\"/>\n",
            x,
            base_y - h,
            h
        ));
        let cx = x + 25.0;
        svg.push_str(&format!(
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            base_y - (mean + std).min(1.0) * scale,
            base_y - (mean - std).max(0.0) * scale
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"300\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            cx, label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Cv(args) => run_cv(args),
        Command::Score(args) => run_score(args),
        Command::Predict(args) => run_predict(args),
        Command::Report(args) => run_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
