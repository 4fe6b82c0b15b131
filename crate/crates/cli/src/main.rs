use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use dga_core::checkpoint;
use dga_core::config::{grid, parse_axis};
use dga_core::decoder::score_pairs;
use dga_core::eval::{cluster_embedding, latent_correlation, rank_metrics};
use dga_core::graph::{load_linqs, write_edges, write_features, write_labels};
use dga_core::report::{
    history_csv, history_records, matrix_csv, read_jsonl, summarize, summary_csv, write_jsonl,
    MetricRecord, SCHEMA_VERSION,
};
use dga_core::synth::{synth_graph, tune_p_for_degree};
use dga_core::train::{embed_graph, train_with};
use dga_core::{Error, ExperimentConfig, SyntheticSpec};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dga", version, about = "Disentangled graph auto-encoders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a multi-factor random graph.
    Synth(SynthArgs),
    /// Convert LINQS `.content` / `.cites` files to edge, feature and label files.
    Linqs(LinqsArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a trained run.
    Eval(EvalArgs),
    /// Aggregate metric records into mean and standard error.
    Summarize(SummarizeArgs),
    /// Train and evaluate every point of a configuration grid.
    Sweep(SweepArgs),
    /// List configuration keys with defaults.
    Keys,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    factors: usize,
    #[arg(long, default_value_t = 1000)]
    nodes: usize,
    #[arg(long, default_value_t = 16)]
    classes: usize,
    /// Inter-class edge probability.
    #[arg(long, default_value_t = 3e-5)]
    q: f64,
    /// Intra-class edge probability; derived from --target-degree when absent.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, default_value_t = 40.0)]
    target_degree: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data/synthetic")]
    out: PathBuf,
}

#[derive(Args)]
struct LinqsArgs {
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    cites: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print nothing while training.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated subset of linkpred, cluster, correlation.
    #[arg(long, default_value = "linkpred")]
    tasks: String,
    /// Number of clusters; defaults to the number of classes of each label view.
    #[arg(long)]
    k: Option<usize>,
    /// Metric records are appended here; defaults to `<run>/metrics.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key=v1,v2,...`, repeatable; the grid is their product.
    #[arg(long = "axis", value_name = "KEY=V1,V2")]
    axes: Vec<String>,
    /// `key=value` override applied before the grid, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "linkpred")]
    tasks: String,
    /// Root directory; each grid point runs in `<root>/<config hash>-s<seed>`.
    #[arg(long, default_value = "runs/sweep")]
    root: PathBuf,
}

type Res<T> = std::result::Result<T, Error>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn mkdir(path: &Path) -> Res<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Domain { .. } => "domain",
        Error::NonFinite(_) => "non_finite",
        Error::NonScalarLoss { .. } | Error::Detached(_) | Error::NonDeterministic(_) => "internal",
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::Graph(_) => "graph",
        Error::Checkpoint(_) => "checkpoint",
        Error::Invalid(_) => "invalid",
        Error::Io { .. } => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Linqs(a) => linqs(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Summarize(a) => summarize_cmd(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Keys => {
            keys();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                json!({"error": error_kind(&e), "message": e.to_string()})
            );
            ExitCode::from(2)
        }
    }
}

fn keys() {
    let defaults = ExperimentConfig::default();
    for (k, doc) in ExperimentConfig::all_keys() {
        println!(
            "{k} = {}  # {doc}",
            defaults.get(k).unwrap_or_default()
        );
    }
}

fn synth(a: SynthArgs) -> Res<()> {
    let p = match a.p {
        Some(p) => p,
        None if a.target_degree == 0.0 => 0.0,
        None => tune_p_for_degree(a.nodes, a.classes, a.factors, a.q, a.target_degree)?,
    };
    let spec = SyntheticSpec {
        factors: a.factors,
        nodes: a.nodes,
        classes: a.classes,
        p,
        q: a.q,
        seed: a.seed,
    };
    let g = synth_graph(&spec)?;
    mkdir(&a.out)?;
    write_edges(&a.out.join("edges.txt"), g.edges())?;
    write_features(&a.out.join("features.txt"), &g.features)?;
    if let Some(labels) = &g.labels {
        write_labels(&a.out.join("labels.txt"), labels)?;
    }
    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "factors": a.factors,
        "nodes": a.nodes,
        "classes": a.classes,
        "p": p,
        "q": a.q,
        "target_degree": a.target_degree,
        "seed": a.seed,
        "edges": g.num_edges(),
        "mean_degree": g.mean_degree(),
    });
    write(
        &a.out.join("manifest.json"),
        &format!("{}\n", serde_json::to_string_pretty(&manifest).unwrap()),
    )?;
    // Features here are rows of the full adjacency, which would leak held-out
    // edges; the generated config rebuilds them from the training graph.
    let cfg = format!(
        "edges = {}\nlabels = {}\nfeature_source = train_adjacency\nval_frac = 0.2\ntest_frac = 0.2\nout_dir = runs/synthetic\n",
        a.out.join("edges.txt").display(),
        a.out.join("labels.txt").display()
    );
    write(&a.out.join("experiment.cfg"), &cfg)?;
    println!(
        "p = {p}, {} edges, mean degree {:.3}",
        g.num_edges(),
        g.mean_degree()
    );
    Ok(())
}

fn linqs(a: LinqsArgs) -> Res<()> {
    let (g, report) = load_linqs(&a.content, &a.cites)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    mkdir(&a.out)?;
    write_edges(&a.out.join("edges.txt"), g.edges())?;
    write_features(&a.out.join("features.txt"), &g.features)?;
    if let Some(labels) = &g.labels {
        write_labels(&a.out.join("labels.txt"), labels)?;
    }
    println!(
        "{} nodes, {} edges, {} features",
        g.num_nodes(),
        g.num_edges(),
        g.feature_dim()
    );
    Ok(())
}

fn load_config(path: &Path, overrides: &[String]) -> Res<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Res<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    run_training(&cfg, a.quiet)
}

fn run_training(cfg: &ExperimentConfig, quiet: bool) -> Res<()> {
    let (g, report) = cfg.load_graph()?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let split = cfg.split(&g)?;
    let every = cfg.train.eval_every.max(1);
    let outcome = train_with(&split, &cfg.train, |epoch, r| {
        if !quiet && (epoch % every == 0 || epoch == cfg.train.epochs) {
            eprintln!(
                "epoch {epoch}: total {:.6} recon {:.6} kl {:.6} indep {:.6}",
                r.total, r.recon, r.kl, r.indep
            );
        }
    })?;
    let dir = &cfg.out_dir;
    mkdir(dir)?;
    write(&dir.join("config.cfg"), &cfg.to_text())?;
    checkpoint::save(&dir.join("checkpoint.txt"), &outcome.params, &cfg.train)?;
    checkpoint::save(&dir.join("last.txt"), &outcome.last, &cfg.train)?;
    let records = history_records(&outcome.history, &cfg.hash(), cfg.train.seed);
    write_jsonl(&dir.join("history.jsonl"), &records, false)?;
    write(&dir.join("history.csv"), &history_csv(&records))?;
    if !quiet {
        match (outcome.history.best_epoch, outcome.history.best_val_auc) {
            (Some(e), Some(auc)) => {
                eprintln!("best validation AUC {auc:.4} at epoch {e}; run in {}", dir.display())
            }
            _ => eprintln!("no validation pairs; kept the last epoch; run in {}", dir.display()),
        }
    }
    Ok(())
}

fn parse_tasks(spec: &str) -> Res<Vec<String>> {
    let tasks: Vec<String> = spec.split(',').map(|t| t.trim().to_string()).collect();
    for t in &tasks {
        if !["linkpred", "cluster", "correlation"].contains(&t.as_str()) {
            return Err(Error::Config(format!(
                "unknown task '{t}' (linkpred, cluster or correlation)"
            )));
        }
    }
    Ok(tasks)
}

fn eval(a: EvalArgs) -> Res<()> {
    let tasks = parse_tasks(&a.tasks)?;
    let cfg = ExperimentConfig::load(&a.run.join("config.cfg"))?;
    let (params, _) = checkpoint::load(&a.run.join("checkpoint.txt"))?;
    let (g, _) = cfg.load_graph()?;
    let split = cfg.split(&g)?;
    if params.config.input_dim != split.train.feature_dim() {
        return Err(Error::Config(format!(
            "checkpoint expects {} input features, the configured graph has {}",
            params.config.input_dim,
            split.train.feature_dim()
        )));
    }
    let z = embed_graph(&params, &split.train)?;
    let (k, factor) = (params.config.channels, params.config.factor_decoder);
    let hash = cfg.hash();
    let record = |task: &str, view: Option<String>, metrics: BTreeMap<String, f64>, flags| {
        MetricRecord {
            schema_version: SCHEMA_VERSION,
            task: task.into(),
            config_hash: hash.clone(),
            seed: cfg.train.seed,
            mode: cfg.train.mode.to_string(),
            label_view: view,
            metrics,
            flags,
        }
    };
    let mut out = Vec::new();
    for task in &tasks {
        match task.as_str() {
            "linkpred" => {
                let pos = score_pairs(&z, k, factor, &split.test_pos)?;
                let neg = score_pairs(&z, k, factor, &split.test_neg)?;
                let (auc, ap) = rank_metrics(&pos, &neg)?;
                let m = BTreeMap::from([("auc".into(), auc), ("ap".into(), ap)]);
                out.push(record("linkpred", None, m, vec![]));
            }
            "cluster" => {
                let labels = g.labels.as_ref().ok_or_else(|| {
                    Error::Config("the cluster task needs a labels file".into())
                })?;
                let mut views = vec![("joint".to_string(), labels.joint())];
                if labels.num_columns() > 1 {
                    for (i, c) in labels.columns.iter().enumerate() {
                        views.push((format!("factor{i}"), c.clone()));
                    }
                }
                for (name, truth) in views {
                    let classes = truth.iter().max().map_or(0, |m| m + 1);
                    let m = cluster_embedding(&z, &truth, a.k.unwrap_or(classes), cfg.train.seed)?;
                    let metrics = BTreeMap::from([
                        ("acc".into(), m.acc),
                        ("precision".into(), m.precision),
                        ("f1".into(), m.f1),
                        ("nmi".into(), m.nmi),
                        ("ari".into(), m.ari),
                    ]);
                    out.push(record("cluster", Some(name), metrics, m.flags));
                }
            }
            _ => {
                let c = latent_correlation(&z, k)?;
                write(&a.run.join("correlation.csv"), &matrix_csv(&c.matrix))?;
                let s = c.summary;
                let metrics = BTreeMap::from([
                    ("within".into(), s.within),
                    ("between".into(), s.between),
                    ("block_ratio".into(), s.ratio),
                ]);
                let flags = s
                    .zero_variance
                    .iter()
                    .map(|i| format!("zero_variance:{i}"))
                    .collect();
                out.push(record("correlation", None, metrics, flags));
            }
        }
    }
    for r in &out {
        println!("{}", serde_json::to_string(r).unwrap());
    }
    let path = a.out.unwrap_or_else(|| a.run.join("metrics.jsonl"));
    write_jsonl(&path, &out, true)
}

fn summarize_cmd(a: SummarizeArgs) -> Res<()> {
    let mut records: Vec<MetricRecord> = Vec::new();
    for p in &a.inputs {
        records.extend(read_jsonl::<MetricRecord>(p)?);
    }
    let csv = summary_csv(&summarize(&records));
    match a.out {
        Some(p) => write(&p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn sweep(a: SweepArgs) -> Res<()> {
    let tasks = parse_tasks(&a.tasks)?.join(",");
    let mut base = ExperimentConfig::load(&a.config)?;
    base.apply_overrides(&a.overrides)?;
    let axes = a.axes.iter().map(|s| parse_axis(s)).collect::<Res<Vec<_>>>()?;
    let mut runs = grid(&base, &axes)?;
    for r in &mut runs {
        r.out_dir = a.root.join(format!("{}-s{}", r.hash(), r.train.seed));
        r.validate()?;
    }
    mkdir(&a.root)?;
    let exe = std::env::current_exe().map_err(io_err(Path::new("dga")))?;
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..a.jobs.clamp(1, runs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                if let Err(msg) = sweep_one(&exe, run, &tasks) {
                    failures.lock().unwrap().push(format!("{}: {msg}", run.out_dir.display()));
                }
            });
        }
    });
    let metrics: Vec<PathBuf> = runs.iter().map(|r| r.out_dir.join("metrics.jsonl")).collect();
    let mut records: Vec<MetricRecord> = Vec::new();
    for p in metrics.iter().filter(|p| p.exists()) {
        records.extend(read_jsonl::<MetricRecord>(p)?);
    }
    write(&a.root.join("summary.csv"), &summary_csv(&summarize(&records)))?;
    let failures = failures.into_inner().unwrap();
    if failures.is_empty() {
        eprintln!("{} runs; summary in {}", runs.len(), a.root.join("summary.csv").display());
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "{} of {} runs failed: {}",
            failures.len(),
            runs.len(),
            failures.join("; ")
        )))
    }
}

/// Trains and evaluates one grid point in child processes.
fn sweep_one(exe: &Path, run: &ExperimentConfig, tasks: &str) -> Result<(), String> {
    fs::create_dir_all(&run.out_dir).map_err(|e| e.to_string())?;
    let cfg_path = run.out_dir.join("config.cfg");
    fs::write(&cfg_path, run.to_text()).map_err(|e| e.to_string())?;
    let metrics = run.out_dir.join("metrics.jsonl");
    let _ = fs::remove_file(&metrics);
    let steps: [Vec<&std::ffi::OsStr>; 2] = [
        vec!["train".as_ref(), "--quiet".as_ref(), "--config".as_ref(), cfg_path.as_os_str()],
        vec!["eval".as_ref(), "--run".as_ref(), run.out_dir.as_os_str(), "--tasks".as_ref(), tasks.as_ref()],
    ];
    for args in steps {
        let out = Command::new(exe).args(&args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).trim().to_string());
        }
    }
    Ok(())
}
