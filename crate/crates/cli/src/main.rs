use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use invflow::baselines;
use invflow::dataio::colored::ColoredTask;
use invflow::dataio::{read_dataset, write_dataset};
use invflow::harness::{self, BenchmarkSpec, JobStatus, Preset};
use invflow::scm::{enumerate_settings, SettingFilter};
use invflow::train::{self, ModelFile, ModelKind, RegressionModel, RegressionTask, TrainConfig};
use invflow_cli::{load_bench_spec, load_train_config, parse_models};

#[derive(Parser)]
#[command(name = "invflow", version, about = "Invariance-regularized regression and classification across environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate SCM datasets (CSV plus JSON sidecar per setting).
    GenData(GenData),
    /// Train one model on one dataset.
    Train(Train),
    /// Evaluate a saved regression model on a dataset.
    Eval(Eval),
    /// Run a settings × models × seeds grid.
    Bench(Bench),
    /// Aggregate run reports into tables.
    Report(Report),
    /// Linear invariant causal prediction on a dataset.
    Icp(Icp),
}

#[derive(Args)]
struct GenData {
    /// Filter such as `mechanism=linear|relu,target=3,intervention=do`.
    #[arg(long, default_value = "")]
    filter: String,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples per environment.
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML file with TrainConfig keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lambda")]
    lambda_i: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = load_train_config(self.config.as_deref(), self.model, self.preset)?;
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lambda_i {
            cfg.lambda_i = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.n_train {
            cfg.n_train = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    /// Dataset CSV (regression models).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory with the four IDX digit files (classifier); synthetic
    /// blobs are used when absent.
    #[arg(long)]
    idx_dir: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model_file: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct Bench {
    /// TOML benchmark spec; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    filter: Option<String>,
    #[arg(long)]
    settings: Option<usize>,
    /// Comma-separated model list.
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Flat TOML base config for every run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the run plan and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct Report {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Icp {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = baselines::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 1024)]
    n_train: usize,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_or_default(out: &Option<PathBuf>, sub: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| harness::default_out_root().join(sub))
}

fn gen_data(a: &GenData) -> Result<()> {
    let filter = SettingFilter::parse(&a.filter)?;
    let out = out_or_default(&a.out, "data");
    std::fs::create_dir_all(&out)?;
    for s in enumerate_settings(&filter, a.count, a.seed)? {
        let path = out.join(format!("{}.csv", s.id()));
        write_dataset(&path, &s.generate(a.samples)?)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn train_cmd(a: &Train) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let out = out_or_default(&a.out, "train");
    std::fs::create_dir_all(&out)?;
    let report = if cfg.model == ModelKind::Classifier {
        let task = match &a.idx_dir {
            Some(d) => ColoredTask::from_idx_files(
                &d.join("train-images-idx3-ubyte"),
                &d.join("train-labels-idx1-ubyte"),
                &d.join("t10k-images-idx3-ubyte"),
                &d.join("t10k-labels-idx1-ubyte"),
                cfg.seed,
            )?,
            None => ColoredTask::blobs(cfg.n_train, cfg.n_train.min(10_000), cfg.seed),
        };
        train::train_classifier(&task, &cfg)?.1
    } else if cfg.model == ModelKind::Icp {
        let ds = read_dataset(need_data(&a.data)?)?;
        baselines::icp_run(&ds, cfg.n_train, baselines::DEFAULT_ALPHA, cfg.seed)?.1
    } else {
        let ds = read_dataset(need_data(&a.data)?)?;
        let inputs = train::input_vars(cfg.model, &ds);
        let task = RegressionTask::from_dataset(&ds, &inputs, cfg.n_train)?;
        let (model, mut report) = train::train_regression(&task, &cfg)?;
        let model_path = out.join("model.json");
        model.to_file(&inputs).save(&model_path)?;
        report.checkpoint = Some(model_path.display().to_string());
        report
    };
    let path = out.join("report.json");
    report.save(&path)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn need_data(p: &Option<PathBuf>) -> Result<&Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!("--data is required for regression models"),
    }
}

fn eval_cmd(a: &Eval) -> Result<()> {
    let file = ModelFile::load(&a.model_file).with_context(|| format!("loading {}", a.model_file.display()))?;
    let model = RegressionModel::from_file(&file)?;
    let ds = read_dataset(&a.data)?;
    let task = RegressionTask::from_dataset(&ds, &file.inputs, file.config.n_train)?;
    let [train_mse, test_mse, dg_mse] = train::evaluate(&model, &task, file.config.seed)?;
    let out = serde_json::json!({
        "model": file.config.model,
        "train_mse": train_mse,
        "test_mse": test_mse,
        "dg_mse": dg_mse,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn bench_cmd(a: &Bench) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => load_bench_spec(p)?,
        None => BenchmarkSpec::default(),
    };
    if let Some(f) = &a.filter {
        spec.filter = SettingFilter::parse(f)?;
    }
    if let Some(v) = a.settings {
        spec.settings = v;
    }
    if let Some(m) = &a.models {
        spec.models = parse_models(m)?;
    }
    if let Some(v) = a.seeds {
        spec.seeds = v;
    }
    if let Some(v) = a.workers {
        spec.workers = v;
    }
    if let Some(v) = a.preset {
        spec.preset = v;
    }
    if let Some(v) = a.samples {
        spec.samples_per_env = v;
    }
    if let Some(c) = &a.config {
        spec.base = Some(load_train_config(Some(c), None, spec.preset)?);
    }
    if let Some(o) = &a.out {
        spec.out_dir = o.clone();
    }
    let plan = spec.plan()?;
    if a.dry_run {
        for job in &plan {
            println!("{}", job.report_path(&spec.out_dir).display());
        }
        eprintln!("{} runs", plan.len());
        return Ok(());
    }
    std::fs::create_dir_all(&spec.out_dir)?;
    std::fs::write(spec.out_dir.join("bench.toml"), toml::to_string(&spec)?)?;
    let total = plan.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let outcome = harness::run_benchmark(&spec, |job, status| {
        let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
        let what = match status {
            JobStatus::Reused(_) => "reused".to_string(),
            JobStatus::Ran(r) => format!("{:.1}s", r.wall_clock_secs),
            JobStatus::Failed(e) => format!("FAILED: {e}"),
        };
        eprintln!("[{k}/{total}] {} {} seed {}: {what}", job.setting.id(), job.model, job.seed);
    })?;
    eprintln!(
        "{} ran, {} reused, {} failed; reports under {}",
        outcome.ran,
        outcome.reused,
        outcome.failures.len(),
        spec.out_dir.join("runs").display()
    );
    if !outcome.failures.is_empty() {
        for (p, e) in &outcome.failures {
            eprintln!("  {}: {e}", p.display());
        }
        bail!("{} runs failed", outcome.failures.len());
    }
    Ok(())
}

fn report_cmd(a: &Report) -> Result<()> {
    let (runs, skipped) = harness::load_runs(&a.input)?;
    for p in &skipped {
        eprintln!("skipping {} (not a run report)", p.display());
    }
    if runs.is_empty() {
        bail!("no run reports under {}", a.input.display());
    }
    let (agg, normalized) = harness::aggregate(&runs);
    for p in harness::write_report(&a.out, &agg, &normalized)? {
        println!("{}", p.display());
    }
    if agg.unpaired > 0 {
        eprintln!("{} runs had no CERM pair and were left out of the error tables", agg.unpaired);
    }
    Ok(())
}

fn icp_cmd(a: &Icp) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let (res, _) = baselines::icp_run(&ds, a.n_train, a.alpha, 0)?;
    let text = serde_json::to_string_pretty(&res)?;
    match &a.out {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Report(a) => report_cmd(a),
        Command::Icp(a) => icp_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
