//! Command-line front end: simulate, train, eval, ablate, sweep, report.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fairnews_core::data::{simulate_corpus, write_ground_truth, write_mind_dir, FILES};
use fairnews_core::experiment::{ablation, ablation_csv, sweep_csv, sweep_lambda};
use fairnews_core::training::train_run;
use fairnews_core::{eval, Backbone, Corpus, Model, ParameterStore, RunConfig, Split, Variant};

use manifest::Manifest;

const OUT_ROOT_ENV: &str = "FAIRNEWS_OUT_ROOT";

#[derive(Parser)]
#[command(name = "fairnews", version, about = "Provider-fair news recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic provider-biased corpus in MIND format.
    Simulate(Common),
    /// Train the full model and write per-epoch checkpoints.
    Train(WithData),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        run: WithData,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the full model and its three ablations.
    Ablate(WithData),
    /// Train the full model at several adversarial weights.
    Sweep {
        #[command(flatten)]
        run: WithData,
        /// Comma-separated adversarial weights (default from config).
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Print the manifest and tables of a finished run directory.
    Report {
        /// Run directory written by another command.
        dir: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `$FAIRNEWS_OUT_ROOT/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace outputs of an earlier run in the output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct WithData {
    #[command(flatten)]
    common: Common,
    /// Corpus directory (MIND-format files).
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "lambda-a")]
    lambda_a: Option<f64>,
    #[arg(long = "lambda-c")]
    lambda_c: Option<f64>,
    #[arg(long = "lambda-u")]
    lambda_u: Option<f64>,
    #[arg(long = "lambda-n")]
    lambda_n: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_backbone)]
    backbone: Option<Backbone>,
}

fn parse_backbone(s: &str) -> Result<Backbone, String> {
    s.parse()
}

/// Exit code 2 for usage and configuration problems, 1 otherwise.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<fairnews_core::Error> for Failure {
    fn from(e: fairnews_core::Error) -> Self {
        match e {
            fairnews_core::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Simulate(c) => cmd_simulate(&c),
        Command::Train(w) => cmd_train(&w),
        Command::Eval { run, checkpoint } => cmd_eval(&run, &checkpoint),
        Command::Ablate(w) => cmd_ablate(&w),
        Command::Sweep { run, lambdas } => cmd_sweep(&run, lambdas),
        Command::Report { dir } => cmd_report(&dir),
    }
}

fn load_config(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_toml(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_run_config(w: &WithData) -> Outcome<RunConfig> {
    let cfg = load_config(&w.common)?;
    with_overrides(cfg, w)
}

fn with_overrides(mut cfg: RunConfig, w: &WithData) -> Outcome<RunConfig> {
    if let Some(s) = w.common.seed {
        cfg.seed = s;
    }
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.lambda_a, w.lambda_a);
    set(&mut cfg.lambda_c, w.lambda_c);
    set(&mut cfg.lambda_u, w.lambda_u);
    set(&mut cfg.lambda_n, w.lambda_n);
    if let Some(e) = w.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = w.backbone {
        cfg.backbone = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    })
}

/// Refuses a non-empty directory unless `force`; with `force`, removes the
/// files listed by the earlier run's manifest.
fn prepare_out(dir: &Path, force: bool) -> Outcome {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Failure::Usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        if non_empty {
            if let Ok(old) = Manifest::read(dir) {
                for f in old.files.iter().map(|f| &f.name).chain([&manifest::FILE_NAME.to_string()]) {
                    let p = dir.join(f);
                    if p.is_file() {
                        fs::remove_file(&p)?;
                    }
                }
            }
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn load_corpus(data: &Path) -> Outcome<Corpus> {
    if !data.is_dir() {
        return Err(Failure::Usage(format!("data directory {} does not exist", data.display())));
    }
    for f in [FILES::NEWS, FILES::PROVIDERS, FILES::TRAIN] {
        if !data.join(f).is_file() {
            return Err(Failure::Usage(format!("data directory {} lacks {f}", data.display())));
        }
    }
    Ok(Corpus::load_dir(data)?)
}

fn write(dir: &Path, name: &str, body: impl AsRef<[u8]>) -> Outcome {
    let p = dir.join(name);
    fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn cmd_simulate(c: &Common) -> Outcome {
    let cfg = load_config(c)?;
    cfg.validate()?;
    let sim_cfg = cfg.simulator_config();
    sim_cfg.validate()?;
    let dir = out_dir(c, "simulate");
    let mut m = Manifest::start("simulate", c.config.as_deref(), cfg.seed, &dir);
    m.add_input_text("config.toml", &cfg.to_toml());
    prepare_out(&dir, c.force)?;
    let sim = simulate_corpus(&sim_cfg)?;
    write_mind_dir(&sim.corpus, &dir)?;
    write_ground_truth(&sim.truth.relevance, &dir.join(FILES::GROUND_TRUTH))?;
    write(&dir, "config.toml", cfg.to_toml())?;
    m.finish(&dir)?;
    println!(
        "simulated {} users, {} news, {} providers into {}",
        sim_cfg.users,
        sim_cfg.news,
        sim_cfg.providers,
        dir.display()
    );
    Ok(())
}

fn data_manifest(command: &str, w: &WithData, cfg: &RunConfig, dir: &Path) -> Outcome<Manifest> {
    let mut m = Manifest::start(command, w.common.config.as_deref(), cfg.seed, dir);
    m.add_input_text("config.toml", &cfg.to_toml());
    m.add_input_dir(&w.data)?;
    Ok(m)
}

fn cmd_train(w: &WithData) -> Outcome {
    let cfg = load_run_config(w)?;
    let corpus = load_corpus(&w.data)?;
    let dir = out_dir(&w.common, "train");
    let mut m = data_manifest("train", w, &cfg, &dir)?;
    prepare_out(&dir, w.common.force)?;
    let train = cfg.train_config(Variant::Full);
    let out = train_run(&corpus, &cfg.encoder_for(&corpus), &train, Some(&dir))?;
    out.model
        .params()
        .save(&dir.join("model.ckpt"))
        .context("writing model.ckpt")?;
    write(&dir, "config.toml", cfg.to_toml())?;
    m.set_extra("best_epoch", out.best_epoch.into());
    m.set_extra("train_config", serde_json::to_value(&train).context("serialising train config")?);
    m.finish(&dir)?;
    print!("{}", fairnews_core::training::epoch_log_csv(&out.epochs));
    println!("best epoch {} -> {}", out.best_epoch, dir.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(w: &WithData, checkpoint: &Path) -> Outcome {
    let saved = checkpoint.parent().map(|p| p.join("config.toml")).filter(|p| p.is_file());
    let cfg = match (&w.common.config, saved) {
        // Without --config, the configuration saved beside the checkpoint.
        (None, Some(path)) => {
            let text = fs::read_to_string(&path)?;
            let base = RunConfig::from_toml(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            with_overrides(base, w)?
        }
        _ => load_run_config(w)?,
    };
    let corpus = load_corpus(&w.data)?;
    if !checkpoint.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let dir = out_dir(&w.common, "eval");
    let mut m = data_manifest("eval", w, &cfg, &dir)?;
    m.add_input_file("checkpoint", checkpoint)?;
    prepare_out(&dir, w.common.force)?;
    let store = ParameterStore::load(checkpoint).map_err(fairnews_core::Error::from)?;
    let model = Model::from_params(cfg.encoder_for(&corpus), &store)?;
    let mut report = eval::evaluate(&model, &corpus, Split::Test, &cfg.ratios, &cfg.ks)?;
    let (fair, _) = fairnews_core::experiment::probes(&model, &corpus, &cfg.probe, cfg.seed)?;
    report.probe_accuracy = Some(fair.accuracy);
    write(&dir, "report.csv", report.to_csv())?;
    write(&dir, "report_long.csv", report.to_long_csv())?;
    write(&dir, "report.txt", report.to_table())?;
    m.finish(&dir)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_ablate(w: &WithData) -> Outcome {
    let cfg = load_run_config(w)?;
    let corpus = load_corpus(&w.data)?;
    let dir = out_dir(&w.common, "ablate");
    let mut m = data_manifest("ablate", w, &cfg, &dir)?;
    prepare_out(&dir, w.common.force)?;
    let runs = ablation(&corpus, &cfg)?;
    let mut variants = serde_json::Map::new();
    for r in &runs {
        write(&dir, &format!("report_{}.csv", r.variant), r.report.to_csv())?;
        variants.insert(
            r.variant.name().into(),
            serde_json::to_value(&r.train).context("serialising variant config")?,
        );
    }
    let table = ablation_csv(&runs);
    write(&dir, "ablation.csv", &table)?;
    m.set_extra("variants", variants.into());
    m.finish(&dir)?;
    print!("{table}");
    Ok(())
}

fn cmd_sweep(w: &WithData, lambdas: Option<Vec<f64>>) -> Outcome {
    let mut cfg = load_run_config(w)?;
    if let Some(l) = lambdas {
        cfg.sweep = l;
    }
    cfg.validate()?;
    if cfg.sweep.is_empty() {
        return Err(Failure::Usage("no adversarial weights to sweep".into()));
    }
    let corpus = load_corpus(&w.data)?;
    let dir = out_dir(&w.common, "sweep");
    let mut m = data_manifest("sweep", w, &cfg, &dir)?;
    prepare_out(&dir, w.common.force)?;
    let rows = sweep_lambda(&corpus, &cfg, &cfg.sweep)?;
    let table = sweep_csv(&rows);
    write(&dir, "sweep.csv", &table)?;
    m.set_extra("lambdas", serde_json::to_value(&cfg.sweep).context("serialising sweep")?);
    m.finish(&dir)?;
    print!("{table}");
    Ok(())
}

fn cmd_report(dir: &Path) -> Outcome {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("run directory {} does not exist", dir.display())));
    }
    let m = Manifest::read(dir).map_err(|e| Failure::Usage(format!("{}: {e:#}", dir.display())))?;
    println!("command     {}", m.command);
    println!("seed        {}", m.seed);
    println!("input hash  {}", m.input_hash);
    if let Some(c) = &m.config_path {
        println!("config      {c}");
    }
    println!("files:");
    for f in &m.files {
        println!("  {}  {}", &f.hash[..12], f.name);
    }
    for name in ["report.txt", "ablation.csv", "sweep.csv", "train_log.csv"] {
        if let Ok(text) = fs::read_to_string(dir.join(name)) {
            println!("\n== {name}\n{text}");
        }
    }
    Ok(())
}
