//! Command-line front end: configure, launch, resume, sweep, and inspect
//! simulator runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spark_dfl::sim::{metrics, Checkpoint, RunConfig, Simulation};
use spark_dfl::wire;
use spark_dfl::SparkError;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "spark", about = "Decentralized NTK learning simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured experiment, one run per seed.
    Run(RunArgs),
    /// Run a one-axis grid and summarize it.
    Sweep(SweepArgs),
    /// Summarize a finished run directory.
    Report(ReportArgs),
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Args)]
struct CommonRunArgs {
    /// TOML configuration file; defaults apply when omitted.
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.eta=0.1 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed override (repeatable; replaces the config's seed list).
    #[arg(long)]
    seed: Vec<u64>,
    /// Output directory (also settable via SPARK_OUT or the config file).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Write a checkpoint every N rounds.
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<usize>,
    /// Resume from a checkpoint file (single-seed runs only).
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Config key to sweep, e.g. projection.k.
    #[arg(long)]
    axis: String,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing metrics.csv and manifest.json.
    run_dir: PathBuf,
    /// Accuracy threshold for the rounds-to-threshold figure.
    #[arg(long, default_value_t = 0.85)]
    threshold: f64,
    /// Print a plain-text sparkline of the accuracy curve.
    #[arg(long)]
    sparkline: bool,
}

/// A failure tagged with the exit code it should produce.
#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl From<SparkError> for CliError {
    fn from(e: SparkError) -> Self {
        let code = match e {
            SparkError::Config(_) | SparkError::Parse { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
        Command::Defaults => {
            print!("{}", RunConfig::default().to_toml_string());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(common: &CommonRunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml_str(&text)?
        }
        None => RunConfig::default(),
    };
    for pair in &common.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set {pair:?} is not KEY=VALUE")))?;
        cfg.apply_override(key, value)?;
    }
    if !common.seed.is_empty() {
        cfg.experiment.seeds = common.seed.clone();
    }
    if let Some(out) = &common.out {
        cfg.output.dir = Some(out.clone());
    } else if let Ok(env_out) = std::env::var("SPARK_OUT") {
        cfg.output.dir = Some(PathBuf::from(env_out));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output
        .dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(&cfg.experiment.name)
}

fn prepare_dir(dir: &Path, overwrite: bool) -> Result<(), CliError> {
    if dir.exists() && !overwrite {
        let has_metrics = dir.join("metrics.csv").exists();
        if has_metrics {
            return Err(CliError::usage(format!(
                "{} already holds results; pass --set output.overwrite=true to replace them",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Jacobian-payload compression of the configured projection, in percent.
fn compression_percent(cfg: &RunConfig) -> Result<f64, CliError> {
    let arch = cfg.model.architecture();
    let spec = spark_dfl::projection::ProjectionSpec::new(
        0,
        cfg.projection.k,
        cfg.effective_mode()?,
        &arch.layer_table(),
    )?;
    let names: Vec<&str> = spec.layers.iter().map(|l| l.name.as_str()).collect();
    let n = cfg.train.batch_size;
    let reduction = wire::jacobian_reduction(
        n,
        arch.num_classes,
        spec.total_width(),
        spec.total_dim(),
        &names,
        cfg.projection.parsed_codec()?,
        n,
    );
    Ok(reduction * 100.0)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

fn write_manifest(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<(), CliError> {
    let manifest = serde_json::json!({
        "name": cfg.experiment.name,
        "seed": seed,
        "compression_percent": format!("compression {:.1}%", compression_percent(cfg)?),
        "evaluation_cadence": "every round",
        "git_describe": git_describe(),
        "config": toml_to_json(cfg),
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

fn toml_to_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn run_one_seed(
    cfg: &RunConfig,
    seed: u64,
    dir: &Path,
    checkpoint_every: Option<usize>,
    resume: Option<&Path>,
) -> Result<f64, CliError> {
    prepare_dir(dir, cfg.output.overwrite)?;
    write_manifest(dir, cfg, seed)?;
    let mut sim = match resume {
        Some(path) => {
            let cp = Checkpoint::load(path)?;
            Simulation::restore(cfg, &cp)?
        }
        None => Simulation::new(cfg, seed)?,
    };
    let mut rows = Vec::new();
    while sim.round() < cfg.train.rounds {
        rows.push(sim.step_round().map_err(CliError::from)?);
        if let Some(every) = checkpoint_every {
            if every > 0 && sim.round() % every == 0 {
                sim.checkpoint().save(&dir.join("state.spkc"))?;
            }
        }
    }
    std::fs::write(dir.join("metrics.csv"), metrics::to_csv(&rows))?;
    let final_acc = rows.last().map_or(f64::NAN, |m| m.aggregated_model_accuracy);
    Ok(final_acc)
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.common)?;
    if args.resume.is_some() && cfg.experiment.seeds.len() != 1 {
        return Err(CliError::usage("--resume requires exactly one seed"));
    }
    let base = output_dir(&cfg);
    for &seed in &cfg.experiment.seeds {
        let dir = base.join(format!("seed-{seed}"));
        let acc = run_one_seed(
            &cfg,
            seed,
            &dir,
            args.checkpoint_every,
            args.resume.as_deref(),
        )?;
        println!("seed {seed}: final aggregated accuracy {acc:.4} ({})", dir.display());
    }
    Ok(())
}

fn rounds_to_threshold(rows: &[metrics::CsvRow], threshold: f64) -> Option<usize> {
    rows.iter().find(|r| r.agg_acc >= threshold).map(|r| r.round)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    if args.values.is_empty() {
        return Err(CliError::usage("--values must list at least one value"));
    }
    let base_cfg = load_config(&args.common)?;
    let base = output_dir(&base_cfg).join(format!("sweep-{}", args.axis.replace('.', "-")));
    let mut summary = String::from("value,seed,final_acc,rounds_to_threshold,total_bytes\n");
    for value in &args.values {
        let mut cfg = base_cfg.clone();
        cfg.apply_override(&args.axis, value)?;
        cfg.validate()?;
        for &seed in &cfg.experiment.seeds.clone() {
            let dir = base.join(format!("{}-{}", value, seed));
            run_one_seed(&cfg, seed, &dir, None, None)?;
            let rows = metrics::parse_csv(&std::fs::read_to_string(dir.join("metrics.csv"))?)?;
            let final_acc = rows.last().map_or(f64::NAN, |r| r.agg_acc);
            let to_thresh = rounds_to_threshold(&rows, 0.85)
                .map(|r| r.to_string())
                .unwrap_or_else(|| "never".to_string());
            let total: u64 = rows.last().map_or(0, |r| r.cum_bytes);
            summary.push_str(&format!("{value},{seed},{final_acc:.4},{to_thresh},{total}\n"));
        }
    }
    std::fs::create_dir_all(&base)?;
    std::fs::write(base.join("summary.csv"), &summary)?;
    print!("{summary}");
    println!("summary written to {}", base.join("summary.csv").display());
    Ok(())
}

fn sparkline(values: &[f64]) -> String {
    const TICKS: [char; 8] = ['\u{2581}', '\u{2582}', '\u{2583}', '\u{2584}', '\u{2585}', '\u{2586}', '\u{2587}', '\u{2588}'];
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
        (l.min(v), h.max(v))
    });
    let span = (hi - lo).max(1e-12);
    values
        .iter()
        .map(|&v| TICKS[(((v - lo) / span) * 7.0).round() as usize])
        .collect()
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let csv_path = args.run_dir.join("metrics.csv");
    let manifest_path = args.run_dir.join("manifest.json");
    for p in [&csv_path, &manifest_path] {
        if !p.exists() {
            return Err(CliError::usage(format!("{} not found", p.display())));
        }
    }
    let rows = metrics::parse_csv(&std::fs::read_to_string(&csv_path)?)?;
    let total_rounds = rows.len();
    match rounds_to_threshold(&rows, args.threshold) {
        Some(r) => println!("rounds to {:.0}% accuracy: {r}", args.threshold * 100.0),
        None => println!(
            "rounds to {:.0}% accuracy: not reached ({total_rounds} rounds)",
            args.threshold * 100.0
        ),
    }
    let final_acc = rows.last().map_or(f64::NAN, |r| r.agg_acc);
    println!("final aggregated accuracy: {final_acc:.4}");
    let total_bytes = rows.last().map_or(0, |r| r.cum_bytes);
    println!("total communicated: {:.6} GiB", total_bytes as f64 / (1u64 << 30) as f64);
    if args.sparkline && !rows.is_empty() {
        let accs: Vec<f64> = rows.iter().map(|r| r.agg_acc).collect();
        println!("accuracy: {}", sparkline(&accs));
    }
    Ok(())
}
