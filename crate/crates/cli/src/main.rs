use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hvcl::checkpoint;
use hvcl::config::RunConfig;
use hvcl::data::Scenario;
use hvcl::experiment::{self, build_stream, parse_summary, summary_text};
use hvcl::harness::evaluate_matrix;
use hvcl::selftest::{run_selftest, Fixtures};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;

/// Mixture-of-variational-experts continual learning.
#[derive(Parser)]
#[command(name = "hvcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train over a task stream for every seed and write the run artifacts.
    Run(RunArgs),
    /// Recompute the final accuracy row from a saved checkpoint.
    Eval(EvalArgs),
    /// Run the numerical oracle suite.
    Selftest,
}

#[derive(Args)]
struct Overrides {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.experts=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// MNIST directory holding the four IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Seeds to run, replacing `run.seeds`. Repeatable or comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory; one `seed_<n>` subdirectory per seed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `run`.
    checkpoint: PathBuf,
    /// Evaluate on another scenario than the one recorded in the checkpoint.
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn load_config(o: &Overrides) -> hvcl::Result<RunConfig> {
    let mut config = match &o.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).map_err(|e| hvcl::Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| hvcl::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(dir) = &o.data_dir {
        config.data_dir = dir.clone();
    }
    Ok(config)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config = load_config(&args.overrides)?;
    if !args.seed.is_empty() {
        config.seeds = args.seed.clone();
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    config.validate()?;

    let mut accs = Vec::new();
    for &seed in &config.seeds {
        let stream = build_stream(&config, seed)?;
        println!(
            "seed {seed}: {} {} tasks, mode {}",
            stream.len(),
            config.scenario.as_str(),
            config.train.mode.as_str()
        );
        let outcome = experiment::run_on_stream(&config, &stream, seed)?;
        let summary = summary_text(&config, seed, &outcome)?;
        let dir = config.output_dir.join(format!("seed_{seed}"));
        experiment::write_artifacts(&dir, &summary, &outcome)?;
        let (acc, forgetting) = outcome.matrix.forgetting_metrics()?;
        print!("{}", experiment::matrix_table(&outcome));
        println!("ACC {acc:.4}  forgetting {forgetting:.4}  -> {}", dir.display());
        accs.push(acc);
    }
    if accs.len() > 1 {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("mean ACC over {} seeds: {mean:.4}", accs.len());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.checkpoint)?;
    let recorded = parse_summary(&ckpt.metadata).map_err(|e| checkpoint_error(&args.checkpoint, e))?;
    let mut config = RunConfig::from_summary(&ckpt.metadata).map_err(|e| checkpoint_error(&args.checkpoint, e))?;
    if let Some(dir) = args.data_dir {
        config.data_dir = dir;
    }
    let same_scenario = args.scenario.is_none_or(|s| s == config.scenario);
    if let Some(s) = args.scenario {
        config.scenario = s;
    }
    let stream = build_stream(&config, recorded.seed)?;
    let row = evaluate_matrix(&ckpt.model, &stream, stream.len() - 1)?;
    let cells: Vec<String> = row.iter().map(|a| format!("{a:.4}")).collect();
    println!("final row: {}", cells.join(" "));
    println!("ACC {:.4}", row.iter().sum::<f64>() / row.len() as f64);
    if same_scenario {
        let exact = row.len() == recorded.final_row.len()
            && row
                .iter()
                .zip(&recorded.final_row)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !exact {
            bail!(
                "final row differs from the one recorded in {}",
                args.checkpoint.display()
            );
        }
        println!("matches the recorded final row exactly");
    }
    Ok(())
}

fn checkpoint_error(path: &Path, e: hvcl::Error) -> hvcl::Error {
    hvcl::Error::Checkpoint {
        path: path.to_path_buf(),
        detail: format!("metadata: {e}"),
    }
}

fn cmd_selftest() -> Result<()> {
    let report = run_selftest(&Fixtures::default());
    for c in &report.checks {
        println!("{c}");
    }
    let failed: Vec<&str> = report.failures().iter().map(|c| c.name).collect();
    if !failed.is_empty() {
        return Err(anyhow!("failed checks: {}", failed.join(", ")));
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<hvcl::Error>()) else {
        return EXIT_FAILURE;
    };
    use hvcl::Error as E;
    match e {
        E::Config(_) => EXIT_CONFIG,
        E::BadMagic { .. } | E::Truncated { .. } | E::CountMismatch { .. } | E::Io { .. } => EXIT_DATA,
        E::Checkpoint { .. } => EXIT_CHECKPOINT,
        e if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a).context("run failed"),
        Command::Eval(a) => cmd_eval(a).context("eval failed"),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
