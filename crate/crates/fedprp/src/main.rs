//! Command-line front end: run experiments, compare finished runs, and run
//! the new-client generalization experiment from a checkpoint.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fedprp::checkpoint::{load_state_file, save_state_file};
use fedprp::config::{echo_config, parse_config, ExperimentPlan, StrategyKind};
use fedprp::error::{FedError, Result};
use fedprp::experiment::{
    new_client_datasets, prepare_data, run_new_clients, run_rounds, window_summary, Summary,
};
use fedprp::federation::{Algorithm, FederationState, RunRecord};

#[derive(Parser)]
#[command(
    name = "fedprp",
    about = "Desk-scale simulator for skewed heterogeneous federated learning \
             with prototype rectification and personalized heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts to a directory.
    Run(RunArgs),
    /// Compare finished runs trained on the same partition.
    Compare(CompareArgs),
    /// Add new clients to a trained checkpoint and track their accuracy.
    Newclients(NewClientsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for config echo, metrics, checkpoint, and summary.
    #[arg(long)]
    out: PathBuf,
    /// Override the federation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the algorithm: fedprp, fedavg, or proto.
    #[arg(long)]
    algo: Option<String>,
    /// Override the long-tail imbalance ratio.
    #[arg(long)]
    gamma: Option<f64>,
    /// Override the Dirichlet concentration (switches to the dirichlet partitioner).
    #[arg(long)]
    alpha: Option<f64>,
    /// Override classes per client (switches to the sharding partitioner).
    #[arg(long)]
    shards: Option<usize>,
    /// Override the prototype EMA factor.
    #[arg(long)]
    beta: Option<f64>,
    /// Override the loss mixing weight.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more completed run directories.
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
    /// Where to write the CSV table; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NewClientsArgs {
    /// Checkpoint to continue from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config that produced the checkpoint's data (for the held-out pool).
    #[arg(long)]
    config: Option<PathBuf>,
    /// How many clients to add.
    #[arg(long, default_value_t = 10)]
    n_new: usize,
    /// How many local rounds the new clients run.
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    /// Output directory for the trajectory log.
    #[arg(long)]
    out: PathBuf,
}

/// Per-run manifest tying the summary to the partition it was trained on.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    algorithm: String,
    seed: u64,
    fingerprint: u64,
    window: usize,
    summary: Summary,
}

fn load_plan(path: &Option<PathBuf>) -> Result<ExperimentPlan> {
    match path {
        Some(p) => parse_config(&fs::read_to_string(p)?),
        None => Ok(ExperimentPlan::default()),
    }
}

fn apply_overrides(plan: &mut ExperimentPlan, args: &RunArgs) -> Result<()> {
    if let Some(seed) = args.seed {
        plan.fed.seed = seed;
    }
    if let Some(algo) = &args.algo {
        plan.fed.algorithm = match algo.as_str() {
            "fedprp" => Algorithm::FedPrp,
            "fedavg" => Algorithm::FedAvgBaseline,
            "proto" => Algorithm::ProtoOnlyBaseline,
            _ => {
                return Err(FedError::Config(format!(
                    "--algo must be fedprp, fedavg, or proto, got {algo:?}"
                )))
            }
        };
    }
    if let Some(gamma) = args.gamma {
        plan.gamma = gamma;
    }
    if let Some(alpha) = args.alpha {
        plan.alpha = alpha;
        plan.strategy = StrategyKind::Dirichlet;
    }
    if let Some(shards) = args.shards {
        plan.shards = shards;
        plan.strategy = StrategyKind::Sharding;
    }
    if let Some(beta) = args.beta {
        plan.fed.beta = beta;
    }
    if let Some(lambda) = args.lambda {
        plan.fed.lambda = lambda;
    }
    Ok(())
}

fn summary_text(manifest: &RunManifest) -> String {
    let s = &manifest.summary;
    format!(
        "algorithm: {}\nseed: {}\nrounds: {}\nwindow: {} (last rounds averaged)\n\
         acc_glo: {:.4}\nacc_loc: {:.4}\nacc_sel: {:.4}\n\
         many: {:.4}\nmedium: {:.4}\nfew: {:.4}\n",
        manifest.algorithm,
        manifest.seed,
        s.rounds,
        s.window,
        s.acc_glo,
        s.acc_loc,
        s.acc_sel,
        s.many,
        s.medium,
        s.few
    )
}

fn read_metrics(path: &Path) -> Result<Vec<RunRecord>> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| FedError::Input(format!("bad metrics line in {path:?}: {e}")))?,
        );
    }
    Ok(records)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut plan = load_plan(&args.config)?;
    apply_overrides(&mut plan, args)?;
    plan.validate()?;
    let prepared = prepare_data(&plan)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.txt"), echo_config(&plan))?;

    let mut state = FederationState::init(&plan.fed, prepared.input_dim, prepared.num_classes)?;
    let metrics_path = args.out.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
    let records = run_rounds(&mut state, &prepared, &plan.fed, plan.fed.rounds, |r| {
        serde_json::to_writer(&mut metrics, r)
            .map_err(|e| FedError::Io(std::io::Error::other(e)))?;
        metrics.write_all(b"\n")?;
        Ok(())
    })?;
    metrics.flush()?;
    save_state_file(&state, args.out.join("state.ckpt"))?;

    let summary = window_summary(&records, plan.report_window)?;
    let manifest = RunManifest {
        algorithm: plan.fed.algorithm.as_str().to_string(),
        seed: plan.fed.seed,
        fingerprint: prepared.fingerprint,
        window: plan.report_window,
        summary,
    };
    fs::write(
        args.out.join("run.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| FedError::Io(std::io::Error::other(e)))?,
    )?;
    let text = summary_text(&manifest);
    fs::write(args.out.join("summary.txt"), &text)?;

    // Exit code 0 only if everything parses back cleanly.
    let reread = read_metrics(&metrics_path)?;
    if reread != records {
        return Err(FedError::Internal("metrics file does not round-trip".into()));
    }
    load_state_file(args.out.join("state.ckpt"))?;
    print!("{text}");
    Ok(())
}

struct LoadedRun {
    label: String,
    manifest: RunManifest,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)
        .map_err(|e| FedError::Input(format!("bad run.json in {dir:?}: {e}")))?;
    // Summaries must be recomputable from the metrics stream.
    let records = read_metrics(&dir.join("metrics.jsonl"))?;
    let recomputed = window_summary(&records, manifest.window)?;
    if recomputed != manifest.summary {
        return Err(FedError::Comparison(format!(
            "summary in {dir:?} does not match its metrics file"
        )));
    }
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedRun {
        label: format!("{}:{}", manifest.algorithm, label),
        manifest,
    })
}

const METRICS: [(&str, fn(&Summary) -> f64); 6] = [
    ("acc_glo", |s| s.acc_glo),
    ("acc_loc", |s| s.acc_loc),
    ("acc_sel", |s| s.acc_sel),
    ("many", |s| s.many),
    ("medium", |s| s.medium),
    ("few", |s| s.few),
];

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let runs: Vec<LoadedRun> = args.runs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let fingerprint = runs[0].manifest.fingerprint;
    for run in &runs[1..] {
        if run.manifest.fingerprint != fingerprint {
            return Err(FedError::Comparison(format!(
                "{} was trained on a different partition than {}",
                run.label, runs[0].label
            )));
        }
    }

    let mut csv = String::from("run,metric,value\n");
    for run in &runs {
        for (name, get) in METRICS {
            csv.push_str(&format!("{},{},{:?}\n", run.label, name, get(&run.manifest.summary)));
        }
    }

    let width = runs.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
    let mut pretty = format!("{:<width$}", "run");
    for (name, _) in METRICS {
        pretty.push_str(&format!("  {name:>8}"));
    }
    pretty.push('\n');
    for run in &runs {
        pretty.push_str(&format!("{:<width$}", run.label));
        for (_, get) in METRICS {
            pretty.push_str(&format!("  {:>8.4}", get(&run.manifest.summary)));
        }
        pretty.push('\n');
    }

    print!("{pretty}");
    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct NewClientRecord {
    round: usize,
    acc_loc: Vec<f64>,
    mean: f64,
}

fn cmd_newclients(args: &NewClientsArgs) -> Result<()> {
    let plan = load_plan(&args.config)?;
    plan.validate()?;
    let mut state = load_state_file(&args.checkpoint)?;
    if args.n_new == 0 {
        println!("checkpoint valid at round {}; no clients added", state.round);
        return Ok(());
    }
    let prepared = prepare_data(&plan)?;
    let datasets = new_client_datasets(&plan, &prepared.eval_ctx.balanced_test, args.n_new)?;
    let trajectory = run_new_clients(
        &mut state,
        &datasets,
        &plan.fed,
        &prepared.eval_ctx.balanced_test,
        args.rounds,
    )?;
    fs::create_dir_all(&args.out)?;
    let mut out = std::io::BufWriter::new(fs::File::create(args.out.join("new_clients.jsonl"))?);
    for (i, accs) in trajectory.iter().enumerate() {
        let record = NewClientRecord {
            round: i + 1,
            mean: accs.iter().sum::<f64>() / accs.len() as f64,
            acc_loc: accs.clone(),
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| FedError::Io(std::io::Error::other(e)))?;
        out.write_all(b"\n")?;
        println!("round {}: mean new-client acc_loc {:.4}", record.round, record.mean);
    }
    out.flush()?;
    save_state_file(&state, args.out.join("state.ckpt"))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Newclients(args) => cmd_newclients(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
