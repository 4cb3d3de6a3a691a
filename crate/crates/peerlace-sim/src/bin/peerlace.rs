//! Command-line front end for the peer-to-peer training simulator.
//!
//! Subcommands:
//! - `run` executes a scenario file and writes `metrics.csv` plus
//!   `summary.json` into the output directory.
//! - `compare-store` measures bytes moved by in-store versus
//!   fetch-process-restore tensor operations and checks their outputs
//!   are bit-identical.
//! - `scaling` sweeps peer counts and batch sizes over short clean runs.
//! - `attack-study` runs the canonical four-peer poisoning experiment
//!   for a chosen rule and attack.
//!
//! Exit codes: 0 on success, 2 for configuration problems (bad scenario
//! file, bad flags), 1 for runtime failures.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use peerlace_sim::report::{write_csv, write_json};
use peerlace_sim::scenario::{
    build_attack_scenario, compare_store_paths, run_scenario, scaling_study, ExecutionMode,
    RuleName, RunOutput, Scenario, StudyAttack,
};
use peerlace_sim::SimError;

#[derive(Parser)]
#[command(name = "peerlace", version, about = "Deterministic peer-to-peer training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario file and write metrics.csv + summary.json.
    Run {
        /// Path to the scenario JSON file.
        #[arg(long)]
        scenario: PathBuf,
        /// Directory the reports are written into (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's execution mode (det or conc).
        #[arg(long)]
        mode: Option<ExecutionMode>,
        /// Override the scenario's seed (takes precedence over PEERLACE_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare in-store against fetch-process-restore byte costs.
    CompareStore {
        /// Model / gradient length in values.
        #[arg(long, default_value_t = 1000)]
        len: usize,
        /// Number of gradients averaged per trial.
        #[arg(long, default_value_t = 10)]
        grads: usize,
        /// Randomized repetitions for the bit-equality check.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Optional JSON report path; the table prints to stdout regardless.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep peer counts and batch sizes over short clean runs.
    Scaling {
        /// Comma-separated peer counts.
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 6, 8])]
        peers: Vec<usize>,
        /// Comma-separated shard sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32])]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the canonical four-peer poisoning experiment.
    AttackStudy {
        /// Aggregation rule: average, marmed, geomed, meamed, or zeno.
        #[arg(long)]
        rule: RuleName,
        /// Attack family: none, signflip, or noise.
        #[arg(long)]
        attack: StudyAttack,
        /// Shorten the run from the canonical 200 epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Directory the reports are written into (created if missing).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn dispatch(command: Command) -> Result<(), SimError> {
    match command {
        Command::Run {
            scenario,
            out,
            mode,
            seed,
        } => {
            let mut scenario = Scenario::from_path(&scenario)?;
            if let Some(mode) = mode {
                scenario.mode = mode;
            }
            let output = run_scenario(&scenario, effective_seed(seed)?)?;
            write_reports(&out, &output)?;
            print_run_digest(&output);
            Ok(())
        }
        Command::CompareStore {
            len,
            grads,
            trials,
            seed,
            out,
        } => {
            let cmp = compare_store_paths(len, grads, trials, seed)?;
            println!(
                "averaging {} gradients of length {} plus one model update, {} trials",
                cmp.n_grads, cmp.model_len, cmp.trials
            );
            println!("  fetch-process-restore: {} bytes", cmp.external_bytes);
            println!("  in-store commands:     {} bytes", cmp.instore_bytes);
            println!(
                "  reduction: {:.2}% (averaging), {:.2}% (model update)",
                cmp.reduction_percent_average, cmp.reduction_percent_update
            );
            println!(
                "  outputs bit-identical: {}",
                if cmp.outputs_identical { "yes" } else { "NO" }
            );
            if let Some(path) = out {
                write_json(&path, &cmp)?;
            }
            Ok(())
        }
        Command::Scaling {
            peers,
            batches,
            seed,
            out,
        } => {
            let rows = scaling_study(&peers, &batches, seed)?;
            println!("peers  batch  shards/peer  bytes/peer/epoch  final loss");
            for r in &rows {
                println!(
                    "{:>5}  {:>5}  {:>11}  {:>16}  {:>10.4}",
                    r.n_peers, r.batch_size, r.shards_per_peer, r.bytes_per_peer_epoch,
                    r.final_train_loss
                );
            }
            if let Some(path) = out {
                write_json(&path, &rows)?;
            }
            Ok(())
        }
        Command::AttackStudy {
            rule,
            attack,
            epochs,
            out,
            seed,
        } => {
            let mut scenario = build_attack_scenario(rule, attack);
            if let Some(epochs) = epochs {
                scenario.training.max_epochs = epochs;
                scenario.validate()?;
            }
            let output = run_scenario(&scenario, effective_seed(seed)?)?;
            write_reports(&out, &output)?;
            print_run_digest(&output);
            Ok(())
        }
    }
}

/// Explicit `--seed` wins; otherwise the `PEERLACE_SEED` environment
/// variable; otherwise the scenario file's own seed.
fn effective_seed(cli_seed: Option<u64>) -> Result<Option<u64>, SimError> {
    if cli_seed.is_some() {
        return Ok(cli_seed);
    }
    match std::env::var("PEERLACE_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| SimError::Config(format!("PEERLACE_SEED is not a u64: {v:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(SimError::Config(format!("PEERLACE_SEED unreadable: {e}"))),
    }
}

fn write_reports(dir: &PathBuf, output: &RunOutput) -> Result<(), SimError> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("metrics.csv"), &output.rows)?;
    write_json(&dir.join("summary.json"), &output.summary)?;
    println!(
        "wrote {} and {}",
        dir.join("metrics.csv").display(),
        dir.join("summary.json").display()
    );
    Ok(())
}

fn print_run_digest(output: &RunOutput) {
    let s = &output.summary;
    println!(
        "scenario {:?} (seed {}): {} epochs, {} peers active at the end",
        s.scenario,
        s.seed,
        s.epochs_run,
        s.final_active.len()
    );
    println!(
        "final train loss {:.4}, validation accuracy {:.1}%",
        s.final_train_loss,
        100.0 * s.final_val_accuracy
    );
    if let Some(epoch) = s.converged_at {
        println!("converged at epoch {epoch}");
    }
    if !s.confirmed_failures.is_empty() {
        for (rank, epoch) in &s.confirmed_failures {
            println!("confirmed failure of peer {rank} at epoch {epoch}");
        }
    }
    if !s.joins.is_empty() {
        for (rank, epoch) in &s.joins {
            println!("peer {rank} joined at epoch {epoch}");
        }
    }
    if !s.models_consistent {
        println!("WARNING: model replicas diverged during the run");
    }
}
