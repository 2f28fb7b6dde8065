use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccncheck::checkpoint::store::SnapshotStore;
use ccncheck::checkpoint::verify::{check_blocking, verify_consistency};
use ccncheck::recovery::plan_restart;
use ccncheck::scenario::{run_scenario, sweep, Scenario};
use ccncheck::trace::Trace;

#[derive(Parser)]
#[command(
    name = "ccncheck",
    about = "Deterministic checkpointing simulator for distributed applications on a content centric network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file; writes trace.jsonl and the snapshot store.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Verify a finished run: per-epoch consistency plus the blocking property.
    Verify {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Print the restart plan for a stored checkpoint.
    Replay {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        epoch: Option<u64>,
    },
    /// Run a scenario across many seeds in parallel and verify each run.
    Sweep {
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<bool, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { scenario, out } => {
            let s = Scenario::load(&scenario)?;
            let artifacts = run_scenario(&s, &out)?;
            let outputs = artifacts
                .trace
                .iter()
                .filter(|r| matches!(r.ev, ccncheck::trace::Event::AppOutput { .. }))
                .count();
            let epochs = artifacts.store.committed_epochs()?;
            println!("trace:  {}", artifacts.trace_path.display());
            println!("store:  {}", artifacts.store.root().display());
            println!("events: {}", artifacts.trace.len());
            println!("app outputs: {outputs}");
            println!("committed epochs: {epochs:?}");
            Ok(true)
        }
        Command::Verify { trace, store } => {
            let trace = Trace::read_jsonl(&trace)?;
            let store = SnapshotStore::new(&store)?;
            let mut ok = true;
            for epoch in store.committed_epochs()? {
                let g = store.load_global(epoch)?;
                let report = verify_consistency(&g, trace.records());
                let status = if report.is_consistent() { "PASS" } else { "FAIL" };
                println!(
                    "epoch {epoch}: {status} (orphan messages: {}, in-flight: {}, orphan interests: {})",
                    report.orphan_messages.len(),
                    report.in_flight_at_snapshot.len(),
                    report.orphan_interests.len()
                );
                for v in report
                    .orphan_messages
                    .iter()
                    .chain(&report.in_flight_at_snapshot)
                    .chain(&report.orphan_interests)
                {
                    println!("  {v}");
                }
                ok &= report.is_consistent();
            }
            let blocking = check_blocking(trace.records());
            let status = if blocking.is_empty() { "PASS" } else { "FAIL" };
            println!("blocking property: {status}");
            for v in &blocking {
                println!("  {v}");
            }
            Ok(ok && blocking.is_empty())
        }
        Command::Replay { store, epoch } => {
            let store = SnapshotStore::new(&store)?;
            let plan = plan_restart(&store, epoch)?;
            println!("{}", serde_json::to_string_pretty(&plan)?);
            Ok(true)
        }
        Command::Sweep {
            seeds,
            scenario,
            out,
        } => {
            let s = Scenario::load(&scenario)?;
            let outcomes = sweep(&s, seeds, &out)?;
            let mut ok = true;
            for o in &outcomes {
                let status = if o.passed { "PASS" } else { "FAIL" };
                println!("seed {}: {status}", o.seed);
                for f in &o.failures {
                    println!("  {f}");
                }
                ok &= o.passed;
            }
            println!(
                "{}/{} seeds passed",
                outcomes.iter().filter(|o| o.passed).count(),
                outcomes.len()
            );
            Ok(ok)
        }
    }
}
