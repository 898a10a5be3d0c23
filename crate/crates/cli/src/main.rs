//! `csmsim`: run scenarios, explore the small state space, and benchmark the
//! messaging channel.
//!
//! Exit codes: 0 success, 1 expectation or invariant failure, 2 usage or
//! parse error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csm_bench::{bench_run, write_csv, BenchError, Mode};
use csm_core::explorer::{explore, ExplorationConfig};
use csm_core::scenario::{builtin, builtin_names, load_scenario, run_scenario, RunConfig, Scenario};

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "csmsim", version, about = "Confidential shared memory simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file.
    Run {
        file: PathBuf,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Run a shipped scenario by name; `--list` prints the names.
    Builtin {
        #[arg(required_unless_present = "list")]
        name: Option<String>,
        #[arg(long)]
        list: bool,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Exhaustively explore command interleavings and print a JSON report.
    Explore {
        #[arg(long, default_value_t = 2)]
        realms: usize,
        /// Host granule pool on top of the granules each realm starts with.
        #[arg(long, default_value_t = 8)]
        granules: usize,
        #[arg(long, default_value_t = 6)]
        depth: usize,
        /// IPA slots per realm for CSM regions.
        #[arg(long, default_value_t = 3)]
        slots: u64,
        #[arg(long, default_value_t = 2)]
        csm_max_size: u64,
        #[arg(long)]
        no_host_attacks: bool,
        #[arg(long, default_value_t = 20_000_000)]
        state_cap: usize,
    },
    /// Measure one channel mode at one message size.
    Bench {
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        /// Append the result row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunOpts {
    /// Write the JSONL trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { file, opts } => match load_scenario(&file) {
            Ok(s) => run(&s, &opts),
            Err(e) => usage(format!("{}: {e}", file.display())),
        },
        Cmd::Builtin { list: true, .. } => {
            for n in builtin_names() {
                println!("{n}");
            }
            ExitCode::SUCCESS
        }
        Cmd::Builtin { name, opts, .. } => {
            let name = name.unwrap_or_default();
            match builtin(&name) {
                Some(s) => run(&s, &opts),
                None => usage(format!(
                    "unknown builtin {name:?}; available: {}",
                    builtin_names().collect::<Vec<_>>().join(", ")
                )),
            }
        }
        Cmd::Explore {
            realms,
            granules,
            depth,
            slots,
            csm_max_size,
            no_host_attacks,
            state_cap,
        } => {
            if realms == 0 || slots == 0 || csm_max_size == 0 || csm_max_size > slots {
                return usage("need at least one realm and slot, and 1 <= csm-max-size <= slots".into());
            }
            let r = explore(&ExplorationConfig {
                realm_count: realms,
                granule_count: granules,
                depth,
                slots,
                csm_max_size,
                include_host_attacks: !no_host_attacks,
                state_cap,
                ..ExplorationConfig::default()
            });
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            if r.violations.is_empty() && r.oracle_mismatches == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAIL)
            }
        }
        Cmd::Bench { mode, size, iters, csv } => match bench(mode, size, iters, csv.as_deref()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e @ (BenchError::Size(_) | BenchError::Iters(_))) => usage(e.to_string()),
            Err(e) => {
                eprintln!("csmsim: {e}");
                ExitCode::from(EXIT_FAIL)
            }
        },
    }
}

fn usage(msg: String) -> ExitCode {
    eprintln!("csmsim: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn run(s: &Scenario, opts: &RunOpts) -> ExitCode {
    let report = run_scenario(s, &RunConfig { seed: opts.seed });
    if let Some(path) = &opts.trace {
        if let Err(e) = std::fs::write(path, report.to_jsonl()) {
            return usage(format!("{}: {e}", path.display()));
        }
    }
    for m in &report.mismatches {
        eprintln!("{}: {m}", s.name);
    }
    for ev in report.trace.iter().filter(|e| !e.violations.is_empty()) {
        for v in &ev.violations {
            eprintln!("{}: step {}: invariant violated: {v}", s.name, ev.step);
        }
    }
    println!(
        "{}: {} steps, {} mismatches, {} violations: {}",
        s.name,
        report.trace.len(),
        report.mismatches.len(),
        report.violation_count,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    ExitCode::from(report.exit_code() as u8)
}

fn bench(mode: Mode, size: usize, iters: usize, csv: Option<&Path>) -> Result<(), BenchError> {
    let r = bench_run(mode, size, iters)?;
    println!("{}", serde_json::to_string(&r).expect("report serializes"));
    if let Some(path) = csv {
        write_csv(path, &[r])?;
    }
    Ok(())
}
