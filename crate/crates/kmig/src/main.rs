//! Command-line front end.
//!
//! Subcommands: `gen` snapshots a deterministic guest image, `scenario`
//! runs the scripted effectiveness cases, `bench` runs the monitoring
//! overhead sweep to CSV, and `validate` checks a spec (optionally
//! rehearsing the migration on a clone). `KMIG_SEED` overrides the spec
//! seed. Exit codes: 0 success, 1 assertion/scenario failure, 2 bad
//! configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use kmig::bench::{
    monitored_targets, sweep, ScenarioSpec, DEFAULT_KS, DEFAULT_REPEATS, PROTECTED_AREA_PAGES,
};
use kmig::error::SimError;
use kmig::guest::build_guest;
use kmig::injector::{RepeatDriver, SyscallInjector};
use kmig::migration::{AreaSpan, MigrationEngine};
use kmig::scenario::{run_dentry_case, run_fdt_case};
use kmig::{GuestAddress, Result};

const PAGE_SIZE: u64 = 4096;

#[derive(Parser)]
#[command(name = "kmig", about = "Kernel-object monitoring and migration simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a guest from a spec and snapshot it to disk.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Raw image path; a JSON sidecar lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scripted effectiveness case.
    Scenario {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_enum)]
        case: Case,
        /// Emit the report as JSON instead of per-check lines.
        #[arg(long)]
        json: bool,
    },
    /// Run the monitoring-overhead sweep and write per-cell CSV rows.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        /// Comma-separated monitored-object counts.
        #[arg(long)]
        ks: Option<String>,
        #[arg(long, default_value_t = DEFAULT_REPEATS)]
        repeats: u32,
        #[arg(long)]
        out: PathBuf,
        /// Also print rows, averages, and oracle totals as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Check a spec; with --dry-run, rehearse the migration on a clone.
    Validate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Case {
    Dentry,
    Fdt,
}

fn load_spec(path: &Path) -> Result<ScenarioSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Config(format!("cannot read spec {}: {e}", path.display())))?;
    let mut spec = ScenarioSpec::from_json(&text)?;
    if let Ok(value) = std::env::var("KMIG_SEED") {
        let seed: u64 = value
            .parse()
            .map_err(|_| SimError::Config(format!("KMIG_SEED {value:?} is not a u64")))?;
        spec.guest.seed = seed;
    }
    Ok(spec)
}

fn parse_ks(text: &str) -> Result<Vec<u32>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<u32>()
                .map_err(|_| SimError::Config(format!("bad k value {part:?}")))
        })
        .collect()
}

/// Ok(true) = success, Ok(false) = assertion failure (exit 1).
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { spec, out } => {
            let spec = load_spec(&spec)?;
            let (state, image) = build_guest(&spec.guest)?;
            let sidecar = out.with_extension("json");
            image.dump_to_files(&out, &sidecar)?;
            println!(
                "wrote {} ({} pages, {} dentries) and {}",
                out.display(),
                image.pages(),
                state.cache_member_count(),
                sidecar.display()
            );
            Ok(true)
        }
        Command::Scenario { spec, case, json } => {
            let spec = load_spec(&spec)?;
            let report = match case {
                Case::Dentry => run_dentry_case(&spec)?,
                Case::Fdt => run_fdt_case(&spec)?,
            };
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.render());
            }
            Ok(report.pass)
        }
        Command::Bench { spec, ks, repeats, out, json } => {
            let spec = load_spec(&spec)?;
            let ladder = match ks {
                Some(text) => parse_ks(&text)?,
                None => DEFAULT_KS.to_vec(),
            };
            let result = sweep(&spec, &ladder, repeats)?;
            std::fs::write(&out, result.to_csv())?;
            if json {
                println!("{}", result.to_json());
            } else {
                println!("wrote {} ({} cells)", out.display(), result.rows.len());
            }
            let oracle_ok = result
                .rows
                .iter()
                .zip(&result.oracle_totals)
                .all(|(row, &oracle)| row.events_total == oracle);
            if !oracle_ok {
                eprintln!("monitor/oracle mismatch in sweep results");
            }
            Ok(oracle_ok)
        }
        Command::Validate { spec, dry_run } => {
            let spec = load_spec(&spec)?;
            let (mut state, mut image) = build_guest(&spec.guest)?;
            state.verify_invariants(&image)?;
            if !dry_run {
                println!("spec ok: {} files, {} processes, k={}",
                    spec.guest.num_files, spec.guest.num_processes, spec.k);
                return Ok(true);
            }
            let carrier = state.pids().into_iter().min().expect("guest has processes");
            let mut injector = SyscallInjector::default();
            let mut driver = RepeatDriver::stdio_read(carrier);
            let area_len = PROTECTED_AREA_PAGES * PAGE_SIZE;
            let area_start = injector.allocate_protected_area(
                &mut state,
                &mut image,
                &mut driver,
                GuestAddress(spec.protected_base),
                area_len,
            )?;
            let sources = monitored_targets(&state, spec.k)?;
            let probes: Vec<String> = (0..spec.k.min(8))
                .map(kmig::guest::initial_file_name)
                .collect();
            let verdict = MigrationEngine::standard().dry_run_validate(
                &state,
                &image,
                &sources,
                AreaSpan::new(area_start, area_len),
                &probes,
            );
            println!("{}", serde_json::to_string_pretty(&verdict).expect("verdict serializes"));
            Ok(verdict.pass)
        }
    }
}

fn exit_code_for(err: &SimError) -> ExitCode {
    match err {
        SimError::Config(_) | SimError::Json(_) | SimError::BadProfile(_) | SimError::Io(_) => {
            ExitCode::from(2)
        }
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
