//! `teecred`: run scenarios, attack them, and audit transcripts offline.
//!
//! Exit codes: 0 clean, 1 bad input, 2 a procedure aborted, 3 an invariant
//! violation (or, for `verify-transcript`, any audit finding).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use teecred::procedures::Status;
use teecred::scenario::{Scenario, ScenarioRun};
use teecred::simnet::campaign::{run_campaign, AttackFamily};
use teecred::simnet::transcript;

#[derive(Parser)]
#[command(name = "teecred", version, about = "TEE credential lifecycle simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario's procedures in order.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long, env = "TEECRED_SEED")]
        seed: Option<u64>,
        /// Write the JSON-lines transcript here.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Journal RA and BA state here; a later run resumes from it.
        #[arg(long)]
        state_dir: Option<PathBuf>,
    },
    /// Run a randomized adversary campaign against a scenario.
    Attack {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        family: AttackFamily,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        runs: u64,
        #[arg(long, env = "TEECRED_SEED", default_value_t = 0)]
        seed: u64,
        /// Write the JSON campaign report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Re-check a transcript's step order and secrecy findings offline.
    VerifyTranscript { path: PathBuf },
}

const BAD_INPUT: u8 = 1;

fn load(path: &Path) -> Result<Scenario, ExitCode> {
    Scenario::load(path).map_err(|e| {
        eprintln!("error: {}:{}: {}", path.display(), e.line, e.message);
        ExitCode::from(BAD_INPUT)
    })
}

fn write(path: &Path, contents: &str) -> Result<(), ExitCode> {
    fs::write(path, contents).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        ExitCode::from(BAD_INPUT)
    })
}

fn print_run(run: &ScenarioRun) {
    for o in &run.outcomes {
        let steps = o.steps.len();
        match &o.status {
            Status::Success => println!("{} #{}: success ({steps} steps)", o.kind, o.run),
            Status::Aborted { step, reason } => {
                println!("{} #{}: aborted at step {step}: {reason}", o.kind, o.run)
            }
            Status::Deferred { reason } => println!("{} #{}: deferred: {reason}", o.kind, o.run),
        }
        for w in &o.warnings {
            println!("  warning: {w}");
        }
    }
    for v in &run.world.violations {
        eprintln!("violation: {}", serde_json::to_string(v).expect("violations serialize"));
    }
}

fn cmd_run(
    scenario: &Path,
    seed: Option<u64>,
    transcript: Option<&Path>,
    state_dir: Option<PathBuf>,
) -> Result<ExitCode, ExitCode> {
    let mut s = load(scenario)?;
    if let Some(seed) = seed {
        s = s.with_seed(seed);
    }
    if let Some(dir) = state_dir {
        s = s.with_journal_dir(dir);
    }
    let run = s.run().map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(BAD_INPUT)
    })?;
    print_run(&run);
    if let Some(path) = transcript {
        write(path, &run.world.transcript.render())?;
    }
    Ok(ExitCode::from(run.exit_code() as u8))
}

fn cmd_attack(
    scenario: &Path,
    family: AttackFamily,
    runs: u64,
    seed: u64,
    report: Option<&Path>,
) -> Result<ExitCode, ExitCode> {
    let s = load(scenario)?;
    let r = run_campaign(&s, family, runs, seed).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(BAD_INPUT)
    })?;
    if let Some(path) = report {
        write(path, &serde_json::to_string_pretty(&r).expect("report serializes"))?;
    }
    println!(
        "{}: {} {family} runs, {} with violations",
        r.scenario, r.runs, r.runs_with_violations
    );
    for (status, n) in &r.status_counts {
        println!("  {status}: {n}");
    }
    for (name, n) in &r.violation_counts {
        println!("  violation {name}: {n}");
    }
    Ok(if r.clean() { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn cmd_verify(path: &Path) -> Result<ExitCode, ExitCode> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(BAD_INPUT)
    })?;
    let lines = transcript::parse(&text).map_err(|e| {
        eprintln!("error: {}:{e}", path.display());
        ExitCode::from(BAD_INPUT)
    })?;
    if lines.is_empty() {
        eprintln!("error: {} is empty", path.display());
        return Err(ExitCode::from(BAD_INPUT));
    }
    let problems = transcript::audit(&lines);
    for p in &problems {
        println!("{}:{}: {}", path.display(), p.line, p.what);
    }
    if problems.is_empty() {
        println!("{}: {} lines, clean", path.display(), lines.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(3))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { BAD_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            transcript,
            state_dir,
        } => cmd_run(&scenario, seed, transcript.as_deref(), state_dir),
        Command::Attack {
            scenario,
            family,
            runs,
            seed,
            report,
        } => cmd_attack(&scenario, family, runs, seed, report.as_deref()),
        Command::VerifyTranscript { path } => cmd_verify(&path),
    };
    result.unwrap_or_else(|code| code)
}
