use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use stwa_core::actors::Phase;
use stwa_core::crypto::{CryptoMode, HashAlg};
use stwa_core::demo;
use stwa_core::registry::Ticks;
use stwa_core::runner::{self, RunError};
use stwa_core::scenario::Scenario;
use stwa_core::simnet::to_jsonl;
use stwa_core::verifier::{self, Options};

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "stwa",
    version,
    about = "Three-way IoT authentication simulator and trace checker"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and print a phase summary.
    Run(RunArgs),
    /// Verify a JSONL transcript and print the report as JSON.
    Check {
        trace: PathBuf,
        #[arg(long, default_value_t = 100)]
        ttl: Ticks,
    },
    /// Print the message timeline of one protocol phase.
    Demo { phase: DemoPhase },
}

#[derive(clap::Args)]
struct RunArgs {
    scenario: PathBuf,
    #[arg(long, env = "STWA_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    ttl: Option<Ticks>,
    /// Where to write the JSONL transcript.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    crypto_mode: Option<CryptoMode>,
    #[arg(long)]
    hash_alg: Option<HashAlg>,
    #[arg(long)]
    drop_rate: Option<f64>,
    /// Where to write the final registry state as JSON.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoPhase {
    Init,
    Register,
    Connect,
    Transact,
}

impl From<DemoPhase> for Phase {
    fn from(p: DemoPhase) -> Self {
        match p {
            DemoPhase::Init => Phase::Initialization,
            DemoPhase::Register => Phase::Registration,
            DemoPhase::Connect => Phase::Connection,
            DemoPhase::Transact => Phase::Transaction,
        }
    }
}

struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure {
        code,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let text = read(&args.scenario)?;
    let mut scn = Scenario::parse(&text)
        .map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", args.scenario.display())))?;
    let s = &mut scn.settings;
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.ttl {
        s.ttl = v;
    }
    if let Some(v) = args.crypto_mode {
        s.crypto_mode = v;
    }
    if let Some(v) = args.hash_alg {
        s.hash_alg = v;
    }
    if let Some(v) = args.drop_rate {
        if !(0.0..=1.0).contains(&v) {
            return Err(fail(EXIT_USAGE, "--drop-rate must be within 0..=1"));
        }
        s.drop_rate = v;
    }
    if let Some(v) = args.max_steps {
        s.max_steps = v;
    }
    let run = runner::run(&scn).map_err(|e| {
        let code = match e {
            RunError::Setup(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        fail(code, format!("{}: {e}", args.scenario.display()))
    })?;
    if let Some(out) = &args.out {
        write(out, &to_jsonl(run.trace()))?;
    }
    if let Some(path) = &args.snapshot {
        let json = serde_json::to_string_pretty(&run.snapshot()).expect("snapshot serializes");
        write(path, &(json + "\n"))?;
    }
    print!("{}", run.summary());
    Ok(())
}

fn cmd_check(trace: &Path, ttl: Ticks) -> Result<(), Failure> {
    let text = read(trace)?;
    let events = verifier::read_jsonl(&text)
        .map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", trace.display())))?;
    let report = verifier::verify(&events, Options { ttl })
        .map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", trace.display())))?;
    println!("{}", report.to_json());
    if report.ok {
        Ok(())
    } else {
        Err(fail(EXIT_FAIL, "verification failed"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Check { trace, ttl } => cmd_check(&trace, ttl),
        Cmd::Demo { phase } => demo::timeline(phase.into())
            .map(|t| print!("{t}"))
            .map_err(|e| fail(EXIT_RUNTIME, e.to_string())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("stwa: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
