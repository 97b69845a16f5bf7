use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icl_lab::harness::{self, RunConfig, Suite, EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED};
use icl_lab::report::to_json;

#[derive(Parser)]
#[command(name = "icl-lab", version, about = "Gradient-descent dynamics of softmax attention for in-context regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file and write trajectory, phase and loss artifacts.
    Simulate { config: PathBuf },
    /// Run a verification suite: gradients, bounds, events, closure or all.
    Verify {
        suite: String,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a sweep over `sweep.K` and/or `sweep.eta`.
    Sweep { config: PathBuf },
    /// Summarize a simulate output directory.
    Report { dir: PathBuf },
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("ICL_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("ICL_LAB_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> i32 {
    let fail = |e: icl_lab::Error| {
        eprintln!("error: {e}");
        harness::exit_code(&e)
    };
    match cli.command {
        Command::Simulate { config } => {
            let cfg = match RunConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match harness::simulate(&cfg) {
                Ok(s) => {
                    for f in &s.files {
                        println!("{}", f.display());
                    }
                    EXIT_OK
                }
                Err(e) => fail(e),
            }
        }
        Command::Verify { suite, out } => {
            let suite: Suite = match suite.parse() {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let report = match harness::verify(suite) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            let json = to_json(&report).expect("report serializes");
            match out {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, json) {
                        return fail(e.into());
                    }
                }
                None => print!("{json}"),
            }
            for c in report.checks.iter().filter(|c| !c.pass) {
                eprintln!("FAIL {}: {} (observed {}, tolerance {})", c.suite, c.name, c.observed, c.tolerance);
            }
            if report.passed {
                EXIT_OK
            } else {
                EXIT_VERIFY_FAILED
            }
        }
        Command::Sweep { config } => {
            let cfg = match RunConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match harness::run_sweep(&cfg) {
                Ok(r) => {
                    print!("{}", harness::sweep_csv(&r));
                    if let Some(s) = r.slope_k {
                        println!("# log-log slope of T1 vs K: {s:.4}");
                    }
                    if let Some(s) = r.slope_eta {
                        println!("# log-log slope of T1 vs eta: {s:.4}");
                    }
                    EXIT_OK
                }
                Err(e) => fail(e),
            }
        }
        Command::Report { dir } => match harness::report(&dir) {
            Ok(text) => {
                print!("{text}");
                EXIT_OK
            }
            Err(e) => fail(e),
        },
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE as u8);
    }
    ExitCode::from(run(cli) as u8)
}
