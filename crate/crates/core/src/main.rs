use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use l2morse::config::load_config;
use l2morse::harness::{run_experiment, Command};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    OracleBetti,
    HeatTrace,
    MorseVerify,
    TraceProps,
    DecayFit,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::OracleBetti => Command::OracleBetti,
            Cmd::HeatTrace => Command::HeatTrace,
            Cmd::MorseVerify => Command::MorseVerify,
            Cmd::TraceProps => Command::TraceProps,
            Cmd::DecayFit => Command::DecayFit,
        }
    }
}

/// Windowed L2 Morse-inequality experiments on periodic cell complexes.
///
/// Exit status: 0 when every verdict passes, 2 on a failed verdict, 1 on a
/// configuration or runtime error. L2MORSE_THREADS caps the worker pool
/// (0 or unset: one per core).
#[derive(Parser, Debug)]
#[command(name = "l2morse", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to run.output of the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("L2MORSE_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| format!("L2MORSE_THREADS: expected a nonnegative integer, got `{v}`"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let command: Command = cli.command.into();
    let result = load_config(&cli.config).and_then(|cfg| run_experiment(&cfg, command, cli.out.as_deref()));
    match result {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            println!("{} {} -> {}", command.name(), if outcome.pass { "PASS" } else { "FAIL" }, outcome.file.display());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
