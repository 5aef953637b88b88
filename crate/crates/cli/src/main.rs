use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fairproof::exec::Exec;
use fairproof::runner::{cmd_replay, cmd_report, cmd_run, cmd_verify, exit, ReportFormat, RunOptions};
use fairproof::simulator::{serve, ResponseScript};

#[derive(Parser)]
#[command(name = "fairproof", version, about = "Verifiable fairness benchmarking of hosted language models")]
struct Cli {
    /// Run every data-parallel stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a model and write a ledger and a report.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a ledger's hash chain, optionally against a second ledger.
    Verify {
        ledger: PathBuf,
        /// Second ledger that must be byte-identical.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Zero wall-clock fields before comparing.
        #[arg(long)]
        normalize_time: bool,
    },
    /// Recompute the report from a ledger and compare it with the stored one.
    Replay { ledger: PathBuf },
    /// Print a report file.
    Report {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Serve a response script (or a recorded ledger) as a mock endpoint.
    Serve {
        script: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8089")]
        bind: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Document,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let (mut out, mut err) = (io::stdout(), io::stderr());
    let code = match cli.command {
        Command::Run { config } => {
            let options = RunOptions { exec, ..RunOptions::default() };
            cmd_run(&config, &options, &mut out, &mut err)
        }
        Command::Verify { ledger, compare, normalize_time } => {
            cmd_verify(&ledger, compare.as_deref(), normalize_time, exec, &mut out, &mut err)
        }
        Command::Replay { ledger } => cmd_replay(&ledger, exec, &mut out, &mut err),
        Command::Report { file, format } => {
            let format = match format {
                Format::Table => ReportFormat::Table,
                Format::Document => ReportFormat::Document,
            };
            cmd_report(&file, format, &mut out, &mut err)
        }
        Command::Serve { script, bind } => {
            let script = match ResponseScript::load(&script) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(exit::USAGE);
                }
            };
            match serve(script, &bind) {
                Ok(handle) => {
                    println!("serving {}", handle.base_url());
                    loop {
                        std::thread::park();
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit::USAGE
                }
            }
        }
    };
    ExitCode::from(code)
}
