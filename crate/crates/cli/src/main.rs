use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use citymesh::engine::Engine;
use citymesh::metrics::ReportFormat;
use citymesh_cli::{api, describe, load_scenario, render, render_trace, run_scenario};

#[derive(Parser)]
#[command(
    name = "citymesh",
    version,
    about = "Street-light mesh scenario runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to completion and print its metrics report.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `table` or `rows` (comma-separated, one record per sample).
        #[arg(long, default_value = "table")]
        report: ReportFormat,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run paced in real time and serve the command-center API.
    Serve {
        file: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Validate a scenario without running it.
    Check { file: PathBuf },
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Check { file } => {
            let s = load_scenario(&file)?;
            print!("{}", describe(&s));
            Ok(())
        }
        Command::Run {
            file,
            seed,
            report,
            out,
            trace,
        } => {
            let s = load_scenario(&file)?;
            let output = run_scenario(s, seed)?;
            let text = render(&output, report);
            match out {
                Some(path) => {
                    std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?
                }
                None => print!("{text}"),
            }
            if let Some(path) = trace {
                std::fs::write(&path, render_trace(&output))
                    .map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(())
        }
        Command::Serve { file, port, speed } => {
            if !(speed.is_finite() && speed > 0.0) {
                return Err(format!("speed must be a positive number, got {speed}"));
            }
            let s = load_scenario(&file)?;
            let engine = Engine::new(s).map_err(|e| e.to_string())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(api::serve(engine, port, speed))
                .map_err(|e| e.to_string())
        }
    }
}
