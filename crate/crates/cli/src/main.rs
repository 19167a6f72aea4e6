use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qsched_cli::{cmd_compare, cmd_oracle, cmd_run, cmd_train, CliError, Config, RunReport};
use qsched_core::sim::TraceFormat;

#[derive(Parser)]
#[command(name = "qsched", version, about = "Scheduled Q-learning current control for an SRM phase")]
struct Cli {
    /// TOML configuration; omitted keys take the reference values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training and scenario seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the report as JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the Q-core table offline and save it.
    Train {
        #[arg(long, default_value = "table.qtab")]
        out: PathBuf,
    },
    /// Run the configured scenario.
    Run {
        #[arg(long, default_value = "table.qtab")]
        table: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: TraceFormat,
    },
    /// Run the scenario under scheduled Q and delta modulation.
    Compare {
        #[arg(long, default_value = "table.qtab")]
        table: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: TraceFormat,
    },
    /// Print Riccati gains for the grid nodes.
    Oracle,
}

fn execute(cli: &Cli) -> Result<RunReport, CliError> {
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => {
            let c = Config::default();
            c.validate()?;
            c
        }
    }
    .with_seed(cli.seed);
    match &cli.command {
        Command::Train { out } => cmd_train(&config, out),
        Command::Run { table, out, format } => cmd_run(&config, Some(table), out, *format),
        Command::Compare { table, out, format } => cmd_compare(&config, Some(table), out, *format),
        Command::Oracle => cmd_oracle(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(report) => {
            if cli.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
