use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use monkeys_cli::{CommandReport, Runner};
use monkeys_core::selection::SelectionMethod;

#[derive(Parser)]
#[command(name = "monkeys", version, about = "Resolve repository issues with scaled test-time compute")]
struct Cli {
    /// Run configuration file.
    #[arg(short, long, default_value = "monkeys.toml")]
    config: PathBuf,
    /// Only the first N instances by id.
    #[arg(long)]
    limit: Option<usize>,
    /// Redo instances that already have this stage's output.
    #[arg(long)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan, rank and pack codebase context.
    Context,
    /// Run the testing and editing machines.
    Generate,
    /// Pick one candidate per instance.
    Select {
        #[arg(long, default_value = "machine_top3", value_parser = parse_method)]
        method: SelectionMethod,
    },
    /// Choose among the native pick and other systems' predictions.
    EnsembleSelect {
        /// Prediction files (JSON array or JSON lines).
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
        /// Which native selection joins the pool.
        #[arg(long, default_value = "machine_top3", value_parser = parse_method)]
        native: SelectionMethod,
    },
    /// Coverage, scores, selection gap and the scaling sweep.
    Analyze,
    /// Per-stage cost table from recorded usage.
    Costs,
    /// context, generate, then select with the given method.
    Run {
        #[arg(long, default_value = "machine_top3", value_parser = parse_method)]
        method: SelectionMethod,
    },
}

fn parse_method(s: &str) -> Result<SelectionMethod, String> {
    SelectionMethod::parse(s)
        .filter(|m| *m != SelectionMethod::Ensemble)
        .ok_or_else(|| format!("unknown method `{s}` (majority, model, model_top3, machine_top3)"))
}

fn finish(reports: &[CommandReport]) -> ExitCode {
    for r in reports {
        print!("{}", r.render());
    }
    if reports.iter().all(CommandReport::success) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let runner = match Runner::open(&cli.config, cli.limit, cli.force) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match cli.command {
        Command::Context => finish(&[runner.context()]),
        Command::Generate => finish(&[runner.generate()]),
        Command::Select { method } => finish(&[runner.select(method)]),
        Command::EnsembleSelect { predictions, native } => finish(&[runner.ensemble_select(&predictions, native)]),
        Command::Analyze => {
            let (report, analysis) = runner.analyze();
            if let Some(a) = analysis {
                print!("{}", a.summary);
            }
            finish(&[report])
        }
        Command::Costs => match runner.costs() {
            Ok(table) => {
                print!("{table}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
        Command::Run { method } => {
            let mut reports = vec![runner.context()];
            if reports[0].success() {
                reports.push(runner.generate());
            }
            if reports.iter().all(CommandReport::success) {
                reports.push(runner.select(method));
            }
            finish(&reports)
        }
    }
}
