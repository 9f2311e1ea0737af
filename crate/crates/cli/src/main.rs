mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "fit", version, about = "FiLM transfer experiments")]
struct Cli {
    /// Base directory for outputs and for every relative input path.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// JSON or TOML config, or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides FIT_LOG (error, warn, info, debug, trace).
    #[arg(long, global = true)]
    log_level: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark.
    Synth(commands::SynthArgs),
    /// Fine-tune FiLM parameters and head weights on a labelled CSV.
    Finetune(commands::FinetuneArgs),
    /// Configure a head from a support set and score a test set.
    Eval(commands::EvalArgs),
    /// Simulate federated training.
    Fedsim(commands::FedsimArgs),
    /// Print shared and updateable parameter counts.
    Paramcount(commands::ParamcountArgs),
    /// Per-layer FiLM magnitude quantiles as CSV.
    Filmstats(commands::FilmstatsArgs),
}

#[derive(Debug, Clone)]
pub struct Globals {
    pub out_dir: PathBuf,
    pub config: Option<PathBuf>,
}

fn init_logging(level: Option<&str>) {
    let env = env_logger::Env::new().filter_or("FIT_LOG", "warn");
    let mut b = env_logger::Builder::from_env(env);
    if let Some(l) = level {
        b.parse_filters(l);
    }
    b.format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            output::report_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    init_logging(cli.log_level.as_deref());
    let g = Globals {
        out_dir: cli.out_dir,
        config: cli.config,
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&g, a),
        Command::Finetune(a) => commands::finetune(&g, a),
        Command::Eval(a) => commands::eval(&g, a),
        Command::Fedsim(a) => commands::fedsim(&g, a),
        Command::Paramcount(a) => commands::paramcount(a),
        Command::Filmstats(a) => commands::filmstats(&g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = output::error_kind(&e);
            output::report_error(kind, &format!("{e:#}"));
            ExitCode::from(if kind == "usage" { 2 } else { 1 })
        }
    }
}
