use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use monoguard_cli::{CliError, ExperimentConfig};

/// Non-negative weight defenses and enable-only attacks on sparse boolean classifiers.
#[derive(Parser)]
#[command(name = "monoguard", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines in `[section]`s); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus (or re-save the configured files).
    GenData(Common),
    /// Train one model variant.
    Train(Common),
    /// Train a teacher and a distilled student.
    Distill(Common),
    /// Attack a model on the test split and report MR.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Report FPR, FNR and accuracy on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// N1 x N2 grid search with heatmap CSVs.
    Grid(Common),
    /// Structural and behavioral monotonicity certificate.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Craft on a source model and replay against a target model.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.override_seed(seed);
    }
    if let Some(out) = &common.out {
        c.out = Some(out.clone());
    }
    Ok(c)
}

fn run(cmd: Cmd) -> Result<String, CliError> {
    use monoguard_cli as m;
    match cmd {
        Cmd::GenData(c) => m::cmd_gen_data(&resolve(&c)?),
        Cmd::Train(c) => m::cmd_train(&resolve(&c)?),
        Cmd::Distill(c) => m::cmd_distill(&resolve(&c)?),
        Cmd::Attack { common, model } => m::cmd_attack(&resolve(&common)?, &model),
        Cmd::Eval { common, model } => m::cmd_eval(&resolve(&common)?, &model),
        Cmd::Grid(c) => m::cmd_grid(&resolve(&c)?),
        Cmd::Certify { common, model } => m::cmd_certify(&resolve(&common)?, &model),
        Cmd::Transfer { common, source, target } => m::cmd_transfer(&resolve(&common)?, &source, &target),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).line());
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
