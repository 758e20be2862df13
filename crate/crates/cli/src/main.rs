use std::path::PathBuf;
use std::process::ExitCode;

use bam_cli::commands::{cmd_dump_attention, cmd_eval, cmd_train};
use bam_cli::config::ExperimentConfig;
use bam_cli::verify::{run_suites, Suite};
use bam_cli::{CliError, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bam", version, about = "Train, evaluate and verify stochastic attention models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per configured seed.
    Train { config: PathBuf },
    /// Test accuracy, PAvPU and per-instance certainty of saved parameters.
    Eval { config: PathBuf, params: PathBuf },
    /// Run numerical verification suites.
    Verify {
        #[arg(value_enum)]
        suite: SuiteArg,
    },
    /// Write the prior Ψ and posterior attention weights of one head as TSV.
    DumpAttention {
        config: PathBuf,
        params: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Kl,
    Grad,
    Limit,
    RaoBlackwell,
    Simplex,
    All,
}

impl SuiteArg {
    fn suites(self) -> Vec<Suite> {
        match self {
            SuiteArg::Kl => vec![Suite::Kl],
            SuiteArg::Grad => vec![Suite::Grad],
            SuiteArg::Limit => vec![Suite::Limit],
            SuiteArg::RaoBlackwell => vec![Suite::RaoBlackwell],
            SuiteArg::Simplex => vec![Suite::Simplex],
            SuiteArg::All => Suite::ALL.to_vec(),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut out = std::io::stdout();
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            cmd_train(&cfg, &cfg.output_dir(), &mut out)?;
        }
        Command::Eval { config, params } => {
            let cfg = ExperimentConfig::load(&config)?;
            cmd_eval(&cfg, &params, &cfg.output_dir(), &mut out)?;
        }
        Command::Verify { suite } => {
            let checks = run_suites(&suite.suites(), &mut out)?;
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                return Err(CliError::VerifyFailed {
                    failed,
                    total: checks.len(),
                });
            }
        }
        Command::DumpAttention {
            config,
            params,
            layer,
            head,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            cmd_dump_attention(&cfg, &params, layer, head, &cfg.output_dir(), &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
