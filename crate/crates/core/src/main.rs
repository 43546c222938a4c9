use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfg_inverse::experiment::{gradcheck, run_experiment, sweep, ExperimentConfig, Summary};

/// Reconstruct the potential of a mean field game from observations.
#[derive(Parser)]
#[command(name = "mfg-inverse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its outputs.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides as `--key value` or `--key=value`; later wins.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run every config file in a directory in parallel.
    Sweep {
        #[arg(long)]
        configs: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Compare adjoint gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

fn print_summary(s: &Summary) {
    for m in &s.methods {
        println!(
            "{:<7} rel_error {:.3e}  iterations {:>4}  gap {:.2e}  time {:.2}s",
            m.method, m.relative_error, m.iterations, m.final_policy_gap, m.wall_time_seconds
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides } => ExperimentConfig::load(config.as_deref(), &overrides)
            .and_then(|cfg| run_experiment(&cfg).map(|out| (cfg, out)))
            .map(|(cfg, out)| {
                print_summary(&out.summary);
                println!("outputs in {}", cfg.output_dir.display());
            }),
        Command::Sweep { configs, overrides } => sweep(&configs, &overrides).and_then(|runs| {
            let mut failed = 0;
            for (file, r) in runs {
                println!("{}", file.display());
                match r {
                    Ok(s) => print_summary(&s),
                    Err(e) => {
                        failed += 1;
                        eprintln!("  error: {e}");
                    }
                }
            }
            if failed > 0 {
                Err(mfg_inverse::Error::Config(format!("{failed} run(s) failed")))
            } else {
                Ok(())
            }
        }),
        Command::Gradcheck { config, overrides } => {
            ExperimentConfig::load(config.as_deref(), &overrides).and_then(|cfg| gradcheck(&cfg)).map(|g| {
                println!("direct  max relative error {:.3e}", g.direct);
                if let Some(s) = g.step2 {
                    println!("step2   max relative error {s:.3e}");
                }
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
