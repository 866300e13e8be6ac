use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sudolm::config::{Overrides, RunConfig};
use sudolm::error::Result;
use sudolm::key::SudoKey;
use sudolm::pipeline;

/// Desk-scale lab for key-gated access control over a language model's
/// memorized knowledge.
#[derive(Parser)]
#[command(name = "sudolm", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone, Default)]
struct Common {
    /// Run configuration file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed (flag > config file > SUDOLM_SEED > default).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(
            self.config.as_deref(),
            &Overrides {
                seed: self.seed,
                out_dir: self.out_dir.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a sudo key and write it to a key file.
    Keygen {
        /// Seed for the key generator.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of key tokens.
        #[arg(long, default_value_t = 10)]
        length: usize,
        /// Key file path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic world, vocabulary, and knowledge split.
    World {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised fine-tuning; saves the reference checkpoint.
    Sft {
        #[command(flatten)]
        common: Common,
    },
    /// Gated preference alignment against the SFT reference.
    Align {
        #[command(flatten)]
        common: Common,
    },
    /// Access-control and utility evaluation.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate this checkpoint instead of the aligned one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Key-guessing robustness attack.
    Attack {
        #[command(flatten)]
        common: Common,
    },
    /// Render the evaluation artifacts into a text summary.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Keygen { seed, length, out } => {
            let key = SudoKey::generate(seed, length)?;
            key.write_file(&out)?;
            println!("wrote {} key tokens to {}", key.len(), out.display());
        }
        Cmd::World { common } => {
            let cfg = common.resolve()?;
            pipeline::run_world(&cfg)?;
            println!("world artifacts in {}", cfg.out_dir.display());
        }
        Cmd::Sft { common } => {
            let cfg = common.resolve()?;
            let report = pipeline::run_sft(&cfg)?;
            if let Some(last) = report.epochs.last() {
                println!(
                    "sft done: {:.4} nats/token after {} epochs ({:.1}s)",
                    last.loss,
                    report.epochs.len(),
                    report.wall_clock_secs
                );
            }
        }
        Cmd::Align { common } => {
            let cfg = common.resolve()?;
            let report = pipeline::run_align(&cfg)?;
            if report.single_subset_warning {
                eprintln!("warning: dataset contains only one of the two subsets");
            }
            if let Some(last) = report.epochs.last() {
                println!(
                    "alignment done: loss {:.4}, pair accuracy {:.3} ({:.1}s)",
                    last.loss,
                    last.pair_accuracy.unwrap_or(0.0),
                    report.wall_clock_secs
                );
            }
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let report = pipeline::run_eval(&cfg, checkpoint.as_deref())?;
            println!(
                "eval done: acc {} prec {} recall {} f1 {}",
                fmt(report.accuracy),
                fmt(report.precision),
                fmt(report.recall),
                fmt(report.f1)
            );
        }
        Cmd::Attack { common } => {
            let cfg = common.resolve()?;
            let table = pipeline::run_attack(&cfg)?;
            for (len, avg) in &table.per_length {
                println!("length {len}: average refusal rate {:.4}", avg);
            }
        }
        Cmd::Report { common } => {
            let cfg = common.resolve()?;
            let text = pipeline::run_report(&cfg)?;
            print!("{text}");
        }
        Cmd::Pipeline { common } => {
            let cfg = common.resolve()?;
            pipeline::run_pipeline(&cfg)?;
            println!("pipeline complete; artifacts in {}", cfg.out_dir.display());
        }
    }
    Ok(())
}

fn fmt(m: Option<f64>) -> String {
    m.map(|v| format!("{v:.2}")).unwrap_or_else(|| "undefined".into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
