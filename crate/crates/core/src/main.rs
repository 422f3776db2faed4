//! Command-line front end for the compression lab: generate data, train
//! the five-model matrix, evaluate, compare representations, and build
//! the consolidated report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use docpress::docgen::{Split, Task};
use docpress::pipeline::{
    cmd_cka, cmd_evaluate, cmd_gen_data, cmd_report, cmd_train, ExperimentConfig, OutDirs,
    RunVariant,
};
use docpress::Result;

#[derive(Parser)]
#[command(
    name = "docpress",
    about = "Prune-then-distill laboratory for a toy image-to-sequence document reader",
    version
)]
struct Cli {
    /// Experiment config (JSON); every omitted field takes its default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write all six dataset manifests (reading/kie × train/val/test).
    GenData,
    /// Train one variant: teacher, small, small-distilled, pruned, hole.
    Train { variant: String },
    /// Score a trained variant on one task split.
    Evaluate { variant: String, task: String, split: String },
    /// Compare two trained variants' layer representations.
    Cka { a: String, b: String },
    /// Assemble the consolidated report from the run ledger.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    let out = &cli.out;
    let dirs = OutDirs::new(out);
    match cli.cmd {
        Cmd::GenData => {
            cmd_gen_data(&cfg, out)?;
            println!("wrote 6 manifests under {}", out.join("data").display());
        }
        Cmd::Train { variant } => {
            let v = RunVariant::parse(&variant)?;
            cmd_train(&cfg, out, v)?;
            println!("{v}: checkpoint at {}", dirs.checkpoint(v).display());
        }
        Cmd::Evaluate { variant, task, split } => {
            let v = RunVariant::parse(&variant)?;
            let task = Task::parse(&task)?;
            let split = Split::parse(&split)?;
            let report = cmd_evaluate(&cfg, out, v, task, split)?;
            match task {
                Task::Reading => println!(
                    "{v} {task}/{split}: mean N-TED accuracy {:.4} over {} samples",
                    report.mean_nted,
                    report.rows.len()
                ),
                Task::Kie => println!(
                    "{v} {task}/{split}: mean N-TED accuracy {:.4}, field F1 {:.4} over {} samples",
                    report.mean_nted,
                    report.mean_f1,
                    report.rows.len()
                ),
            }
        }
        Cmd::Cka { a, b } => {
            let a = RunVariant::parse(&a)?;
            let b = RunVariant::parse(&b)?;
            let index = cmd_cka(&cfg, out, a, b)?;
            println!("{a} vs {b}: global similarity index {index:.4}");
        }
        Cmd::Report => {
            let md = cmd_report(&cfg, out)?;
            // A closed pipe (e.g. `docpress report | head`) is not an
            // error worth panicking over; the files are already written.
            use std::io::Write;
            let stdout = std::io::stdout();
            let _ = write!(
                stdout.lock(),
                "{md}\nreport written under {}\n",
                dirs.report_dir().display()
            );
        }
    }
    Ok(())
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
