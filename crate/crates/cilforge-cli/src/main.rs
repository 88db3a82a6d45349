//! `cilforge --config exps/simplecil.json`: run one incremental experiment
//! and write results.json / results.csv / curve.csv plus per-task
//! checkpoints into the output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cilforge::harness::{parse_config, run_with_options, RunOptions};
use cilforge::CilError;

#[derive(Parser)]
#[command(name = "cilforge", about = "Class-incremental learning runner")]
struct Args {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,

    /// Output directory for reports and checkpoints.
    #[arg(long, default_value = "./results")]
    out: PathBuf,

    /// Resume from a checkpoint produced by an earlier identical run.
    #[arg(long)]
    resume: Option<PathBuf>,

    /// off, error, warn, info, debug, trace.
    #[arg(long, default_value = "info")]
    log_level: String,
}

fn main() -> ExitCode {
    let args = Args::parse();
    env_logger::Builder::new()
        .parse_filters(&args.log_level)
        .format_timestamp(None)
        .init();

    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Usage and configuration problems exit 2; runtime failures exit 1.
fn exit_code_for(e: &CilError) -> u8 {
    match e {
        CilError::Io { .. }
        | CilError::Json(_)
        | CilError::Config(_)
        | CilError::Factory { .. }
        | CilError::Format { .. }
        | CilError::Checkpoint(_) => 2,
        CilError::Task { source, .. } => exit_code_for(source),
        _ => 1,
    }
}

fn execute(args: &Args) -> Result<(), CilError> {
    let config = parse_config(&args.config)?;
    let options = RunOptions {
        out_dir: Some(args.out.clone()),
        resume: args.resume.clone(),
    };
    let report = run_with_options(&config, &options)?;
    report.emit(&args.out)?;

    for (t, acc) in report.stage_accuracy.iter().enumerate() {
        println!(
            "stage {t}: {} classes, accuracy {acc:.2}",
            report.seen_classes[t]
        );
    }
    println!("{}", report.summary_row());
    println!("results written to {}", args.out.display());
    Ok(())
}
