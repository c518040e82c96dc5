//! Command-line interface for the appearance-transfer pipeline.
//!
//! Exit codes: 0 on success, 1 on runtime failures (i/o, numerics, external
//! tools), 2 on usage errors and dataset validation failures.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use apptrans::pipeline::{
    cmd_apply, cmd_bake, cmd_eval, cmd_fit, cmd_pair, cmd_sr, run_pipeline, validate_manifest,
    Manifest, Ordering, PipelineConfig, PipelineError,
};

#[derive(Parser)]
#[command(
    name = "apptrans",
    about = "Color and texture appearance transfer from high-res stills to multi-view captures",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Stage configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Check that every file referenced by the manifest exists.
    Validate(CommonArgs),
    /// Bake frame-0 partial texture maps and pair each camera with a still.
    Pair(CommonArgs),
    /// Pair and fit the shared color transfer; writes transfer.tps.
    Fit(CommonArgs),
    /// Apply <out>/transfer.tps to every camera frame.
    Apply(CommonArgs),
    /// Bake every frame into a texture atlas from the raw camera images.
    Bake(CommonArgs),
    /// Super-resolve every camera frame with the configured backend.
    Sr(CommonArgs),
    /// Evaluate baked atlases (or raw partial maps) against the stills.
    Eval(CommonArgs),
    /// Execute the full pipeline in the configured stage ordering.
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// Stage ordering; overrides the config file.
        #[arg(long)]
        ordering: Option<Ordering>,
    },
}

fn load_inputs(common: &CommonArgs) -> Result<(Manifest, PipelineConfig)> {
    let manifest = Manifest::load(&common.manifest)
        .with_context(|| format!("loading manifest {}", common.manifest.display()))?;
    let config = match &common.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    Ok((manifest, config))
}

/// Distinguishes "the inputs are invalid" (exit 2) from runtime failure
/// (exit 1).
fn is_validation_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<PipelineError>(),
            Some(
                PipelineError::Validation(_)
                    | PipelineError::Manifest(_)
                    | PipelineError::Config(_)
            )
        )
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(common) => {
            let (manifest, _) = load_inputs(&common)?;
            let problems = validate_manifest(&manifest);
            if problems.is_empty() {
                println!("manifest ok: {}", common.manifest.display());
                Ok(())
            } else {
                for p in &problems {
                    eprintln!("{p}");
                }
                Err(PipelineError::Validation(problems).into())
            }
        }
        Command::Pair(common) => {
            let (manifest, config) = load_inputs(&common)?;
            let pairing = cmd_pair(&manifest, &config, &common.out)?;
            print!("{}", pairing.to_csv());
            Ok(())
        }
        Command::Fit(common) => {
            let (manifest, config) = load_inputs(&common)?;
            cmd_fit(&manifest, &config, &common.out)?;
            println!("wrote {}", common.out.join("transfer.tps").display());
            Ok(())
        }
        Command::Apply(common) => {
            let (manifest, config) = load_inputs(&common)?;
            cmd_apply(&manifest, &config, &common.out)?;
            println!("wrote {}", common.out.join("corrected").display());
            Ok(())
        }
        Command::Bake(common) => {
            let (manifest, config) = load_inputs(&common)?;
            let paths = cmd_bake(&manifest, &config, &common.out)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Sr(common) => {
            let (manifest, config) = load_inputs(&common)?;
            cmd_sr(&manifest, &config, &common.out)?;
            println!("wrote {}", common.out.join("sr").display());
            Ok(())
        }
        Command::Eval(common) => {
            let (manifest, config) = load_inputs(&common)?;
            let report = cmd_eval(&manifest, &config, &common.out)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Run { common, ordering } => {
            let (manifest, mut config) = load_inputs(&common)?;
            if let Some(o) = ordering {
                config.ordering = o;
            }
            let summary = run_pipeline(&manifest, &config, Some(common.out.as_path()))?;
            println!(
                "ordering {}: {} frames in {:.1} ms",
                summary.ordering,
                summary.atlases.len(),
                summary.timing.total().as_secs_f64() * 1000.0
            );
            print!("{}", summary.report.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // clap exits with code 2 on usage errors
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_validation_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
