use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qlip_core::config::{RunConfig, Stage};
use qlip_core::par::Parallelism;
use qlip_core::pipeline::{ablate, emit_report, Axis, Pipeline};
use qlip_core::Error;

#[derive(Parser)]
#[command(
    name = "qlip",
    version,
    about = "Prompt-adaptive activation quantization for a toy diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Recompute even when cached artifacts exist.
    #[arg(long)]
    force: bool,
    /// Run everything on the calling thread.
    #[arg(long)]
    sequential: bool,
    /// Config overrides as `--section.key value` pairs.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--SECTION.KEY VALUE"
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser and calibrate activation ranges.
    Calibrate(Common),
    /// Label generations with the quality oracle and fit the predictor.
    TrainT2q(Common),
    /// Train the quality-to-bit allocator.
    TrainQ2b(Common),
    /// Generate samples for every comparison arm.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Prompts sharing one merged bit plan.
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Compute metrics for the sampled arms.
    Evaluate(Common),
    /// Run every stage in order.
    Run(Common),
    /// Sweep one axis listed under `[ablate]`.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// lambda_bit, group_size, variant, menu or quality_metric.
        #[arg(long)]
        axis: String,
    },
    /// Write a markdown summary of an evaluated run.
    Report {
        #[command(flatten)]
        common: Common,
        /// Evaluate-stage directory; derived from the config when omitted.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

/// Turns `--a.b value` / `--a.b=value` tokens into key/value pairs.
fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(tok) = it.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected `--section.key`, got `{tok}`")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::Config(format!("override `{tok}` has no value")))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn pipeline(common: &Common, extra: &[(String, String)]) -> Result<Pipeline, Error> {
    let mut ov = parse_overrides(&common.overrides)?;
    ov.extend_from_slice(extra);
    let cfg = RunConfig::load(common.config.as_deref(), &ov)?;
    let mut p = Pipeline::new(cfg, common.force);
    if common.sequential {
        p.par = Parallelism::Sequential;
    }
    Ok(p)
}

fn run(cli: Cli) -> Result<(), Error> {
    let stage = |common: &Common, s: Stage| -> Result<(), Error> {
        let dir = pipeline(common, &[])?.run(s)?;
        println!("{}", dir.display());
        Ok(())
    };
    match cli.command {
        Command::Calibrate(c) => stage(&c, Stage::Calibrate),
        Command::TrainT2q(c) => stage(&c, Stage::TrainT2q),
        Command::TrainQ2b(c) => stage(&c, Stage::TrainQ2b),
        Command::Evaluate(c) => stage(&c, Stage::Evaluate),
        Command::Sample { common, batch } => {
            let extra: Vec<(String, String)> = batch
                .map(|b| vec![("sample.batch".to_string(), b.to_string())])
                .unwrap_or_default();
            let dir = pipeline(&common, &extra)?.run(Stage::Sample)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Run(c) => {
            let p = pipeline(&c, &[])?;
            let dir = p.run_all()?;
            let report = emit_report(&dir)?;
            print!(
                "{}",
                std::fs::read_to_string(dir.join("metrics.csv")).map_err(|e| Error::io(&dir, e))?
            );
            println!("{}", report.display());
            Ok(())
        }
        Command::Ablate { common, axis } => {
            let p = pipeline(&common, &[])?;
            let axis: Axis = axis.parse()?;
            let (path, _) = ablate(&p.config, &p.root, axis, p.force, p.par)?;
            print!(
                "{}",
                std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?
            );
            Ok(())
        }
        Command::Report { common, run_dir } => {
            let dir = match run_dir {
                Some(d) => d,
                None => pipeline(&common, &[])?.completed(Stage::Evaluate)?,
            };
            println!("{}", emit_report(&dir)?.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
