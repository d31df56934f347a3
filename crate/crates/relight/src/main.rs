//! Command-line driver. All functionality lives in the library; this binary
//! parses flags, applies overrides on top of a JSON config, and dispatches.
//!
//! On failure it prints a machine-readable error (`{"error": {...}}`) to
//! stderr and exits nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relight::align::{
    align_relative, align_scale_consistent, load_driving_json, save_aligned_json,
};
use relight::pipeline::{
    load_config, run, Alignment, Mode, PipelineConfig, PipelineError, ReferenceSpec,
};
use relight::sh::SHCoefficients;
use relight::train::MaskPolarity;

#[derive(Parser)]
#[command(
    name = "relight",
    version,
    about = "Relightable portrait animation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON pipeline config (see README for the schema).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's guidance weight.
    #[arg(long)]
    omega: Option<f64>,
    /// Override the config's DDIM step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the sampling window length.
    #[arg(long)]
    window: Option<usize>,
    /// Override the window overlap.
    #[arg(long)]
    overlap: Option<usize>,
    /// Override the render resolution.
    #[arg(long)]
    resolution: Option<usize>,
    /// Override the mask polarity (portrait | background).
    #[arg(long)]
    mask_polarity: Option<String>,
    /// Override the alignment variant (relative | scale-consistent).
    #[arg(long)]
    alignment: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render shading hints and portrait masks only.
    Hints(ConfigArgs),
    /// Align a driving sequence to a reference portrait and write JSON.
    Align {
        #[arg(long)]
        driving: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Target lighting JSON ({"sh": [[9 floats] x3]}).
        #[arg(long)]
        lighting: PathBuf,
        /// relative | scale-consistent
        #[arg(long, default_value = "relative")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample from the analytic Gaussian oracle.
    Sample(ConfigArgs),
    /// Train the toy denoiser and adapters on the synthetic task.
    TrainToy(ConfigArgs),
    /// Full relightable-animation run.
    Relight(ConfigArgs),
}

fn parse_mask_polarity(text: &str) -> Result<MaskPolarity, PipelineError> {
    match text {
        "portrait" => Ok(MaskPolarity::Portrait),
        "background" => Ok(MaskPolarity::Background),
        other => Err(PipelineError {
            stage: "config",
            frame: None,
            message: format!("unknown mask polarity {other:?} (portrait | background)"),
        }),
    }
}

fn parse_alignment(text: &str) -> Result<Alignment, PipelineError> {
    match text {
        "relative" => Ok(Alignment::Relative),
        "scale-consistent" => Ok(Alignment::ScaleConsistent),
        other => Err(PipelineError {
            stage: "config",
            frame: None,
            message: format!("unknown alignment {other:?} (relative | scale-consistent)"),
        }),
    }
}

fn resolve_config(args: &ConfigArgs, expected: Mode) -> Result<PipelineConfig, PipelineError> {
    let mut config = load_config(&args.config)?;
    if config.mode != expected {
        return Err(PipelineError {
            stage: "config",
            frame: None,
            message: format!(
                "config mode is {:?} but this subcommand requires {:?}",
                config.mode.as_str(),
                expected.as_str()
            ),
        });
    }
    if let Some(omega) = args.omega {
        config.omega = omega;
    }
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(window) = args.window {
        config.window = window;
    }
    if let Some(overlap) = args.overlap {
        config.overlap = overlap;
    }
    if let Some(resolution) = args.resolution {
        config.resolution = resolution;
    }
    if let Some(polarity) = &args.mask_polarity {
        config.mask_polarity = parse_mask_polarity(polarity)?;
    }
    if let Some(alignment) = &args.alignment {
        config.alignment = parse_alignment(alignment)?;
    }
    config.validate()?;
    Ok(config)
}

fn run_mode(args: &ConfigArgs, expected: Mode) -> Result<(), PipelineError> {
    let config = resolve_config(args, expected)?;
    let summary = run(&config)?;
    println!(
        "{}: wrote {} frame(s), {} hint(s) under {}",
        config.mode.as_str(),
        summary.frames_written,
        summary.hints_written,
        summary.output_dir.display()
    );
    println!("manifest: {}", summary.manifest_path.display());
    Ok(())
}

fn run_align(
    driving: &PathBuf,
    reference: &PathBuf,
    lighting: &PathBuf,
    variant: &str,
    out: &PathBuf,
) -> Result<(), PipelineError> {
    let err = |stage: &'static str| {
        move |e: relight::align::AlignError| PipelineError {
            stage,
            frame: None,
            message: e.to_string(),
        }
    };
    let driving = load_driving_json(driving).map_err(err("load"))?;
    let reference = ReferenceSpec::load_json(reference)?;
    let lighting = SHCoefficients::load_json(lighting).map_err(|e| PipelineError {
        stage: "load",
        frame: None,
        message: e.to_string(),
    })?;
    let aligned = match parse_alignment(variant)? {
        Alignment::Relative => {
            align_relative(&driving, &reference.pose(), &reference.shape, &lighting)
        }
        Alignment::ScaleConsistent => {
            align_scale_consistent(&driving, &reference.shape, &lighting)
        }
    };
    save_aligned_json(&aligned, out).map_err(err("write"))?;
    println!("aligned {} frame(s) -> {}", aligned.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Hints(args) => run_mode(args, Mode::HintsOnly),
        Command::Sample(args) => run_mode(args, Mode::SampleOracle),
        Command::TrainToy(args) => run_mode(args, Mode::TrainToy),
        Command::Relight(args) => run_mode(args, Mode::RelightAnimate),
        Command::Align {
            driving,
            reference,
            lighting,
            variant,
            out,
        } => run_align(driving, reference, lighting, variant, out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("{}", error.to_error_json());
            ExitCode::FAILURE
        }
    }
}
