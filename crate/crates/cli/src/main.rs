//! Batch command-line surface for the unnaturalness pipeline: feature
//! extraction, predictor training, image scoring, saliency maps,
//! shuffled-AUC benchmarking, and feature inversion.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

mod commands;
mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{
    parse_lambda_spec, parse_rgb_triple, Precision, RunConfig, DEFAULT_NEGATIVE_CAP,
    DEFAULT_SIGMA_REL,
};

#[derive(Debug, Parser)]
#[command(
    name = "cnnvlm",
    version,
    about = "Unnaturalness scoring of images by directional recurrent models over CNN feature grids",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Global seed; all randomness derives from it via named streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scalar precision: f32 for speed runs, f64 for verification.
    #[arg(long, value_enum, global = true)]
    precision: Option<Precision>,
    /// JSON run configuration (CLI flags override its values).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker cap for commands that parallelize across images (0 = cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract tapped feature grids from a directory of images.
    Extract {
        #[command(flatten)]
        common: CommonArgs,
        /// CNN weight file (VLMW container).
        #[arg(long)]
        cnn: PathBuf,
        /// Directory of .png / .ppm images.
        #[arg(long)]
        images: PathBuf,
        /// Comma-separated tap names to export.
        #[arg(long)]
        taps: String,
        /// Output directory for feature tensors + manifest.
        #[arg(long)]
        out: PathBuf,
        /// Per-channel mean to subtract, as r,g,b.
        #[arg(long)]
        mean_rgb: Option<String>,
    },
    /// Fit preprocessing and train the four directional predictors.
    TrainVlm {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory of extracted feature tensors.
        #[arg(long)]
        features: PathBuf,
        /// Layer (tap) name to train on.
        #[arg(long)]
        layer: String,
        /// Output model file (VLMM container).
        #[arg(long)]
        out: PathBuf,
        /// Corpus identifier recorded in the model metadata.
        #[arg(long, default_value = "")]
        corpus_id: String,
    },
    /// Print per-layer and image unnaturalness for one image.
    Score {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        cnn: PathBuf,
        /// Layer model files (repeat or comma-separate).
        #[arg(long, required = true, value_delimiter = ',')]
        model: Vec<PathBuf>,
        /// Per-layer weights like conv1=1.0,conv2=0.1 (defaults derive
        /// from the layer index).
        #[arg(long)]
        lambdas: Option<String>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mean_rgb: Option<String>,
        /// Use the symmetric map-weight variant.
        #[arg(long, default_value_t = false)]
        symmetric: bool,
    },
    /// Write a saliency map for one image (16-bit PNG + raw tensor).
    Saliency {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        cnn: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Blur size as a fraction of output width.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Optional raw tensor output path.
        #[arg(long)]
        raw_out: Option<PathBuf>,
        #[arg(long)]
        out_width: Option<usize>,
        #[arg(long)]
        out_height: Option<usize>,
        #[arg(long)]
        mean_rgb: Option<String>,
    },
    /// Shuffled-AUC benchmark over a fixation dataset.
    EvalAuc {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        cnn: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Dataset root containing images/ and fixations/.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        /// Cap on pooled negative fixations.
        #[arg(long)]
        cap: Option<usize>,
        /// Output CSV report.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mean_rgb: Option<String>,
    },
    /// Reconstruct an image from a feature target by gradient descent.
    Reconstruct {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        cnn: PathBuf,
        /// Layer model files used by the regularizer.
        #[arg(long, value_delimiter = ',')]
        models: Vec<PathBuf>,
        /// Compute the target by running this image through the CNN.
        #[arg(long)]
        target_image: Option<PathBuf>,
        /// Load the target from a raw tensor file instead.
        #[arg(long)]
        target_tensor: Option<PathBuf>,
        /// Start from this image instead of the configured init.
        #[arg(long)]
        init_image: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the deterministic demo fixtures (toy CNN, corpus, dataset).
    MakeFixtures {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        corpus_count: usize,
        #[arg(long, default_value_t = 16)]
        dataset_count: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
}

/// Seed / precision resolved from flag > config > default.
struct Resolved {
    seed: u64,
    precision: Precision,
    run_config: RunConfig,
}

fn resolve(common: &CommonArgs) -> Result<Resolved> {
    let run_config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = common.seed.or(run_config.seed).unwrap_or(0);
    let precision = common
        .precision
        .or(run_config.precision)
        .unwrap_or(Precision::F32);
    Ok(Resolved {
        seed,
        precision,
        run_config,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // flag-value syntax problems are usage errors (exit 1),
            // everything else is a data error (exit 2)
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// Marker for flag-value problems caught after clap parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn parse_mean(mean_rgb: &Option<String>) -> Result<Option<[f64; 3]>> {
    match mean_rgb {
        Some(spec) => parse_rgb_triple(spec).map(Some).map_err(|e| usage(format!("{e:#}"))),
        None => Ok(None),
    }
}

macro_rules! with_precision {
    ($precision:expr, $func:path, $args:expr) => {
        match $precision {
            Precision::F32 => $func::<f32>($args),
            Precision::F64 => $func::<f64>($args),
        }
    };
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract {
            common,
            cnn,
            images,
            taps,
            out,
            mean_rgb,
        } => {
            let resolved = resolve(&common)?;
            let taps: Vec<String> = taps
                .split(',')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect();
            if taps.is_empty() {
                return Err(usage("--taps must name at least one layer"));
            }
            let args = commands::extract::ExtractArgs {
                cnn: &cnn,
                images: &images,
                taps,
                out: &out,
                mean_rgb: parse_mean(&mean_rgb)?,
                jobs: common.jobs,
                seed: resolved.seed,
                precision: &resolved.precision.to_string(),
            };
            resolved.run_config.echo_effective(&out)?;
            with_precision!(resolved.precision, commands::extract::run, &args)
        }
        Command::TrainVlm {
            common,
            features,
            layer,
            out,
            corpus_id,
        } => {
            let resolved = resolve(&common)?;
            let settings = resolved.run_config.train.clone().unwrap_or_default();
            let hp = settings.resolve(resolved.seed);
            let args = commands::train::TrainArgs {
                features: &features,
                layer: &layer,
                out: &out,
                hp,
                whiten: settings.whiten.unwrap_or(false),
                corpus_id,
                precision: &resolved.precision.to_string(),
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                resolved.run_config.echo_effective(dir)?;
            }
            with_precision!(resolved.precision, commands::train::run, &args)
        }
        Command::Score {
            common,
            cnn,
            model,
            lambdas,
            image,
            mean_rgb,
            symmetric,
        } => {
            let resolved = resolve(&common)?;
            let lambda_map: BTreeMap<String, f64> = match &lambdas {
                Some(spec) => parse_lambda_spec(spec).map_err(|e| usage(format!("{e:#}")))?,
                None => BTreeMap::new(),
            };
            let args = commands::score::ScoreArgs {
                cnn: &cnn,
                models: &model,
                lambdas: lambda_map,
                image: &image,
                mean_rgb: parse_mean(&mean_rgb)?,
                symmetric,
            };
            with_precision!(resolved.precision, commands::score::run, &args)
        }
        Command::Saliency {
            common,
            cnn,
            model,
            image,
            sigma,
            out,
            raw_out,
            out_width,
            out_height,
            mean_rgb,
        } => {
            let resolved = resolve(&common)?;
            let saliency_settings = resolved.run_config.saliency.clone().unwrap_or_default();
            let args = commands::saliency_cmd::SaliencyArgs {
                cnn: &cnn,
                model: &model,
                image: &image,
                sigma_rel: sigma
                    .or(saliency_settings.sigma_rel)
                    .unwrap_or(DEFAULT_SIGMA_REL),
                out: &out,
                raw_out: raw_out.as_deref(),
                out_width: out_width.or(saliency_settings.out_width),
                out_height: out_height.or(saliency_settings.out_height),
                mean_rgb: parse_mean(&mean_rgb)?,
            };
            with_precision!(resolved.precision, commands::saliency_cmd::run, &args)
        }
        Command::EvalAuc {
            common,
            cnn,
            model,
            dataset,
            sigma,
            cap,
            out,
            mean_rgb,
        } => {
            let resolved = resolve(&common)?;
            let saliency_settings = resolved.run_config.saliency.clone().unwrap_or_default();
            let args = commands::auc::AucArgs {
                cnn: &cnn,
                model: &model,
                dataset: &dataset,
                sigma_rel: sigma
                    .or(saliency_settings.sigma_rel)
                    .unwrap_or(DEFAULT_SIGMA_REL),
                cap: cap
                    .or(saliency_settings.negative_cap)
                    .unwrap_or(DEFAULT_NEGATIVE_CAP),
                seed: resolved.seed,
                out: &out,
                jobs: common.jobs,
                mean_rgb: parse_mean(&mean_rgb)?,
                precision: &resolved.precision.to_string(),
            };
            with_precision!(resolved.precision, commands::auc::run, &args)
        }
        Command::Reconstruct {
            common,
            cnn,
            models,
            target_image,
            target_tensor,
            init_image,
            out,
        } => {
            let resolved = resolve(&common)?;
            if target_image.is_some() == target_tensor.is_some() {
                return Err(usage(
                    "exactly one of --target-image / --target-tensor is required",
                ));
            }
            let settings = resolved.run_config.reconstruct.clone().unwrap_or_default();
            let args = commands::reconstruct_cmd::ReconstructArgs {
                cnn: &cnn,
                models: &models,
                target_image: target_image.as_deref(),
                target_tensor: target_tensor.as_deref(),
                init_image: init_image.as_deref(),
                out: &out,
                settings,
                seed: resolved.seed,
                precision: &resolved.precision.to_string(),
            };
            resolved.run_config.echo_effective(&out)?;
            with_precision!(resolved.precision, commands::reconstruct_cmd::run, &args)
        }
        Command::MakeFixtures {
            common,
            out,
            corpus_count,
            dataset_count,
            image_size,
        } => {
            let resolved = resolve(&common)?;
            let args = commands::fixtures_cmd::FixturesArgs {
                out: &out,
                seed: resolved.seed,
                corpus_count,
                dataset_count,
                image_size,
            };
            commands::fixtures_cmd::run(&args)
        }
    }
}
