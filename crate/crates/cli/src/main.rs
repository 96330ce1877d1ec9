//! `bayescal` command-line front end.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 for data
//! errors, 4 for numerical failures.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use bayescal_core::{EstimatorChoice, FeatureSubset, Method};
use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "bayescal", version, about = "Bayesian confidence calibration for object detectors")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Interval miscoverage level (0.05 gives 95% intervals).
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Number of posterior draws per detection.
    #[arg(long = "samples-t", global = true)]
    samples_t: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct ModelSelection {
    /// Calibration methods, comma separated (HB, LC, BC).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    /// Feature subsets, comma separated (conf_only, conf_pos, conf_shape, full).
    #[arg(long, value_delimiter = ',')]
    subsets: Vec<FeatureSubset>,
    /// Parameter estimator: ml, svi or both.
    #[arg(long, value_parser = parse_estimator)]
    estimator: Option<EstimatorChoice>,
}

fn parse_estimator(s: &str) -> Result<EstimatorChoice, String> {
    match s.to_ascii_lowercase().as_str() {
        "ml" => Ok(EstimatorChoice::Ml),
        "svi" => Ok(EstimatorChoice::Svi),
        "both" => Ok(EstimatorChoice::Both),
        other => Err(format!("unknown estimator `{other}`")),
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Match detections to ground truth and write labelled samples.
    Match {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic samples with a known precision map.
    Synth {
        #[arg(long)]
        n: usize,
        /// Logit-space weights over (score, cx, cy, w, h); trailing ones default to 0.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        true_weights: Vec<f64>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        true_bias: f64,
        /// Beta shape of the score distribution as `alpha,beta`.
        #[arg(long, value_delimiter = ',', default_value = "5,2")]
        score_shape: Vec<f64>,
        /// Box sampling region, e.g. `cx=0:0.5,w=0.1:0.3`.
        #[arg(long, default_value = "")]
        region: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit calibration models on a labelled samples file.
    Fit {
        #[arg(long)]
        samples: Option<PathBuf>,
        #[command(flatten)]
        selection: ModelSelection,
    },
    /// Evaluate fitted models on held-out samples.
    Eval {
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Model files written by `fit`.
        #[arg(long, required = true, num_args = 1..)]
        models: Vec<PathBuf>,
    },
    /// Run the repeated split, fit and evaluate protocol.
    Experiment {
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        selection: ModelSelection,
    },
    /// Compare interval widths on in-distribution and shifted samples.
    Shift {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        in_samples: PathBuf,
        #[arg(long = "out")]
        out_samples: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let base = commands::load_config(g.config.as_deref())?;
    let cfg = commands::Overrides {
        seed: g.seed,
        tau: g.tau,
        samples_t: g.samples_t,
        ..Default::default()
    };
    match cli.command {
        Command::Match { dets, gts, iou, out } => commands::cmd_match(&dets, &gts, iou, &out),
        Command::Synth {
            n,
            true_weights,
            true_bias,
            score_shape,
            region,
            out,
        } => commands::cmd_synth(
            n,
            g.seed.unwrap_or(base.seed),
            true_weights,
            true_bias,
            &score_shape,
            &region,
            &out,
        ),
        Command::Fit { samples, selection } => {
            let cfg = commands::Overrides {
                samples,
                methods: selection.methods,
                subsets: selection.subsets,
                estimator: selection.estimator,
                ..cfg
            }
            .apply(base)?;
            commands::cmd_fit(&cfg, &g.out_dir)
        }
        Command::Eval { samples, models } => {
            let cfg = commands::Overrides {
                test_samples: samples,
                ..cfg
            }
            .apply(base)?;
            commands::cmd_eval(&cfg, &models, &g.out_dir)
        }
        Command::Experiment {
            samples,
            repeats,
            selection,
        } => {
            let cfg = commands::Overrides {
                samples,
                repeats,
                methods: selection.methods,
                subsets: selection.subsets,
                estimator: selection.estimator,
                ..cfg
            }
            .apply(base)?;
            commands::cmd_experiment(&cfg, &g.out_dir)
        }
        Command::Shift {
            model,
            in_samples,
            out_samples,
        } => {
            let cfg = cfg.apply(base)?;
            commands::cmd_shift(&cfg, &model, &in_samples, &out_samples, &g.out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
