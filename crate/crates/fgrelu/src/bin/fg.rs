//! `fg` — experiment harness for feedback-gated ReLU networks.
//!
//! Every subcommand reads an optional TOML experiment config and writes its
//! outputs (curves.csv, sweep.csv, histograms, reconstructions, manifest,
//! checkpoints) into the output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fgrelu::experiment::{self, ExperimentConfig, ExperimentKind, SweepAxes};
use fgrelu::Real;

#[derive(Parser)]
#[command(name = "fg", version, about = "Feedback-gated ReLU experiment harness")]
struct Cli {
    /// TOML experiment config; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Network preset (see `fg presets`).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Base seed; replicate r uses seed + r.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the full dataset instead of the desk-scale subsample.
    #[arg(long, global = true)]
    full_data: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory with the four MNIST IDX files.
    #[arg(long, global = true)]
    mnist_dir: Option<PathBuf>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long, global = true)]
    cifar_dir: Option<PathBuf>,
    /// Replicate count R.
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train feedback and no-feedback variants under identical budgets.
    CurveCompare,
    /// Train the feedback model at each timestep count (1 drops the edges).
    TimestepSweep,
    /// Baseline vs learned feedback vs constant-gain override.
    ConstantGain {
        /// Override gain value.
        #[arg(long)]
        gain: Option<Real>,
    },
    /// Evaluate trained variants under pre-activation Gaussian noise.
    NoiseSweep,
    /// Train per (β_max, η) grid point and report the best pair.
    GridSearch,
    /// Collect feedback/gain distributions over the test set.
    GainHist,
    /// Reconstruction drift between passes under reduced-contrast inputs.
    ContrastSweep,
    /// Manually drive one layer's gains and dump reconstructions.
    GainProbe,
    /// CIFAR-10 classification with and without comprehensive feedback.
    Classify,
    /// Train a single model and save curves plus a checkpoint.
    Train,
    /// Evaluate a checkpoint on the preset's test data.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pre-activation noise standard deviation.
        #[arg(long)]
        sigma: Option<Real>,
        /// Also export the per-unit (μ_D, gain) records.
        #[arg(long)]
        gates: bool,
    },
    /// List the available network presets.
    Presets,
}

fn load_config(cli: &Cli, kind: ExperimentKind) -> fgrelu::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig {
            kind: None,
            preset: None,
            network: None,
            out_dir: PathBuf::from("runs/out"),
            replicates: 3,
            seed: 0,
            full_data: false,
            mnist_dir: None,
            cifar_dir: None,
            train: Default::default(),
            sweep: SweepAxes::default(),
            desk: Default::default(),
        },
    };
    config.kind = Some(kind);
    if let Some(p) = &cli.preset {
        config.preset = Some(p.clone());
    }
    if config.preset.is_none() && config.network.is_none() {
        config.preset = Some("mnist_ae_10_partial".to_string());
    }
    if let Some(s) = cli.seed {
        config.seed = s;
        config.train.seed = s;
    }
    if cli.full_data {
        config.full_data = true;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(dir) = &cli.mnist_dir {
        config.mnist_dir = Some(dir.clone());
    }
    if let Some(dir) = &cli.cifar_dir {
        config.cifar_dir = Some(dir.clone());
    }
    if let Some(r) = cli.replicates {
        config.replicates = r;
    }
    if let Some(e) = cli.epochs {
        config.train.epochs = e;
    }
    Ok(config)
}

fn run(cli: &Cli) -> fgrelu::Result<()> {
    match &cli.command {
        Command::Presets => {
            for p in experiment::PRESETS {
                println!("{p}");
            }
            Ok(())
        }
        Command::CurveCompare => {
            let config = load_config(cli, ExperimentKind::CurveCompare)?;
            let runs = experiment::run_curve_compare(&config)?;
            for v in &runs {
                println!("{}: mean final test loss {}", v.variant, v.mean_final_loss());
            }
            println!("outputs in {}", config.out_dir.display());
            Ok(())
        }
        Command::TimestepSweep => {
            let config = load_config(cli, ExperimentKind::TimestepSweep)?;
            let sweep = experiment::run_timestep_sweep(&config)?;
            if sweep.edges_dropped_at_t1 {
                println!("note: t=1 rows ran without feedback edges");
            }
            for (t, runs) in &sweep.per_t {
                println!("t={t}: mean final test loss {}", runs.mean_final_loss());
            }
            println!("outputs in {}", config.out_dir.display());
            Ok(())
        }
        Command::ConstantGain { gain } => {
            let mut config = load_config(cli, ExperimentKind::ConstantGain)?;
            if let Some(g) = gain {
                config.sweep.gain_value = *g;
            }
            let runs = experiment::run_constant_gain(&config)?;
            for v in &runs {
                println!("{}: mean final test loss {}", v.variant, v.mean_final_loss());
            }
            println!("outputs in {}", config.out_dir.display());
            Ok(())
        }
        Command::NoiseSweep => {
            let config = load_config(cli, ExperimentKind::NoiseSweep)?;
            let rows = experiment::run_noise_sweep(&config)?;
            let sigmas: Vec<Real> = {
                let mut s: Vec<Real> = rows.iter().map(|r| r.sigma).collect();
                s.dedup();
                s
            };
            for sigma in sigmas {
                for variant in ["feedback", "no_feedback"] {
                    let losses: Vec<Real> = rows
                        .iter()
                        .filter(|r| r.sigma == sigma && r.variant == variant)
                        .map(|r| r.loss)
                        .collect();
                    if !losses.is_empty() {
                        println!("sigma={sigma} {variant}: mean loss {}", experiment::mean(&losses));
                    }
                }
            }
            println!("outputs in {}", config.out_dir.display());
            Ok(())
        }
        Command::GridSearch => {
            let config = load_config(cli, ExperimentKind::GridSearch)?;
            let result = experiment::run_grid_search(&config)?;
            println!("best beta_max={} eta={}", result.best.0, result.best.1);
            println!("outputs in {}", config.out_dir.display());
            Ok(())
        }
        Command::GainHist => {
            let config = load_config(cli, ExperimentKind::GainHist)?;
            let hist = experiment::run_gain_hist(&config)?;
            for lh in &hist.per_layer {
                println!(
                    "layer {}: {} gate records, top gain bin holds {:.1}%",
                    lh.layer,
                    lh.gain.total(),
                    100.0 * lh.gain.top_bin_fraction()
                );
            }
            println!("outputs in {}", config.out_dir.display());
            Ok(())
        }
        Command::ContrastSweep => {
            let config = load_config(cli, ExperimentKind::ContrastSweep)?;
            let rows = experiment::run_contrast_sweep(&config)?;
            for row in &rows {
                println!("contrast {}: mean |Δ mean pixel| {}", row.factor, row.mean_abs_diff);
            }
            println!("outputs in {}", config.out_dir.display());
            Ok(())
        }
        Command::GainProbe => {
            let config = load_config(cli, ExperimentKind::GainProbe)?;
            let files = experiment::run_gain_probe(&config)?;
            println!("wrote {} reconstructions to {}", files.len(), config.out_dir.display());
            Ok(())
        }
        Command::Classify => {
            let mut config = load_config(cli, ExperimentKind::Classify)?;
            if config.preset.as_deref() == Some("mnist_ae_10_partial") {
                config.preset = Some("cifar_clf".to_string());
            }
            let result = experiment::run_classify(&config)?;
            for v in &result.runs {
                println!(
                    "{}: mean final accuracy {}",
                    v.variant,
                    v.mean_final_accuracy().unwrap_or(Real::NAN)
                );
            }
            println!("accuracy delta (feedback − baseline): {}", result.accuracy_delta);
            println!("outputs in {}", config.out_dir.display());
            Ok(())
        }
        Command::Train => {
            let config = load_config(cli, ExperimentKind::Train)?;
            let record = experiment::run_train(&config)?;
            if let Some(d) = &record.diverged {
                println!("training diverged: {d}");
            }
            println!(
                "final test loss {} after {} steps; outputs in {}",
                record.final_test_loss().unwrap_or(Real::NAN),
                record.steps,
                config.out_dir.display()
            );
            Ok(())
        }
        Command::Eval { checkpoint, sigma, gates } => {
            let mut config = load_config(cli, ExperimentKind::Eval)?;
            if let Some(c) = checkpoint {
                config.sweep.checkpoint = Some(c.clone());
            }
            let outcome = experiment::run_eval(&config, *sigma, *gates)?;
            match outcome.accuracy {
                Some(acc) => println!("loss {} accuracy {}", outcome.loss, acc),
                None => println!("loss {}", outcome.loss),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
