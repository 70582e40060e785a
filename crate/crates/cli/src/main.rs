//! Experiment driver for single-model attribution.
//!
//! Stage verbs (`synth-gen`, `gen-data`, `extract`, `train-detector`,
//! `threshold`) operate on directories so pipelines can be assembled and
//! inspected piecewise; `evaluate` runs the whole experiment from a config
//! file; `verify` runs the numerical verification suites; `report`
//! pretty-prints a result file.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use flipad::anomaly::{load_detector, pick_threshold, save_detector, score_batch, train};
use flipad::baselines::{downsample_nn, log_dct_features, DctConfig};
use flipad::flipad::{extract_features_batch, select_channels, take_channels, FlipadConfig};
use flipad::generator::{load_weights, mean_activation, save_weights, toy_generator};
use flipad::harness::{
    add_noise_perturbation, read_report, run_experiment, sample_images, write_report,
    write_score_csv, ExperimentConfig, LabeledSet, Method,
};
use flipad::rng::derive_seed;
use flipad::tensor::Tensor;
use flipad::verify::run_all_suites;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "flipad", about = "Single-model attribution experiments", version)]
struct Cli {
    /// Master seed; stage and sample seeds derive from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Experiment config file (JSON); defaults apply where absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sample-level parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a toy generator and write its weights.
    SynthGen {
        /// Output channels of the generated images.
        #[arg(long, default_value_t = 1)]
        out_channels: usize,
        /// Weight seed.
        #[arg(long, default_value_t = 1)]
        gen_seed: u64,
    },
    /// Sample images from a generator directory.
    GenData {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        count: usize,
        /// Source name recorded per sample (e.g. "gen" or "opp0").
        #[arg(long, default_value = "gen")]
        source: String,
        /// Split recorded per sample.
        #[arg(long, default_value = "train")]
        split: String,
        /// Label attached to the samples (+1 inlier, -1 outlier).
        #[arg(long, default_value_t = 1, allow_hyphen_values = true)]
        label: i8,
        /// Additive Gaussian perturbation.
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
    },
    /// Extract features from a sampled dataset.
    Extract {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// flipad | rawpad | dctpad
        #[arg(long)]
        method: String,
    },
    /// Train the anomaly detector on labeled features.
    TrainDetector {
        #[arg(long)]
        features: PathBuf,
    },
    /// Calibrate the detector threshold on validation inlier features.
    Threshold {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 0.005)]
        fnr: f64,
    },
    /// Run a full experiment from the config file.
    Evaluate,
    /// Run the numerical verification suites.
    Verify,
    /// Summarize a report file.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &cli.config {
        Some(path) => {
            let f = std::fs::File::open(path)
                .with_context(|| format!("opening config {}", path.display()))?;
            serde_json::from_reader(std::io::BufReader::new(f))
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    // an explicit command-line seed wins over the config file
    if cli.seed != 0 || cli.config.is_none() {
        cfg.seed = cli.seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("configuring worker pool")?;
    }
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output dir {}", cli.out.display()))?;

    match &cli.command {
        Command::SynthGen {
            out_channels,
            gen_seed,
        } => {
            let gen = toy_generator(*out_channels, *gen_seed);
            save_weights(&gen, &cli.out)?;
            println!(
                "wrote generator (latent {} -> {:?}) to {}",
                gen.latent_dim,
                gen.output_shape()?,
                cli.out.display()
            );
        }
        Command::GenData {
            generator,
            count,
            source,
            split,
            label,
            noise_sigma,
        } => {
            if *label != 1 && *label != -1 {
                bail!("label must be +1 or -1");
            }
            let gen = load_weights(generator)?;
            let mut images = sample_images(&gen, *count, derive_seed(cli.seed, 0x11))?;
            if *noise_sigma > 0.0 {
                images = add_noise_perturbation(
                    &images,
                    *noise_sigma,
                    derive_seed(cli.seed, 0x12),
                    gen.final_layer().activation,
                );
            }
            let set = LabeledSet {
                labels: vec![*label; images.len()],
                sources: vec![source.clone(); images.len()],
                ids: (0..images.len())
                    .map(|i| format!("{source}_{split}_{i:05}"))
                    .collect(),
                tensors: images,
            };
            set.save(&cli.out)?;
            println!("wrote {count} samples from {source} to {}", cli.out.display());
        }
        Command::Extract {
            generator,
            data,
            method,
        } => {
            let cfg = load_config(&cli)?;
            let gen = load_weights(generator)?;
            let set = LabeledSet::load(data)?;
            let method = Method::parse(method)?;
            let features = extract_stage(&gen, &set, method, &cfg)?;
            let out_set = LabeledSet {
                tensors: features,
                labels: set.labels,
                sources: set.sources,
                ids: set.ids,
            };
            out_set.save(&cli.out)?;
            println!(
                "extracted {} {} features to {}",
                out_set.tensors.len(),
                method.name(),
                cli.out.display()
            );
        }
        Command::TrainDetector { features } => {
            let cfg = load_config(&cli)?;
            let set = LabeledSet::load(features)?;
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = derive_seed(cfg.seed, 0x70);
            let model = train(&set.tensors, &set.labels, &train_cfg)?;
            save_detector(&model, &cli.out)?;
            println!(
                "trained detector ({} epochs) on {} samples; wrote {}",
                model.trained_epochs,
                set.tensors.len(),
                cli.out.display()
            );
        }
        Command::Threshold {
            detector,
            features,
            fnr,
        } => {
            let mut model = load_detector(detector)?;
            let set = LabeledSet::load(features)?;
            let inliers: Vec<Tensor> = set
                .tensors
                .iter()
                .zip(&set.labels)
                .filter(|(_, &l)| l == 1)
                .map(|(t, _)| t.clone())
                .collect();
            if inliers.is_empty() {
                bail!("threshold calibration needs inlier-labeled features");
            }
            let scores = score_batch(&model, &inliers)?;
            let tau = pick_threshold(&scores, *fnr)?;
            model.tau = Some(tau);
            save_detector(&model, detector)?;
            println!(
                "calibrated tau = {tau:.6} at fnr {fnr} from {} inlier scores",
                inliers.len()
            );
        }
        Command::Evaluate => {
            let cfg = load_config(&cli)?;
            let (report, rows) = run_experiment(&cfg)?;
            let report_path = cli.out.join("report.json");
            let csv_path = cli.out.join("scores.csv");
            write_report(&report, &report_path)?;
            write_score_csv(&rows, &csv_path)?;
            print_report(&report);
            println!("wrote {} and {}", report_path.display(), csv_path.display());
        }
        Command::Verify => {
            let outcomes = run_all_suites(cli.seed)?;
            let path = cli.out.join("verification.json");
            let f = std::fs::File::create(&path)?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(f), &outcomes)?;
            let mut all_pass = true;
            for o in &outcomes {
                println!("{}: {}", o.suite, if o.pass { "PASS" } else { "FAIL" });
                all_pass &= o.pass;
            }
            println!("wrote {}", path.display());
            if !all_pass {
                bail!("one or more verification suites failed");
            }
        }
        Command::Report { report } => {
            let report = read_report(report)?;
            print_report(&report);
        }
    }
    Ok(())
}

/// Feature extraction for the stage-wise pipeline.
fn extract_stage(
    gen: &flipad::generator::GeneratorSpec,
    set: &LabeledSet,
    method: Method,
    cfg: &ExperimentConfig,
) -> Result<Vec<Tensor>> {
    Ok(match method {
        Method::Flipad => {
            let anchor = mean_activation(gen, cfg.mean_samples, derive_seed(cfg.seed, 0x80))?;
            let fcfg = FlipadConfig {
                lambda: cfg.lambda,
                pool: cfg.pool,
                mean_samples: cfg.mean_samples,
                seed: cfg.seed,
                ..FlipadConfig::default()
            };
            let mut feats = extract_features_batch(gen, &set.tensors, &fcfg, &anchor)?;
            if let Some(k) = cfg.channel_top_k {
                let class_mean = |want: i8| -> Option<Tensor> {
                    let class: Vec<&Tensor> = feats
                        .iter()
                        .zip(&set.labels)
                        .filter(|(_, &l)| l == want)
                        .map(|(t, _)| t)
                        .collect();
                    let first = class.first()?;
                    let mut acc = Tensor::zeros(first.shape().to_vec());
                    for f in &class {
                        acc = acc.add(f);
                    }
                    Some(acc.scale(1.0 / class.len() as f64))
                };
                if let (Some(inlier), Some(outlier)) = (class_mean(1), class_mean(-1)) {
                    let channels = select_channels(&inlier, &outlier, k)?;
                    feats = feats
                        .iter()
                        .map(|f| take_channels(f, &channels))
                        .collect::<flipad::Result<_>>()?;
                    println!("selected channels {channels:?}");
                }
            }
            feats
        }
        Method::Rawpad => match cfg.downsample {
            Some(target) => set
                .tensors
                .iter()
                .map(|t| downsample_nn(t, target))
                .collect::<flipad::Result<_>>()?,
            None => set.tensors.clone(),
        },
        Method::Dctpad => {
            let dcfg = DctConfig {
                crop: cfg.dct_crop,
                ..DctConfig::default()
            };
            set.tensors
                .iter()
                .map(|t| log_dct_features(t, &dcfg))
                .collect::<flipad::Result<_>>()?
        }
        Method::SmF | Method::SmInv => {
            bail!("{} scores samples directly; use `evaluate`", method.name())
        }
    })
}

fn print_report(report: &flipad::harness::EvalReport) {
    println!(
        "method {} | tau {:.6} | mean accuracy {:.2}%",
        report.method.name(),
        report.tau,
        report.mean_accuracy
    );
    for o in &report.opponents {
        println!(
            "  vs {}: accuracy {:.2}%  auc {:.4}  confusion tp={} fn={} fp={} tn={}",
            o.opponent,
            o.accuracy,
            o.auc,
            o.confusion.tp,
            o.confusion.fn_,
            o.confusion.fp,
            o.confusion.tn
        );
    }
}
