//! End-to-end experiment driver.
//!
//! One experiment: synthesize a generator and its opponents, draw labeled
//! samples, extract features with the configured method, train and calibrate
//! the detector on training/validation data only, then score test samples
//! from the generator against each opponent. Every stage derives its
//! randomness from the experiment seed, so a config reproduces its report
//! exactly; sample-level work fans out across the worker pool with
//! per-sample seeds, so parallelism cannot change results.

use crate::adapted::{build_fingerprint, fingerprint_score, inversion_score, InversionConfig};
use crate::anomaly::{pick_threshold, score_batch, train, TrainConfig};
use crate::baselines::{downsample_nn, log_dct_features, DctConfig};
use crate::error::{Error, Result};
use crate::flipad::{extract_features_batch, select_channels, take_channels, FlipadConfig};
use crate::generator::{forward, mean_activation, toy_generator, ActivationKind, GeneratorSpec};
use crate::metrics::{accuracy, auc};
use crate::rng::{derive_seed, Prng};
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

/// Feature extraction method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Flipad,
    Rawpad,
    Dctpad,
    SmF,
    SmInv,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Flipad => "flipad",
            Method::Rawpad => "rawpad",
            Method::Dctpad => "dctpad",
            Method::SmF => "sm_f",
            Method::SmInv => "sm_inv",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Ok(match s {
            "flipad" => Method::Flipad,
            "rawpad" => Method::Rawpad,
            "dctpad" => Method::Dctpad,
            "sm_f" => Method::SmF,
            "sm_inv" => Method::SmInv,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown method '{other}' (expected flipad|rawpad|dctpad|sm_f|sm_inv)"
                )))
            }
        })
    }
}

/// Full experiment configuration; JSON-serializable with defaults for every
/// field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Master seed; all stage and sample seeds derive from it.
    pub seed: u64,
    /// Weight seed of the generator under attribution.
    pub gen_seed: u64,
    /// Weight seeds of the opponents; the first also supplies the labeled
    /// negative training samples.
    pub opponent_seeds: Vec<u64>,
    pub out_channels: usize,
    pub n_tr: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Target false negative rate for threshold calibration.
    pub fnr: f64,
    /// Additive Gaussian perturbation applied to every sample (0 = off).
    pub noise_sigma: f64,
    // final-layer inversion knobs
    pub lambda: f64,
    pub pool: Option<(usize, usize)>,
    pub channel_top_k: Option<usize>,
    pub mean_samples: usize,
    // raw / frequency baseline knobs
    pub downsample: Option<(usize, usize)>,
    pub dct_crop: Option<(usize, usize)>,
    // detector training
    pub train: TrainConfig,
    // full-generator inversion knobs
    pub inv_attempts: usize,
    pub inv_steps: usize,
    pub inv_lr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Flipad,
            seed: 0,
            gen_seed: 1,
            opponent_seeds: vec![2],
            out_channels: 1,
            n_tr: 2000,
            n_val: 500,
            n_test: 500,
            fnr: 0.005,
            noise_sigma: 0.0,
            lambda: 5e-4,
            pool: Some((2, 2)),
            channel_top_k: None,
            mean_samples: 1000,
            downsample: None,
            dct_crop: None,
            train: TrainConfig::default(),
            inv_attempts: 10,
            inv_steps: 1000,
            inv_lr: 0.1,
        }
    }
}

/// Identity of one sample in an experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    /// Generator id (`"gen"` or `"opp<k>"`).
    pub source: String,
    /// `train` / `val` / `test`.
    pub split: String,
}

/// Which samples exist and where they came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_tr: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub samples: Vec<SampleMeta>,
}

impl DatasetManifest {
    /// Splits must be disjoint (unique ids) and counts must match.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.id)));
            }
            if !matches!(s.split.as_str(), "train" | "val" | "test") {
                return Err(Error::InvalidConfig(format!(
                    "unknown split '{}' for {}",
                    s.split, s.id
                )));
            }
        }
        let count = |split: &str| self.samples.iter().filter(|s| s.split == split).count();
        if count("val") != self.n_val {
            return Err(Error::InvalidConfig("val count mismatch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfusionCounts {
    /// Inliers classified inlier.
    pub tp: usize,
    /// Inliers classified outlier.
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Outliers classified inlier.
    pub fp: usize,
    /// Outliers classified outlier.
    pub tn: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

impl ScoreStats {
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let n = sorted.len();
        Self {
            mean: sorted.iter().sum::<f64>() / n as f64,
            min: sorted[0],
            max: sorted[n - 1],
            median: if n % 2 == 1 {
                sorted[n / 2]
            } else {
                (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OpponentReport {
    pub opponent: String,
    pub accuracy: f64,
    pub auc: f64,
    pub confusion: ConfusionCounts,
    pub inlier_scores: ScoreStats,
    pub outlier_scores: ScoreStats,
}

/// Everything one experiment produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub tau: f64,
    pub mean_accuracy: f64,
    pub opponents: Vec<OpponentReport>,
    /// The exact configuration that produced this report.
    pub config: ExperimentConfig,
}

/// One scored sample, for the per-sample CSV.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub sample_id: String,
    pub source: String,
    pub split: String,
    pub score: f64,
    pub prediction: i8,
}

/// Additive Gaussian noise, clipped back into the activation's output range.
pub fn add_noise_perturbation(
    images: &[Tensor],
    sigma: f64,
    seed: u64,
    final_activation: ActivationKind,
) -> Vec<Tensor> {
    assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return images.to_vec();
    }
    let clip = |v: f64| -> f64 {
        match final_activation {
            ActivationKind::Tanh => v.clamp(-1.0, 1.0),
            ActivationKind::Sigmoid => v.clamp(0.0, 1.0),
            _ => v,
        }
    };
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = Prng::seed_from_u64(derive_seed(seed, i as u64));
            img.map(|v| clip(v + sigma * rng.normal()))
        })
        .collect()
}

// Stage salts for seed derivation.
const SALT_TRAIN_IN: u64 = 0x10;
const SALT_TRAIN_OUT: u64 = 0x20;
const SALT_VAL: u64 = 0x30;
const SALT_TEST_IN: u64 = 0x40;
const SALT_TEST_OUT: u64 = 0x50;
const SALT_NOISE: u64 = 0x60;
const SALT_DETECTOR: u64 = 0x70;
const SALT_ANCHOR: u64 = 0x80;

/// Draw `n` samples from a generator with per-sample derived seeds.
pub fn sample_images(gen: &GeneratorSpec, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = Prng::seed_from_u64(derive_seed(seed, i as u64));
            let z = rng.normal_tensor(vec![gen.latent_dim]);
            forward(gen, &z)
        })
        .collect()
}

fn final_activation(gen: &GeneratorSpec) -> ActivationKind {
    gen.final_layer().activation
}

struct MethodPipeline<'a> {
    cfg: &'a ExperimentConfig,
    gen: &'a GeneratorSpec,
    anchor: Option<Tensor>,
    channels: Option<Vec<usize>>,
}

impl<'a> MethodPipeline<'a> {
    fn new(cfg: &'a ExperimentConfig, gen: &'a GeneratorSpec) -> Result<Self> {
        let anchor = if cfg.method == Method::Flipad {
            Some(mean_activation(
                gen,
                cfg.mean_samples,
                derive_seed(cfg.seed, SALT_ANCHOR),
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            gen,
            anchor,
            channels: None,
        })
    }

    fn flipad_config(&self) -> FlipadConfig {
        FlipadConfig {
            lambda: self.cfg.lambda,
            pool: self.cfg.pool,
            channel_top_k: self.cfg.channel_top_k,
            channels: None, // applied after selection is resolved
            mean_samples: self.cfg.mean_samples,
            seed: self.cfg.seed,
            ..FlipadConfig::default()
        }
    }

    /// Features for detector-based methods; `None` for score-based methods.
    fn features(&self, images: &[Tensor]) -> Result<Option<Vec<Tensor>>> {
        match self.cfg.method {
            Method::Flipad => {
                let anchor = self.anchor.as_ref().expect("anchor prepared");
                let mut feats =
                    extract_features_batch(self.gen, images, &self.flipad_config(), anchor)?;
                if let Some(channels) = &self.channels {
                    feats = feats
                        .iter()
                        .map(|f| take_channels(f, channels))
                        .collect::<Result<_>>()?;
                }
                Ok(Some(feats))
            }
            Method::Rawpad => {
                let feats = match self.cfg.downsample {
                    Some(target) => images
                        .iter()
                        .map(|img| downsample_nn(img, target))
                        .collect::<Result<_>>()?,
                    None => images.to_vec(),
                };
                Ok(Some(feats))
            }
            Method::Dctpad => {
                let dct_cfg = DctConfig {
                    crop: self.cfg.dct_crop,
                    ..DctConfig::default()
                };
                let feats = images
                    .par_iter()
                    .map(|img| log_dct_features(img, &dct_cfg))
                    .collect::<Result<_>>()?;
                Ok(Some(feats))
            }
            Method::SmF | Method::SmInv => Ok(None),
        }
    }

    /// Resolve channel selection from the two training-class feature means.
    fn resolve_channels(
        &mut self,
        train_in: &mut [Tensor],
        train_out: &mut [Tensor],
    ) -> Result<()> {
        let Some(k) = self.cfg.channel_top_k else {
            return Ok(());
        };
        if self.cfg.method != Method::Flipad {
            return Ok(());
        }
        let mean_of = |feats: &[Tensor]| {
            let mut acc = Tensor::zeros(feats[0].shape().to_vec());
            for f in feats {
                acc = acc.add(f);
            }
            acc.scale(1.0 / feats.len() as f64)
        };
        let channels = select_channels(&mean_of(train_in), &mean_of(train_out), k)?;
        for f in train_in.iter_mut() {
            *f = take_channels(f, &channels)?;
        }
        for f in train_out.iter_mut() {
            *f = take_channels(f, &channels)?;
        }
        self.channels = Some(channels);
        Ok(())
    }
}

/// Run the full pipeline described by `config` and return its report plus
/// the per-sample score rows.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(EvalReport, Vec<ScoreRow>)> {
    let stage = |name: &'static str| move |e: Error| e.in_stage(name);

    // --- synth ---
    if config.opponent_seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one opponent".into()).in_stage("synth"));
    }
    let gen = toy_generator(config.out_channels, config.gen_seed);
    let opponents: Vec<GeneratorSpec> = config
        .opponent_seeds
        .iter()
        .map(|&s| toy_generator(config.out_channels, s))
        .collect();
    let act = final_activation(&gen);

    // --- gen-data ---
    let noisy = |imgs: Vec<Tensor>, salt: u64| -> Vec<Tensor> {
        if config.noise_sigma > 0.0 {
            add_noise_perturbation(
                &imgs,
                config.noise_sigma,
                derive_seed(config.seed, SALT_NOISE ^ salt),
                act,
            )
        } else {
            imgs
        }
    };
    let train_in_imgs = noisy(
        sample_images(&gen, config.n_tr, derive_seed(config.seed, SALT_TRAIN_IN))
            .map_err(stage("gen-data"))?,
        SALT_TRAIN_IN,
    );
    let train_out_imgs = noisy(
        sample_images(
            &opponents[0],
            config.n_tr,
            derive_seed(config.seed, SALT_TRAIN_OUT),
        )
        .map_err(stage("gen-data"))?,
        SALT_TRAIN_OUT,
    );
    let val_imgs = noisy(
        sample_images(&gen, config.n_val, derive_seed(config.seed, SALT_VAL))
            .map_err(stage("gen-data"))?,
        SALT_VAL,
    );
    let test_in_imgs = noisy(
        sample_images(&gen, config.n_test, derive_seed(config.seed, SALT_TEST_IN))
            .map_err(stage("gen-data"))?,
        SALT_TEST_IN,
    );
    let mut test_out_imgs = Vec::new();
    for (j, opp) in opponents.iter().enumerate() {
        test_out_imgs.push(noisy(
            sample_images(
                opp,
                config.n_test,
                derive_seed(config.seed, SALT_TEST_OUT + j as u64),
            )
            .map_err(stage("gen-data"))?,
            SALT_TEST_OUT + j as u64,
        ));
    }

    let mut manifest = DatasetManifest {
        seed: config.seed,
        n_tr: config.n_tr,
        n_val: config.n_val,
        n_test: config.n_test,
        samples: Vec::new(),
    };
    let mut push_meta = |prefix: &str, source: &str, split: &str, n: usize| {
        for i in 0..n {
            manifest.samples.push(SampleMeta {
                id: format!("{prefix}_{i:05}"),
                source: source.to_string(),
                split: split.to_string(),
            });
        }
    };
    push_meta("train_in", "gen", "train", config.n_tr);
    push_meta("train_out", "opp0", "train", config.n_tr);
    push_meta("val", "gen", "val", config.n_val);
    push_meta("test_in", "gen", "test", config.n_test);
    for j in 0..opponents.len() {
        push_meta(&format!("test_out{j}"), &format!("opp{j}"), "test", config.n_test);
    }
    manifest.validate().map_err(stage("gen-data"))?;

    // --- extract + score functions per method family ---
    let mut pipeline = MethodPipeline::new(config, &gen).map_err(stage("extract"))?;

    let (val_scores, test_in_scores, test_out_scores): (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) =
        match config.method {
            Method::Flipad | Method::Rawpad | Method::Dctpad => {
                let mut train_in = pipeline
                    .features(&train_in_imgs)
                    .map_err(stage("extract"))?
                    .expect("detector method");
                let mut train_out = pipeline
                    .features(&train_out_imgs)
                    .map_err(stage("extract"))?
                    .expect("detector method");
                pipeline
                    .resolve_channels(&mut train_in, &mut train_out)
                    .map_err(stage("extract"))?;
                let val = pipeline
                    .features(&val_imgs)
                    .map_err(stage("extract"))?
                    .expect("detector method");
                let test_in = pipeline
                    .features(&test_in_imgs)
                    .map_err(stage("extract"))?
                    .expect("detector method");
                let mut test_out = Vec::new();
                for imgs in &test_out_imgs {
                    test_out.push(
                        pipeline
                            .features(imgs)
                            .map_err(stage("extract"))?
                            .expect("detector method"),
                    );
                }

                // --- train-detector ---
                let mut features = train_in;
                let mut labels = vec![1i8; features.len()];
                features.append(&mut train_out);
                labels.extend(std::iter::repeat_n(-1i8, features.len() - labels.len()));
                let mut train_cfg = config.train.clone();
                train_cfg.seed = derive_seed(config.seed, SALT_DETECTOR);
                let model =
                    train(&features, &labels, &train_cfg).map_err(stage("train-detector"))?;

                let val_scores = score_batch(&model, &val).map_err(stage("threshold"))?;
                let test_in_scores = score_batch(&model, &test_in).map_err(stage("evaluate"))?;
                let mut test_out_scores = Vec::new();
                for feats in &test_out {
                    test_out_scores.push(score_batch(&model, feats).map_err(stage("evaluate"))?);
                }
                (val_scores, test_in_scores, test_out_scores)
            }
            Method::SmF => {
                let fp = build_fingerprint(&train_in_imgs).map_err(stage("train-detector"))?;
                let score_all = |imgs: &[Tensor]| -> Result<Vec<f64>> {
                    imgs.iter().map(|x| fingerprint_score(&fp, x)).collect()
                };
                let val_scores = score_all(&val_imgs).map_err(stage("threshold"))?;
                let test_in_scores = score_all(&test_in_imgs).map_err(stage("evaluate"))?;
                let mut test_out_scores = Vec::new();
                for imgs in &test_out_imgs {
                    test_out_scores.push(score_all(imgs).map_err(stage("evaluate"))?);
                }
                (val_scores, test_in_scores, test_out_scores)
            }
            Method::SmInv => {
                let inv_cfg = InversionConfig {
                    attempts: config.inv_attempts,
                    steps: config.inv_steps,
                    lr: config.inv_lr,
                    seed: derive_seed(config.seed, SALT_DETECTOR),
                    ..InversionConfig::default()
                };
                let score_all = |imgs: &[Tensor]| -> Result<Vec<f64>> {
                    imgs.iter()
                        .map(|x| inversion_score(&gen, x, &inv_cfg))
                        .collect()
                };
                let val_scores = score_all(&val_imgs).map_err(stage("threshold"))?;
                let test_in_scores = score_all(&test_in_imgs).map_err(stage("evaluate"))?;
                let mut test_out_scores = Vec::new();
                for imgs in &test_out_imgs {
                    test_out_scores.push(score_all(imgs).map_err(stage("evaluate"))?);
                }
                (val_scores, test_in_scores, test_out_scores)
            }
        };

    // --- threshold (validation inlier scores only; test never seen here) ---
    debug_assert_eq!(val_scores.len(), config.n_val);
    let tau = pick_threshold(&val_scores, config.fnr).map_err(stage("threshold"))?;

    // --- evaluate ---
    let classify = |s: f64| if s <= tau { 1i8 } else { -1i8 };
    let mut rows: Vec<ScoreRow> = Vec::new();
    for (i, &s) in val_scores.iter().enumerate() {
        rows.push(ScoreRow {
            sample_id: format!("val_{i:05}"),
            source: "gen".into(),
            split: "val".into(),
            score: s,
            prediction: classify(s),
        });
    }
    for (i, &s) in test_in_scores.iter().enumerate() {
        rows.push(ScoreRow {
            sample_id: format!("test_in_{i:05}"),
            source: "gen".into(),
            split: "test".into(),
            score: s,
            prediction: classify(s),
        });
    }

    let mut reports = Vec::new();
    for (j, out_scores) in test_out_scores.iter().enumerate() {
        for (i, &s) in out_scores.iter().enumerate() {
            rows.push(ScoreRow {
                sample_id: format!("test_out{j}_{i:05}"),
                source: format!("opp{j}"),
                split: "test".into(),
                score: s,
                prediction: classify(s),
            });
        }
        let mut predictions: Vec<i8> = test_in_scores.iter().map(|&s| classify(s)).collect();
        let mut labels = vec![1i8; predictions.len()];
        predictions.extend(out_scores.iter().map(|&s| classify(s)));
        labels.extend(std::iter::repeat_n(-1i8, out_scores.len()));
        let acc = accuracy(&predictions, &labels).map_err(stage("evaluate"))?;
        let auc_v = auc(&test_in_scores, out_scores).map_err(stage("evaluate"))?;
        let tp = test_in_scores.iter().filter(|&&s| classify(s) == 1).count();
        let fp = out_scores.iter().filter(|&&s| classify(s) == 1).count();
        reports.push(OpponentReport {
            opponent: format!("opp{j}"),
            accuracy: acc,
            auc: auc_v,
            confusion: ConfusionCounts {
                tp,
                fn_: test_in_scores.len() - tp,
                fp,
                tn: out_scores.len() - fp,
            },
            inlier_scores: ScoreStats::from_scores(&test_in_scores),
            outlier_scores: ScoreStats::from_scores(out_scores),
        });
    }

    let mean_accuracy =
        reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64;
    Ok((
        EvalReport {
            method: config.method,
            tau,
            mean_accuracy,
            opponents: reports,
            config: config.clone(),
        },
        rows,
    ))
}

/// Write the per-sample scores as CSV with the standard header.
pub fn write_score_csv(rows: &[ScoreRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "sample_id,source,split,score,prediction")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.sample_id, r.source, r.split, r.score, r.prediction
        )?;
    }
    Ok(())
}

/// Write an [`EvalReport`] as pretty JSON.
pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), report)?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

// ---------------------------------------------------------------------------
// Labeled sample sets on disk (datasets and extracted features).
// ---------------------------------------------------------------------------

/// In-memory labeled sample set (images or features).
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub tensors: Vec<Tensor>,
    pub labels: Vec<i8>,
    pub sources: Vec<String>,
    pub ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LabeledSetManifest {
    entries: Vec<LabeledEntry>,
}

#[derive(Serialize, Deserialize)]
struct LabeledEntry {
    id: String,
    file: String,
    label: i8,
    source: String,
}

impl LabeledSet {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, t) in self.tensors.iter().enumerate() {
            let file = format!("{}.tnsr", self.ids[i]);
            t.save(dir.join(&file))?;
            entries.push(LabeledEntry {
                id: self.ids[i].clone(),
                file,
                label: self.labels[i],
                source: self.sources[i].clone(),
            });
        }
        let f = std::fs::File::create(dir.join("set.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), &LabeledSetManifest { entries })?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let f = std::fs::File::open(dir.join("set.json"))?;
        let manifest: LabeledSetManifest = serde_json::from_reader(std::io::BufReader::new(f))?;
        let mut out = LabeledSet {
            tensors: Vec::new(),
            labels: Vec::new(),
            sources: Vec::new(),
            ids: Vec::new(),
        };
        for e in manifest.entries {
            out.tensors.push(Tensor::load(dir.join(&e.file))?);
            out.labels.push(e.label);
            out.sources.push(e.source);
            out.ids.push(e.id);
        }
        Ok(out)
    }
}
