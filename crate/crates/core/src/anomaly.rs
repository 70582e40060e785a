//! Hypersphere anomaly detector.
//!
//! A small dense embedding network is trained so that inlier features map
//! close to a fixed center and labeled outliers map away from it: inliers
//! contribute their squared distance to the loss, outliers its reciprocal.
//! The anomaly score of a sample is its embedding's distance to the center;
//! classification thresholds that score at the `(1 - fnr)`-quantile of
//! validation inlier scores.
//!
//! Training is plain Adam with manual backprop through the dense stack; with
//! a fixed seed the whole procedure is bit-deterministic.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Prng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Dense embedding network: leaky-relu hidden layers, linear final layer
/// without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedNet {
    /// `[input, hidden..., output]`.
    pub widths: Vec<usize>,
    /// `weights[l]` has shape `[widths[l+1], widths[l]]`.
    pub weights: Vec<Tensor>,
    /// Hidden-layer biases; the final layer entry is `None`.
    pub biases: Vec<Option<Tensor>>,
    pub leaky_slope: f64,
}

impl EmbedNet {
    /// Seeded normal init scaled by `1/sqrt(fan_in)`.
    pub fn init(widths: &[usize], leaky_slope: f64, seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut rng = Prng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let last = widths.len() - 2;
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let sd = 1.0 / (fan_in as f64).sqrt();
            weights.push(
                Tensor::new(
                    vec![fan_out, fan_in],
                    (0..fan_out * fan_in).map(|_| rng.normal() * sd).collect(),
                )
                .expect("shape consistent"),
            );
            biases.push(if l == last {
                None
            } else {
                Some(Tensor::zeros(vec![fan_out]))
            });
        }
        Self {
            widths: widths.to_vec(),
            weights,
            biases,
            leaky_slope,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn depth(&self) -> usize {
        self.weights.len()
    }

    fn act(&self, x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            self.leaky_slope * x
        }
    }

    fn act_deriv(&self, x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else {
            self.leaky_slope
        }
    }

    /// Embed one feature vector.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "EmbedNet::embed",
                expected: vec![self.input_dim()],
                actual: vec![x.len()],
            });
        }
        let mut a = x.to_vec();
        for l in 0..self.depth() {
            a = self.layer_forward(l, &a).0;
        }
        Ok(a)
    }

    /// (activation, pre-activation) of layer `l`.
    fn layer_forward(&self, l: usize, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let w = &self.weights[l];
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        let mut pre = vec![0.0; out_dim];
        for (r, p) in pre.iter_mut().enumerate() {
            let row = &w.data()[r * in_dim..(r + 1) * in_dim];
            *p = row.iter().zip(input).map(|(a, b)| a * b).sum();
            if let Some(b) = &self.biases[l] {
                *p += b.data()[r];
            }
        }
        let last = l == self.depth() - 1;
        let act = if last {
            pre.clone()
        } else {
            pre.iter().map(|&v| self.act(v)).collect()
        };
        (act, pre)
    }

    /// Sum of squared Frobenius norms of all weight matrices.
    pub fn weight_sq_norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.data().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Trained detector: embedding net, hypersphere center, and threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub net: EmbedNet,
    pub center: Tensor,
    /// Score threshold; `None` until calibrated.
    pub tau: Option<f64>,
    pub eta: f64,
    pub weight_decay: f64,
    pub trained_epochs: usize,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Zero-based epochs at whose start the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Weight of the labeled term.
    pub eta: f64,
    pub seed: u64,
    /// Stabilizer inside the labeled term (keeps outliers at the center from
    /// dividing by zero).
    pub eps_sad: f64,
    /// Hidden widths of the embedding net.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 5e-4,
            decay_epochs: vec![25],
            decay_factor: 0.1,
            batch_size: 128,
            betas: (0.9, 0.999),
            weight_decay: 0.5e-6,
            eta: 1.0,
            seed: 0,
            eps_sad: 1e-6,
            hidden: vec![128, 64, 32],
            leaky_slope: 0.01,
        }
    }
}

/// Mean embedding of the inlier features under the (freshly initialized)
/// net, with small components snapped away from zero so the center cannot
/// sit on the trivial collapse point. Components in `(-0.1, 0.1)` move to
/// `+-0.1`, zeros to `+0.1`.
pub fn init_center(net: &EmbedNet, inlier_features: &[Tensor]) -> Result<Tensor> {
    if inlier_features.is_empty() {
        return Err(Error::EmptyInput("init_center needs at least one inlier"));
    }
    let mut acc = vec![0.0; net.output_dim()];
    for f in inlier_features {
        let e = net.embed(f.data())?;
        for (a, v) in acc.iter_mut().zip(&e) {
            *a += v;
        }
    }
    let n = inlier_features.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
        if a.abs() < 0.1 {
            *a = if *a < 0.0 { -0.1 } else { 0.1 };
        }
    }
    Ok(Tensor::from_vec(acc))
}

fn check_labels(features: &[Tensor], labels: &[i8]) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "features vs labels",
            expected: vec![features.len()],
            actual: vec![labels.len()],
        });
    }
    if labels.iter().any(|&l| l != 1 && l != -1) {
        return Err(Error::InvalidConfig("labels must be +1 or -1".into()));
    }
    Ok(())
}

/// Batch loss: `(eta / m) * sum_j (d_j^2 + eps)^(y_j) + (wd / 2) * sum_l ||W_l||_F^2`
/// with `d_j` the embedding distance to the center. Inliers (`y = +1`) pay
/// their squared distance, outliers (`y = -1`) its reciprocal.
pub fn sad_loss(
    model: &DetectorModel,
    features: &[Tensor],
    labels: &[i8],
    eps_sad: f64,
) -> Result<f64> {
    check_labels(features, labels)?;
    let m = features.len() as f64;
    let mut acc = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        let e = model.net.embed(f.data())?;
        let d_sq: f64 = e
            .iter()
            .zip(model.center.data())
            .map(|(a, c)| (a - c) * (a - c))
            .sum();
        let base = d_sq + eps_sad;
        acc += if y == 1 { base } else { 1.0 / base };
    }
    Ok(model.eta / m * acc + model.weight_decay / 2.0 * model.net.weight_sq_norm())
}

/// Per-tensor gradients matching an [`EmbedNet`]'s parameters.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Option<Tensor>>,
}

impl NetGradients {
    fn zeros_like(net: &EmbedNet) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| Tensor::zeros(w.shape().to_vec()))
                .collect(),
            biases: net
                .biases
                .iter()
                .map(|b| b.as_ref().map(|t| Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }
}

/// Loss and its gradient w.r.t. all net parameters (manual backprop).
pub fn sad_loss_gradient(
    model: &DetectorModel,
    features: &[Tensor],
    labels: &[i8],
    eps_sad: f64,
) -> Result<(f64, NetGradients)> {
    check_labels(features, labels)?;
    let net = &model.net;
    let depth = net.depth();
    let m = features.len() as f64;
    let mut grads = NetGradients::zeros_like(net);
    let mut loss = 0.0;

    for (f, &y) in features.iter().zip(labels) {
        // forward tape
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(depth);
        if f.len() != net.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "sad_loss feature",
                expected: vec![net.input_dim()],
                actual: f.shape().to_vec(),
            });
        }
        acts.push(f.data().to_vec());
        for l in 0..depth {
            let (a, p) = net.layer_forward(l, acts.last().unwrap());
            pres.push(p);
            acts.push(a);
        }
        let e: Vec<f64> = acts[depth]
            .iter()
            .zip(model.center.data())
            .map(|(a, c)| a - c)
            .collect();
        let d_sq: f64 = e.iter().map(|v| v * v).sum();
        let base = d_sq + eps_sad;
        let (term, dterm_dd_sq) = if y == 1 {
            (base, 1.0)
        } else {
            (1.0 / base, -1.0 / (base * base))
        };
        loss += term;

        // backward
        let coef = model.eta / m * dterm_dd_sq * 2.0;
        let mut g: Vec<f64> = e.iter().map(|v| coef * v).collect();
        for l in (0..depth).rev() {
            if l != depth - 1 {
                for (gv, pv) in g.iter_mut().zip(&pres[l]) {
                    *gv *= net.act_deriv(*pv);
                }
            }
            let w = &net.weights[l];
            let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
            let input = &acts[l];
            {
                let gw = grads.weights[l].data_mut();
                for r in 0..out_dim {
                    let gr = g[r];
                    for (c, inp) in input.iter().enumerate() {
                        gw[r * in_dim + c] += gr * inp;
                    }
                }
            }
            if let Some(gb) = &mut grads.biases[l] {
                for (b, gv) in gb.data_mut().iter_mut().zip(&g) {
                    *b += gv;
                }
            }
            let mut g_prev = vec![0.0; in_dim];
            for (row, &gr) in w.data().chunks_exact(in_dim).zip(&g) {
                for (gp, a) in g_prev.iter_mut().zip(row) {
                    *gp += gr * a;
                }
            }
            g = g_prev;
        }
    }

    // weight decay contributes wd * W to each weight gradient
    for (gw, w) in grads.weights.iter_mut().zip(&net.weights) {
        for (g, v) in gw.data_mut().iter_mut().zip(w.data()) {
            *g += model.weight_decay * v;
        }
    }
    let total = model.eta / m * loss + model.weight_decay / 2.0 * net.weight_sq_norm();
    Ok((total, grads))
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// Train a detector; returns the model plus the mean batch loss per epoch.
pub fn train_traced(
    features: &[Tensor],
    labels: &[i8],
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<f64>)> {
    check_labels(features, labels)?;
    if cfg.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be >= 1".into()));
    }
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(Error::InvalidConfig(
            "training needs both inlier (+1) and outlier (-1) samples".into(),
        ));
    }
    let input_dim = features[0].len();
    let mut widths = vec![input_dim];
    widths.extend_from_slice(&cfg.hidden);
    let net = EmbedNet::init(&widths, cfg.leaky_slope, derive_seed(cfg.seed, 0));
    let inliers: Vec<Tensor> = features
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(f, _)| f.clone())
        .collect();
    let center = init_center(&net, &inliers)?;

    let mut model = DetectorModel {
        net,
        center,
        tau: None,
        eta: cfg.eta,
        weight_decay: cfg.weight_decay,
        trained_epochs: 0,
    };

    let params_per: Vec<usize> = model
        .net
        .weights
        .iter()
        .map(|w| w.len())
        .chain(model.net.biases.iter().flatten().map(|b| b.len()))
        .collect();
    let mut adam = AdamState {
        m: params_per.iter().map(|&n| vec![0.0; n]).collect(),
        v: params_per.iter().map(|&n| vec![0.0; n]).collect(),
        t: 0,
    };

    let mut lr = cfg.lr;
    let (b1, b2) = cfg.betas;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.decay_epochs.contains(&epoch) {
            lr *= cfg.decay_factor;
        }
        let mut shuffle_rng = Prng::seed_from_u64(derive_seed(cfg.seed, 1 + epoch as u64));
        let order = shuffle_rng.permutation(features.len());
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch_f: Vec<Tensor> = chunk.iter().map(|&i| features[i].clone()).collect();
            let batch_y: Vec<i8> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = sad_loss_gradient(&model, &batch_f, &batch_y, cfg.eps_sad)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: epoch });
            }
            epoch_loss += loss;
            batches += 1.0;

            adam.t += 1;
            let bc1 = 1.0 - b1.powi(adam.t as i32);
            let bc2 = 1.0 - b2.powi(adam.t as i32);
            let mut slot = 0;
            let grad_tensors: Vec<&[f64]> = grads
                .weights
                .iter()
                .map(|t| t.data())
                .chain(grads.biases.iter().flatten().map(|t| t.data()))
                .collect();
            let mut param_tensors: Vec<&mut [f64]> = Vec::new();
            for w in model.net.weights.iter_mut() {
                param_tensors.push(w.data_mut());
            }
            for b in model.net.biases.iter_mut().flatten() {
                param_tensors.push(b.data_mut());
            }
            for (params, grad) in param_tensors.into_iter().zip(grad_tensors) {
                let (m, v) = (&mut adam.m[slot], &mut adam.v[slot]);
                for i in 0..params.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + 1e-8);
                }
                slot += 1;
            }
        }
        epoch_losses.push(epoch_loss / batches);
        model.trained_epochs = epoch + 1;
    }
    Ok((model, epoch_losses))
}

/// Train a detector on labeled features. Deterministic given the seed; the
/// returned model's threshold is unset until calibrated.
pub fn train(features: &[Tensor], labels: &[i8], cfg: &TrainConfig) -> Result<DetectorModel> {
    Ok(train_traced(features, labels, cfg)?.0)
}

/// Anomaly score: embedding distance to the center.
pub fn score(model: &DetectorModel, feature: &Tensor) -> Result<f64> {
    let e = model.net.embed(feature.data())?;
    Ok(e.iter()
        .zip(model.center.data())
        .map(|(a, c)| (a - c) * (a - c))
        .sum::<f64>()
        .sqrt())
}

pub fn score_batch(model: &DetectorModel, features: &[Tensor]) -> Result<Vec<f64>> {
    features.iter().map(|f| score(model, f)).collect()
}

/// Nearest-rank upper empirical quantile: sort ascending and take the value
/// at index `ceil((1 - fnr) * n) - 1`. With `fnr = 0` this is the maximum.
pub fn pick_threshold(val_scores: &[f64], fnr: f64) -> Result<f64> {
    if val_scores.is_empty() {
        return Err(Error::EmptyInput("pick_threshold needs scores"));
    }
    if !(0.0..1.0).contains(&fnr) {
        return Err(Error::InvalidConfig(format!("fnr must lie in [0, 1), got {fnr}")));
    }
    let mut sorted = val_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    let n = sorted.len();
    let rank = ((1.0 - fnr) * n as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// `+1` (inlier) iff `score <= tau`; the boundary is inclusive.
pub fn classify(model: &DetectorModel, feature: &Tensor) -> Result<i8> {
    let tau = model.tau.ok_or(Error::InvalidConfig(
        "classify requires a calibrated threshold (tau unset)".into(),
    ))?;
    Ok(if score(model, feature)? <= tau { 1 } else { -1 })
}

// ---------------------------------------------------------------------------
// Persistence: TNSR weights + JSON manifest.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DetectorManifest {
    widths: Vec<usize>,
    leaky_slope: f64,
    tau: Option<f64>,
    eta: f64,
    weight_decay: f64,
    trained_epochs: usize,
    weight_files: Vec<String>,
    bias_files: Vec<Option<String>>,
    center_file: String,
}

pub fn save_detector(model: &DetectorModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut weight_files = Vec::new();
    let mut bias_files = Vec::new();
    for (l, w) in model.net.weights.iter().enumerate() {
        let name = format!("w{l}.tnsr");
        w.save(dir.join(&name))?;
        weight_files.push(name);
        bias_files.push(match &model.net.biases[l] {
            Some(b) => {
                let name = format!("b{l}.tnsr");
                b.save(dir.join(&name))?;
                Some(name)
            }
            None => None,
        });
    }
    model.center.save(dir.join("center.tnsr"))?;
    let manifest = DetectorManifest {
        widths: model.net.widths.clone(),
        leaky_slope: model.net.leaky_slope,
        tau: model.tau,
        eta: model.eta,
        weight_decay: model.weight_decay,
        trained_epochs: model.trained_epochs,
        weight_files,
        bias_files,
        center_file: "center.tnsr".into(),
    };
    let f = std::fs::File::create(dir.join("detector.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(f), &manifest)?;
    Ok(())
}

pub fn load_detector(dir: impl AsRef<Path>) -> Result<DetectorModel> {
    let dir = dir.as_ref();
    let f = std::fs::File::open(dir.join("detector.json"))?;
    let manifest: DetectorManifest = serde_json::from_reader(std::io::BufReader::new(f))?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (wf, bf) in manifest.weight_files.iter().zip(&manifest.bias_files) {
        weights.push(Tensor::load(dir.join(wf))?);
        biases.push(match bf {
            Some(name) => Some(Tensor::load(dir.join(name))?),
            None => None,
        });
    }
    Ok(DetectorModel {
        net: EmbedNet {
            widths: manifest.widths,
            weights,
            biases,
            leaky_slope: manifest.leaky_slope,
        },
        center: Tensor::load(dir.join(&manifest.center_file))?,
        tau: manifest.tau,
        eta: manifest.eta,
        weight_decay: manifest.weight_decay,
        trained_epochs: manifest.trained_epochs,
    })
}
