//! Final-layer inversion features.
//!
//! Given an output `x` of a known generator, invert the final activation,
//! subtract the final layer's bias, and solve the anchored lasso against the
//! final linear layer. The recovered pre-final activation is the feature;
//! outputs that the generator did not produce invert to activations far from
//! the anchor, which is what the downstream detector picks up. Optional
//! max-pooling and channel selection shrink the feature before training.

use crate::error::{Error, Result};
use crate::generator::{hidden_activation, ActivationKind, GeneratorSpec, LinearLayer};
use crate::lasso::{default_step, fista_solve, LassoProblem, SolverConfig};
use crate::linop::{DenseMatrix, LinearOp};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Knobs for feature extraction.
#[derive(Debug, Clone)]
pub struct FlipadConfig {
    /// l1 weight in the anchored lasso.
    pub lambda: f64,
    /// Clamp distance from the activation's range boundary before inverting.
    pub clamp_delta: f64,
    pub solver: SolverConfig,
    /// Non-overlapping max-pool window, e.g. `(2, 2)`.
    pub pool: Option<(usize, usize)>,
    /// How many channels [`select_channels`] should keep.
    pub channel_top_k: Option<usize>,
    /// Resolved channel selection (computed once from training means).
    pub channels: Option<Vec<usize>>,
    /// Monte-Carlo sample count for the anchor estimate.
    pub mean_samples: usize,
    pub seed: u64,
}

impl Default for FlipadConfig {
    fn default() -> Self {
        Self {
            lambda: 5e-4,
            clamp_delta: 1e-6,
            // feature-grade solves: the detector does not need
            // certificate-grade precision, and extraction dominates runtime
            solver: SolverConfig::default()
                .with_rel_tol(1e-8)
                .with_max_iters(2000),
            pool: None,
            channel_top_k: None,
            channels: None,
            mean_samples: 1000,
            seed: 0,
        }
    }
}

impl FlipadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 || self.lambda.is_nan() {
            return Err(Error::InvalidConfig(format!(
                "flipad lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if !(self.clamp_delta > 0.0 && self.clamp_delta < 0.1) {
            return Err(Error::InvalidConfig(format!(
                "clamp_delta must lie in (0, 0.1), got {}",
                self.clamp_delta
            )));
        }
        Ok(())
    }
}

/// Elementwise inverse of the final activation, after clamping `x` into the
/// open range so the result stays finite (tanh outputs of real networks do
/// hit exactly +-1 in 32-bit data).
pub fn invert_final_activation(
    x: &Tensor,
    kind: ActivationKind,
    clamp_delta: f64,
) -> Result<Tensor> {
    match kind {
        ActivationKind::Identity => Ok(x.clone()),
        ActivationKind::Tanh => {
            let lo = -1.0 + clamp_delta;
            let hi = 1.0 - clamp_delta;
            Ok(x.map(|v| v.clamp(lo, hi).atanh()))
        }
        ActivationKind::Sigmoid => {
            let lo = clamp_delta;
            let hi = 1.0 - clamp_delta;
            Ok(x.map(|v| {
                let c = v.clamp(lo, hi);
                (c / (1.0 - c)).ln()
            }))
        }
        ActivationKind::Relu | ActivationKind::LeakyRelu(_) => {
            Err(Error::NonInvertibleActivation(kind.name().to_string()))
        }
    }
}

/// The final linear layer as a [`LinearOp`] over the pre-final activation
/// space, together with its bias (if any).
pub fn final_layer_operator(
    gen: &GeneratorSpec,
    hidden_shape: &[usize],
) -> Result<(LinearOp, Option<Tensor>)> {
    let layer = gen.final_layer();
    match &layer.map {
        LinearLayer::Conv(spec) => {
            if hidden_shape.len() != 3 {
                return Err(Error::ShapeMismatch {
                    context: "final conv layer hidden shape",
                    expected: vec![3],
                    actual: hidden_shape.to_vec(),
                });
            }
            let op = LinearOp::conv(
                spec.clone(),
                [hidden_shape[0], hidden_shape[1], hidden_shape[2]],
            )?;
            Ok((op, spec.bias.clone()))
        }
        LinearLayer::Dense { weight, bias, .. } => {
            let m = DenseMatrix::from_rows(
                &(0..weight.shape()[0])
                    .map(|r| {
                        weight.data()[r * weight.shape()[1]..(r + 1) * weight.shape()[1]].to_vec()
                    })
                    .collect::<Vec<_>>(),
            );
            Ok((LinearOp::Dense(m), bias.clone()))
        }
    }
}

/// Subtract the final layer's bias from the inversion target.
fn subtract_bias(o: &Tensor, bias: &Option<Tensor>, gen: &GeneratorSpec) -> Tensor {
    let Some(b) = bias else {
        return o.clone();
    };
    match &gen.final_layer().map {
        LinearLayer::Conv(_) => {
            // broadcast per output channel over [C, H, W]
            let mut out = o.clone();
            let c = o.shape()[0];
            let plane = o.len() / c;
            for ch in 0..c {
                let bv = b.data()[ch];
                for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
                    *v -= bv;
                }
            }
            out
        }
        LinearLayer::Dense { .. } => {
            let mut out = o.clone();
            for (v, bv) in out.data_mut().iter_mut().zip(b.data()) {
                *v -= bv;
            }
            out
        }
    }
}

/// Invert one generator output into a pre-final-activation feature.
///
/// `zbar` is the anchor, normally from
/// [`mean_activation`](crate::generator::mean_activation). The returned
/// tensor has the hidden shape, then any configured pooling and channel
/// selection applied. Deterministic for fixed inputs and config.
pub fn extract_features(
    gen: &GeneratorSpec,
    x: &Tensor,
    cfg: &FlipadConfig,
    zbar: &Tensor,
) -> Result<Tensor> {
    cfg.validate()?;
    let (op, bias) = final_layer_operator(gen, zbar.shape())?;
    let solver = resolve_solver(&op, &cfg.solver);
    extract_with(gen, x, cfg, zbar, &op, &bias, &solver)
}

/// Batch extraction; solves fan out across the worker pool. The step size is
/// resolved once so every sample sees the identical solver configuration.
pub fn extract_features_batch(
    gen: &GeneratorSpec,
    xs: &[Tensor],
    cfg: &FlipadConfig,
    zbar: &Tensor,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let (op, bias) = final_layer_operator(gen, zbar.shape())?;
    let solver = resolve_solver(&op, &cfg.solver);
    xs.par_iter()
        .map(|x| extract_with(gen, x, cfg, zbar, &op, &bias, &solver))
        .collect()
}

fn resolve_solver(op: &LinearOp, base: &SolverConfig) -> SolverConfig {
    let mut solver = base.clone();
    if solver.step.is_none() {
        let norm_sq = op.norm_sq_estimate(100, 0x5eed);
        if norm_sq > 0.0 {
            solver.step = Some(default_step(norm_sq));
        }
    }
    solver
}

fn extract_with(
    gen: &GeneratorSpec,
    x: &Tensor,
    cfg: &FlipadConfig,
    zbar: &Tensor,
    op: &LinearOp,
    bias: &Option<Tensor>,
    solver: &SolverConfig,
) -> Result<Tensor> {
    let kind = gen.final_layer().activation;
    let o = invert_final_activation(x, kind, cfg.clamp_delta)?;
    let o = subtract_bias(&o, bias, gen);
    let problem = LassoProblem::new(op.clone(), o, zbar.clone(), cfg.lambda)?;
    let report = fista_solve(&problem, solver)?;
    let mut feat = report.solution;
    if let Some(win) = cfg.pool {
        feat = pool_features(&feat, win)?;
    }
    if let Some(channels) = &cfg.channels {
        feat = take_channels(&feat, channels)?;
    }
    Ok(feat)
}

/// Channelwise non-overlapping max-pool over `[C, H, W]`.
pub fn pool_features(feat: &Tensor, window: (usize, usize)) -> Result<Tensor> {
    let (wh, ww) = window;
    if feat.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "pool_features input",
            expected: vec![3],
            actual: feat.shape().to_vec(),
        });
    }
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::InvalidConfig(format!(
            "pool window {wh}x{ww} must divide feature dims {h}x{w}"
        )));
    }
    let (oh, ow) = (h / wh, w / ww);
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..wh {
                    for dx in 0..ww {
                        m = m.max(feat.at(&[ch, oy * wh + dy, ox * ww + dx]));
                    }
                }
                out.set(&[ch, oy, ox], m);
            }
        }
    }
    Ok(out)
}

/// Indices of the `k` channels whose class-mean feature maps differ the most
/// (mean absolute difference over spatial positions); ties break toward the
/// lower index.
pub fn select_channels(
    feat_inlier_mean: &Tensor,
    feat_other_mean: &Tensor,
    k: usize,
) -> Result<Vec<usize>> {
    if feat_inlier_mean.shape() != feat_other_mean.shape() {
        return Err(Error::ShapeMismatch {
            context: "select_channels means",
            expected: feat_inlier_mean.shape().to_vec(),
            actual: feat_other_mean.shape().to_vec(),
        });
    }
    let c = feat_inlier_mean.shape()[0];
    if k > c {
        return Err(Error::InvalidConfig(format!(
            "channel_top_k {k} exceeds channel count {c}"
        )));
    }
    let plane = feat_inlier_mean.len() / c;
    let mut scored: Vec<(usize, f64)> = (0..c)
        .map(|ch| {
            let a = &feat_inlier_mean.data()[ch * plane..(ch + 1) * plane];
            let b = &feat_other_mean.data()[ch * plane..(ch + 1) * plane];
            let diff = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / plane as f64;
            (ch, diff)
        })
        .collect();
    // stable sort by descending score keeps the lower index first on ties
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let mut idx: Vec<usize> = scored[..k].iter().map(|(ch, _)| *ch).collect();
    idx.sort_unstable();
    Ok(idx)
}

/// Keep only the listed channels of a `[C, H, W]` feature tensor.
pub fn take_channels(feat: &Tensor, channels: &[usize]) -> Result<Tensor> {
    let c = feat.shape()[0];
    let plane = feat.len() / c;
    let mut data = Vec::with_capacity(channels.len() * plane);
    for &ch in channels {
        if ch >= c {
            return Err(Error::InvalidConfig(format!(
                "channel {ch} out of range (have {c})"
            )));
        }
        data.extend_from_slice(&feat.data()[ch * plane..(ch + 1) * plane]);
    }
    let mut shape = feat.shape().to_vec();
    shape[0] = channels.len();
    Tensor::new(shape, data)
}

/// Mean l1 distance between a feature's pre-selection values and the anchor,
/// a cheap summary used by the separation diagnostics.
pub fn anchor_l1_distance(feat: &Tensor, zbar: &Tensor) -> f64 {
    feat.sub(zbar).norm_l1()
}

/// Convenience: per-sample features for `xs` produced by `gen` with the
/// hidden activation of each true latent as self-consistency reference.
pub fn true_hidden(gen: &GeneratorSpec, z: &Tensor) -> Result<Tensor> {
    hidden_activation(gen, z, gen.depth() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{toy_generator, Layer};
    use crate::linop::ConvSpec;

    fn example_generator() -> GeneratorSpec {
        let kernel = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        GeneratorSpec {
            latent_dim: 4,
            layers: vec![Layer::new(
                LinearLayer::Conv(ConvSpec::new(kernel).transposed()),
                ActivationKind::Identity,
            )
            .with_input_view(vec![1, 2, 2])],
        }
    }

    #[test]
    fn tanh_inversion_round_trips() {
        let x = Tensor::from_vec(vec![0.5f64.tanh()]);
        let o = invert_final_activation(&x, ActivationKind::Tanh, 1e-6).unwrap();
        assert!((o.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn saturated_tanh_is_clamped_finite() {
        let x = Tensor::from_vec(vec![1.0]);
        let o = invert_final_activation(&x, ActivationKind::Tanh, 1e-6).unwrap();
        // atanh(1 - delta) = ln((2 - delta) / delta) / 2
        let want = ((2.0 - 1e-6) / 1e-6f64).ln() / 2.0;
        assert!(o.data()[0].is_finite());
        assert!((o.data()[0] - want).abs() < 1e-9, "{} vs {want}", o.data()[0]);
        assert!((o.data()[0] - 7.254).abs() < 1e-3);
    }

    #[test]
    fn identity_inversion_is_identity() {
        let x = Tensor::from_vec(vec![-3.0, 0.0, 12.5]);
        let o = invert_final_activation(&x, ActivationKind::Identity, 1e-6).unwrap();
        assert_eq!(o.data(), x.data());
    }

    #[test]
    fn relu_inversion_is_rejected() {
        let x = Tensor::from_vec(vec![1.0]);
        let err = invert_final_activation(&x, ActivationKind::Relu, 1e-6).unwrap_err();
        assert!(matches!(err, Error::NonInvertibleActivation(_)));
    }

    #[test]
    fn worked_example_recovers_the_generating_input() {
        let gen = example_generator();
        let x = Tensor::new(
            vec![1, 3, 3],
            vec![0.0, 0.0, 1.0, 0.0, 4.0, 6.0, 4.0, 12.0, 9.0],
        )
        .unwrap();
        let zbar = Tensor::zeros(vec![1, 2, 2]);
        let cfg = FlipadConfig {
            lambda: 1e-8,
            ..FlipadConfig::default()
        };
        let feat = extract_features(&gen, &x, &cfg, &zbar).unwrap();
        let want = [0.0, 1.0, 2.0, 3.0];
        for (a, b) in feat.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn output_at_the_anchor_extracts_the_anchor() {
        let gen = example_generator();
        let zbar = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let (op, _) = final_layer_operator(&gen, zbar.shape()).unwrap();
        let x = op.apply(&zbar).unwrap();
        let cfg = FlipadConfig::default(); // lambda 5e-4
        let feat = extract_features(&gen, &x, &cfg, &zbar).unwrap();
        assert_eq!(feat.data(), zbar.data());
    }

    #[test]
    fn pooling_matches_hand_cases() {
        let feat = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let pooled = pool_features(&feat, (2, 2)).unwrap();
        assert_eq!(pooled.shape(), &[1, 1, 1]);
        assert_eq!(pooled.data(), &[4.0]);

        let constant = Tensor::new(vec![2, 4, 4], vec![0.7; 32]).unwrap();
        let pooled = pool_features(&constant, (2, 2)).unwrap();
        assert_eq!(pooled.shape(), &[2, 2, 2]);
        assert!(pooled.data().iter().all(|&v| v == 0.7));

        assert!(pool_features(&constant, (3, 2)).is_err());
    }

    #[test]
    fn channel_selection_tie_and_difference_rules() {
        let a = Tensor::zeros(vec![4, 2, 2]);
        let b = Tensor::zeros(vec![4, 2, 2]);
        // identical means: all ties -> first k indices
        assert_eq!(select_channels(&a, &b, 2).unwrap(), vec![0, 1]);

        // one differing channel comes first
        let mut b2 = b.clone();
        for i in 0..4 {
            b2.set(&[2, i / 2, i % 2], 5.0);
        }
        assert_eq!(select_channels(&a, &b2, 1).unwrap(), vec![2]);
        assert!(select_channels(&a, &b2, 9).is_err());
    }

    #[test]
    fn take_channels_subsets_in_order() {
        let feat = Tensor::new(vec![3, 1, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        let sub = take_channels(&feat, &[2, 0]).unwrap();
        assert_eq!(sub.shape(), &[2, 1, 2]);
        assert_eq!(sub.data(), &[20.0, 21.0, 0.0, 1.0]);
    }

    #[test]
    fn toy_generator_features_are_deterministic() {
        let gen = toy_generator(1, 3);
        let z = crate::generator::sample_latent(1, gen.latent_dim, 9)
            .reshape(vec![gen.latent_dim])
            .unwrap();
        let x = crate::generator::forward(&gen, &z).unwrap();
        let zbar = crate::generator::mean_activation(&gen, 64, 11).unwrap();
        let cfg = FlipadConfig {
            pool: Some((2, 2)),
            ..FlipadConfig::default()
        };
        let f1 = extract_features(&gen, &x, &cfg, &zbar).unwrap();
        let f2 = extract_features(&gen, &x, &cfg, &zbar).unwrap();
        for (a, b) in f1.data().iter().zip(f2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(f1.shape(), &[8, 4, 4]);
    }
}
