//! Open-world adaptations of the classical attribution baselines.
//!
//! Fingerprinting averages high-pass noise residuals of a model's outputs
//! into a template and scores a query by the negative inner product of the
//! standardized pair. The residual here is `image - gaussian_blur(image)`
//! (5x5, sigma 1, reflect padding) rather than a full camera-noise
//! estimator; see the README for the trade-off.
//!
//! Inversion scores a query by the best reconstruction distance over several
//! independent gradient descents through the full generator.

use crate::error::{Error, Result};
use crate::generator::{forward, vjp, GeneratorSpec};
use crate::rng::{derive_seed, Prng};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Averaged residual template for one generator.
#[derive(Debug, Clone)]
pub struct Fingerprint {
    pub template: Tensor,
    pub n_samples: usize,
}

/// Settings for [`inversion_score`].
#[derive(Debug, Clone)]
pub struct InversionConfig {
    pub attempts: usize,
    pub steps: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            attempts: 10,
            steps: 1000,
            lr: 0.1,
            betas: (0.9, 0.999),
            seed: 0,
        }
    }
}

/// 5x5 gaussian kernel with sigma 1, normalized to sum 1.
fn blur_kernel() -> [[f64; 5]; 5] {
    let mut k = [[0.0; 5]; 5];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 2.0;
            let dx = j as f64 - 2.0;
            *v = (-(dy * dy + dx * dx) / 2.0).exp();
            total += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    k
}

/// Reflect an index into `[0, n)` (edge pixels duplicate).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_blur(image: &Tensor) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let k = blur_kernel();
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    let sy = reflect(y as isize + dy as isize - 2, h);
                    for (dx, kv) in row.iter().enumerate() {
                        let sx = reflect(x as isize + dx as isize - 2, w);
                        acc += kv * image.at(&[ch, sy, sx]);
                    }
                }
                out.set(&[ch, y, x], acc);
            }
        }
    }
    out
}

/// High-pass residual: `image - gaussian_blur(image)`.
pub fn residual(image: &Tensor) -> Tensor {
    image.sub(&gaussian_blur(image))
}

/// Mean residual over a set of samples.
pub fn build_fingerprint(samples: &[Tensor]) -> Result<Fingerprint> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("build_fingerprint needs samples"));
    }
    let mut acc = residual(&samples[0]);
    for s in &samples[1..] {
        acc = acc.add(&residual(s));
    }
    Ok(Fingerprint {
        template: acc.scale(1.0 / samples.len() as f64),
        n_samples: samples.len(),
    })
}

/// Subtract the mean and divide by the population standard deviation over
/// all entries.
fn standardize(t: &Tensor) -> Result<Vec<f64>> {
    let n = t.len() as f64;
    let mean = t.mean();
    let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::DegenerateInput("zero variance in standardization"));
    }
    let sd = var.sqrt();
    Ok(t.data().iter().map(|v| (v - mean) / sd).collect())
}

/// Negative inner product of the standardized fingerprint and query:
/// a query equal to the fingerprint scores `-D` (entry count), its negation
/// `+D`.
pub fn fingerprint_score(fingerprint: &Fingerprint, x: &Tensor) -> Result<f64> {
    if fingerprint.template.len() != x.len() {
        return Err(Error::ShapeMismatch {
            context: "fingerprint_score",
            expected: fingerprint.template.shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    let f = standardize(&fingerprint.template)?;
    let q = standardize(x)?;
    Ok(-f.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>())
}

/// Best reconstruction distance over independent Adam descents:
/// `min_attempts (1/D) * || x - G(z_hat) ||_2`. Attempt `i` starts from a
/// standard-normal latent seeded with `seed + i`'s derived stream; attempts
/// whose loss turns non-finite are discarded.
pub fn inversion_score(
    gen: &GeneratorSpec,
    x: &Tensor,
    cfg: &InversionConfig,
) -> Result<f64> {
    assert!(cfg.attempts >= 1 && cfg.steps >= 1);
    let d = x.len() as f64;
    let scores: Vec<Option<f64>> = (0..cfg.attempts)
        .into_par_iter()
        .map(|attempt| {
            let mut rng = Prng::seed_from_u64(derive_seed(cfg.seed, attempt as u64));
            let mut z = rng.normal_tensor(vec![gen.latent_dim]);
            let mut m = vec![0.0; z.len()];
            let mut v = vec![0.0; z.len()];
            let (b1, b2) = cfg.betas;
            for t in 1..=cfg.steps {
                let gx = forward(gen, &z).ok()?;
                let diff = gx.sub(x);
                let grad = vjp(gen, &z, &diff.scale(2.0)).ok()?;
                if !grad.all_finite() {
                    return None;
                }
                let bc1 = 1.0 - b1.powi(t as i32);
                let bc2 = 1.0 - b2.powi(t as i32);
                let zd = z.data_mut();
                for i in 0..zd.len() {
                    let g = grad.data()[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    zd[i] -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + 1e-8);
                }
            }
            let gx = forward(gen, &z).ok()?;
            let dist = gx.sub(x).norm_l2() / d;
            dist.is_finite().then_some(dist)
        })
        .collect();
    scores
        .into_iter()
        .flatten()
        .min_by(|a, b| a.partial_cmp(b).expect("finite scores"))
        .ok_or(Error::Divergence { iteration: 0 })
}
