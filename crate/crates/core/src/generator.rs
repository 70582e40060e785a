//! Toy deep generators: stacks of dense / (transposed-)convolution layers
//! with pointwise activations, latent sampling, Monte-Carlo mean-activation
//! estimation, reverse-mode gradients, and weight persistence.
//!
//! Generators map a standard-normal latent through `L` layers,
//! `x = act_L(G_L(act_{L-1}(G_{L-1}(...))))`. The attribution pipeline only
//! ever inverts the final layer, so hidden layers may use any activation
//! while the final one must stay invertible (tanh / sigmoid / identity).

use crate::error::{Error, Result};
use crate::linop::{conv_adjoint_for, conv_apply, ConvSpec};
use crate::rng::Prng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Pointwise activation function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "slope", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Identity,
}

impl ActivationKind {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationKind::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`; kinks use the left branch, so
    /// `relu'(0) = 0`.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    *s
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn is_invertible(&self) -> bool {
        matches!(
            self,
            ActivationKind::Tanh | ActivationKind::Sigmoid | ActivationKind::Identity
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu(_) => "leaky_relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Identity => "identity",
        }
    }
}

/// The linear part of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearLayer {
    Conv(ConvSpec),
    Dense {
        /// Weight matrix `[out, in]`.
        weight: Tensor,
        bias: Option<Tensor>,
        /// Shape the flat output is viewed as (e.g. `[16, 4, 4]`).
        out_shape: Vec<usize>,
    },
}

impl LinearLayer {
    fn apply(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            LinearLayer::Conv(spec) => conv_apply(spec, input),
            LinearLayer::Dense {
                weight,
                bias,
                out_shape,
            } => {
                let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
                if input.len() != in_dim {
                    return Err(Error::ShapeMismatch {
                        context: "dense layer input",
                        expected: vec![in_dim],
                        actual: input.shape().to_vec(),
                    });
                }
                let mut y = vec![0.0; out_dim];
                for (r, yr) in y.iter_mut().enumerate() {
                    let row = &weight.data()[r * in_dim..(r + 1) * in_dim];
                    *yr = row.iter().zip(input.data()).map(|(a, b)| a * b).sum();
                    if let Some(b) = bias {
                        *yr += b.data()[r];
                    }
                }
                Tensor::new(out_shape.clone(), y)
            }
        }
    }

    /// Transpose of the linear part; bias ignored.
    fn adjoint(&self, cotangent: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
        match self {
            LinearLayer::Conv(spec) => {
                conv_adjoint_for(spec, cotangent, input_shape)
            }
            LinearLayer::Dense { weight, .. } => {
                let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
                debug_assert_eq!(cotangent.len(), out_dim);
                let mut g = vec![0.0; in_dim];
                for r in 0..out_dim {
                    let row = &weight.data()[r * in_dim..(r + 1) * in_dim];
                    let c = cotangent.data()[r];
                    for (gi, a) in g.iter_mut().zip(row) {
                        *gi += c * a;
                    }
                }
                Tensor::new(input_shape.to_vec(), g)
            }
        }
    }
}

/// One generator layer: a linear map followed by a pointwise activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub map: LinearLayer,
    pub activation: ActivationKind,
    /// Reshape applied to the incoming tensor before the map, e.g. viewing a
    /// flat latent as `[1, 2, 2]` for a convolutional first layer.
    pub input_view: Option<Vec<usize>>,
}

impl Layer {
    pub fn new(map: LinearLayer, activation: ActivationKind) -> Self {
        Self {
            map,
            activation,
            input_view: None,
        }
    }

    pub fn with_input_view(mut self, view: Vec<usize>) -> Self {
        self.input_view = Some(view);
        self
    }

    fn viewed_input(&self, a: Tensor) -> Result<Tensor> {
        match &self.input_view {
            Some(view) => a.reshape(view.clone()),
            None => Ok(a),
        }
    }
}

/// A full toy generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub layers: Vec<Layer>,
    pub latent_dim: usize,
}

impl GeneratorSpec {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn final_layer(&self) -> &Layer {
        self.layers.last().expect("generator has layers")
    }

    /// Output shape for a single latent.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let z = Tensor::zeros(vec![self.latent_dim]);
        Ok(forward(self, &z)?.shape().to_vec())
    }
}

/// Run the generator on one latent vector of shape `[latent_dim]`.
pub fn forward(gen: &GeneratorSpec, z: &Tensor) -> Result<Tensor> {
    if z.len() != gen.latent_dim {
        return Err(Error::ShapeMismatch {
            context: "generator latent",
            expected: vec![gen.latent_dim],
            actual: z.shape().to_vec(),
        });
    }
    let mut a = z.clone();
    for (i, layer) in gen.layers.iter().enumerate() {
        let wrap = |e: Error| Error::Layer {
            index: i,
            source: Box::new(e),
        };
        a = layer.viewed_input(a).map_err(wrap)?;
        let pre = layer.map.apply(&a).map_err(wrap)?;
        a = pre.map(|v| layer.activation.apply(v));
    }
    Ok(a)
}

/// Run the generator on a batch of latents, shape `[n, latent_dim]`.
/// Row `i` of the result equals `forward` on row `i` of the batch.
pub fn forward_batch(gen: &GeneratorSpec, batch: &Tensor) -> Result<Vec<Tensor>> {
    if batch.shape().len() != 2 || batch.shape()[1] != gen.latent_dim {
        return Err(Error::ShapeMismatch {
            context: "generator latent batch",
            expected: vec![0, gen.latent_dim],
            actual: batch.shape().to_vec(),
        });
    }
    let d = gen.latent_dim;
    (0..batch.shape()[0])
        .map(|i| {
            let z = Tensor::new(vec![d], batch.data()[i * d..(i + 1) * d].to_vec())?;
            forward(gen, &z)
        })
        .collect()
}

/// Activation entering layer `depth + 1`: `act_depth(G_depth(...))`.
/// Depth 0 is the latent itself (relevant for single-layer generators).
pub fn hidden_activation(gen: &GeneratorSpec, z: &Tensor, depth: usize) -> Result<Tensor> {
    if depth >= gen.depth() {
        return Err(Error::InvalidConfig(format!(
            "hidden depth {depth} out of range for {}-layer generator",
            gen.depth()
        )));
    }
    let mut a = z.clone();
    for (i, layer) in gen.layers.iter().take(depth).enumerate() {
        let wrap = |e: Error| Error::Layer {
            index: i,
            source: Box::new(e),
        };
        a = layer.viewed_input(a).map_err(wrap)?;
        let pre = layer.map.apply(&a).map_err(wrap)?;
        a = pre.map(|v| layer.activation.apply(v));
    }
    Ok(a)
}

/// Monte-Carlo estimate of the expected pre-final activation:
/// the mean of `hidden_activation` at depth `L - 1` over `n` standard-normal
/// latents. Deterministic given the seed.
pub fn mean_activation(gen: &GeneratorSpec, n: usize, seed: u64) -> Result<Tensor> {
    assert!(n >= 1, "n must be >= 1");
    let mut rng = Prng::seed_from_u64(seed);
    let depth = gen.depth() - 1;
    let mut acc: Option<Tensor> = None;
    for _ in 0..n {
        let z = rng.normal_tensor(vec![gen.latent_dim]);
        let h = hidden_activation(gen, &z, depth)?;
        acc = Some(match acc {
            None => h,
            Some(a) => a.add(&h),
        });
    }
    Ok(acc.expect("n >= 1").scale(1.0 / n as f64))
}

/// Reverse-mode vector-Jacobian product of `forward` at `z`.
pub fn vjp(gen: &GeneratorSpec, z: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
    // forward tape: layer inputs (after any view) and pre-activations
    let mut inputs = Vec::with_capacity(gen.depth());
    let mut pres = Vec::with_capacity(gen.depth());
    let mut a = z.clone();
    for (i, layer) in gen.layers.iter().enumerate() {
        let wrap = |e: Error| Error::Layer {
            index: i,
            source: Box::new(e),
        };
        a = layer.viewed_input(a).map_err(wrap)?;
        let pre = layer.map.apply(&a).map_err(wrap)?;
        inputs.push(a);
        a = pre.map(|v| layer.activation.apply(v));
        pres.push(pre);
    }
    if cotangent.shape() != a.shape() {
        return Err(Error::ShapeMismatch {
            context: "vjp cotangent",
            expected: a.shape().to_vec(),
            actual: cotangent.shape().to_vec(),
        });
    }
    let mut g = cotangent.clone();
    for (i, layer) in gen.layers.iter().enumerate().rev() {
        let pre = &pres[i];
        let mut gated = Vec::with_capacity(g.len());
        for (gv, pv) in g.data().iter().zip(pre.data()) {
            gated.push(gv * layer.activation.derivative(*pv));
        }
        let gated = Tensor::new(pre.shape().to_vec(), gated)?;
        g = layer.map.adjoint(&gated, inputs[i].shape()).map_err(|e| Error::Layer {
            index: i,
            source: Box::new(e),
        })?;
    }
    // undo any first-layer view so the gradient matches the latent's shape
    g.reshape(z.shape().to_vec())
}

/// `n` standard-normal latents as an `[n, d0]` tensor; deterministic per seed.
pub fn sample_latent(n: usize, d0: usize, seed: u64) -> Tensor {
    assert!(n >= 1 && d0 >= 1);
    let mut rng = Prng::seed_from_u64(seed);
    rng.normal_tensor(vec![n, d0])
}

// ---------------------------------------------------------------------------
// Weight persistence: a directory of TNSR tensors plus a JSON manifest.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerManifest {
    kind: String,
    activation: ActivationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    transposed: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dilation: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_shape: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    input_view: Option<Vec<usize>>,
    weights: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorManifest {
    latent_dim: usize,
    layers: Vec<LayerManifest>,
}

/// Write a generator as `manifest.json` + one TNSR file per tensor.
pub fn save_weights(gen: &GeneratorSpec, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (i, layer) in gen.layers.iter().enumerate() {
        let weights_name = format!("layer{i}_weights.tnsr");
        let bias_name = format!("layer{i}_bias.tnsr");
        let m = match &layer.map {
            LinearLayer::Conv(spec) => {
                spec.kernel.save(dir.join(&weights_name))?;
                let bias = match &spec.bias {
                    Some(b) => {
                        b.save(dir.join(&bias_name))?;
                        Some(bias_name)
                    }
                    None => None,
                };
                LayerManifest {
                    kind: "conv".into(),
                    activation: layer.activation,
                    transposed: Some(spec.transposed),
                    stride: Some(spec.stride),
                    padding: Some(spec.padding),
                    dilation: Some(spec.dilation),
                    out_shape: None,
                    input_view: layer.input_view.clone(),
                    weights: weights_name,
                    bias,
                }
            }
            LinearLayer::Dense {
                weight,
                bias,
                out_shape,
            } => {
                weight.save(dir.join(&weights_name))?;
                let bias = match bias {
                    Some(b) => {
                        b.save(dir.join(&bias_name))?;
                        Some(bias_name)
                    }
                    None => None,
                };
                LayerManifest {
                    kind: "dense".into(),
                    activation: layer.activation,
                    transposed: None,
                    stride: None,
                    padding: None,
                    dilation: None,
                    out_shape: Some(out_shape.clone()),
                    input_view: layer.input_view.clone(),
                    weights: weights_name,
                    bias,
                }
            }
        };
        layers.push(m);
    }
    let manifest = GeneratorManifest {
        latent_dim: gen.latent_dim,
        layers,
    };
    let file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
    Ok(())
}

/// Load a generator previously written by [`save_weights`].
pub fn load_weights(dir: impl AsRef<Path>) -> Result<GeneratorSpec> {
    let dir = dir.as_ref();
    let file = std::fs::File::open(dir.join("manifest.json"))?;
    let manifest: GeneratorManifest = serde_json::from_reader(std::io::BufReader::new(file))?;
    let mut layers = Vec::new();
    for (i, m) in manifest.layers.iter().enumerate() {
        let weights = Tensor::load(dir.join(&m.weights))?;
        let bias = match &m.bias {
            Some(name) => Some(Tensor::load(dir.join(name))?),
            None => None,
        };
        let map = match m.kind.as_str() {
            "conv" => {
                let mut spec = ConvSpec::new(weights)
                    .with_stride(m.stride.unwrap_or((1, 1)))
                    .with_padding(m.padding.unwrap_or((0, 0)))
                    .with_dilation(m.dilation.unwrap_or((1, 1)));
                if m.transposed.unwrap_or(false) {
                    spec = spec.transposed();
                }
                if let Some(b) = bias {
                    spec = spec.with_bias(b);
                }
                LinearLayer::Conv(spec)
            }
            "dense" => {
                let out_shape = m
                    .out_shape
                    .clone()
                    .unwrap_or_else(|| vec![weights.shape()[0]]);
                LinearLayer::Dense {
                    weight: weights,
                    bias,
                    out_shape,
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "layer {i}: unknown kind '{other}'"
                )))
            }
        };
        layers.push(Layer {
            map,
            activation: m.activation,
            input_view: m.input_view.clone(),
        });
    }
    Ok(GeneratorSpec {
        layers,
        latent_dim: manifest.latent_dim,
    })
}

// ---------------------------------------------------------------------------
// Toy generator template for synthetic experiments.
// ---------------------------------------------------------------------------

/// Small DCGAN-flavored template: latent 32 -> dense 16x4x4 ->
/// tconv(16 -> 8, k4, s2, p1, relu) -> tconv(8 -> out_channels, k4, s2, p1, tanh),
/// output `[out_channels, 16, 16]`. Weights are seed-derived normals scaled
/// by 1/sqrt(fan_in); the final layer carries no bias.
pub fn toy_generator(out_channels: usize, seed: u64) -> GeneratorSpec {
    let mut rng = Prng::seed_from_u64(seed);
    let latent_dim = 32;
    let hidden = 16 * 4 * 4;

    let dense_sd = 1.0 / (latent_dim as f64).sqrt();
    let weight = Tensor::new(
        vec![hidden, latent_dim],
        (0..hidden * latent_dim)
            .map(|_| rng.normal() * dense_sd)
            .collect(),
    )
    .expect("shape consistent");
    let dense_bias = Tensor::from_vec((0..hidden).map(|_| rng.normal() * 0.05).collect());

    let conv1_sd = 1.0 / ((16 * 4 * 4) as f64).sqrt();
    let kernel1 = Tensor::new(
        vec![8, 16, 4, 4],
        (0..8 * 16 * 16).map(|_| rng.normal() * conv1_sd).collect(),
    )
    .expect("shape consistent");
    let conv1_bias = Tensor::from_vec((0..8).map(|_| rng.normal() * 0.05).collect());

    let conv2_sd = 1.0 / ((8 * 4 * 4) as f64).sqrt();
    let kernel2 = Tensor::new(
        vec![out_channels, 8, 4, 4],
        (0..out_channels * 8 * 16)
            .map(|_| rng.normal() * conv2_sd)
            .collect(),
    )
    .expect("shape consistent");

    GeneratorSpec {
        latent_dim,
        layers: vec![
            Layer::new(
                LinearLayer::Dense {
                    weight,
                    bias: Some(dense_bias),
                    out_shape: vec![16, 4, 4],
                },
                ActivationKind::Identity,
            ),
            Layer::new(
                LinearLayer::Conv(
                    ConvSpec::new(kernel1)
                        .with_bias(conv1_bias)
                        .with_stride((2, 2))
                        .with_padding((1, 1))
                        .transposed(),
                ),
                ActivationKind::Relu,
            ),
            Layer::new(
                LinearLayer::Conv(
                    ConvSpec::new(kernel2)
                        .with_stride((2, 2))
                        .with_padding((1, 1))
                        .transposed(),
                ),
                ActivationKind::Tanh,
            ),
        ],
    }
}
