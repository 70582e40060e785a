//! Raw and frequency-domain baseline features.
//!
//! The raw baseline feeds (optionally downsampled) images straight to the
//! detector. The frequency baseline computes an orthonormal type-II 2D DCT
//! per channel and takes `log(|coefficient| + eps)`; the absolute value is
//! needed because DCT coefficients are signed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Settings for [`log_dct_features`].
#[derive(Debug, Clone)]
pub struct DctConfig {
    /// Stabilizer added inside the log.
    pub eps: f64,
    /// Optional center-crop applied before the transform (crops avoid
    /// distorting the spectrum, unlike resampling).
    pub crop: Option<(usize, usize)>,
}

impl Default for DctConfig {
    fn default() -> Self {
        Self {
            eps: 1e-10,
            crop: None,
        }
    }
}

fn split_channels(image: &Tensor, context: &'static str) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        [h, w] => Ok((1, *h, *w)),
        other => Err(Error::ShapeMismatch {
            context,
            expected: vec![3],
            actual: other.to_vec(),
        }),
    }
}

fn like_input(image: &Tensor, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
    let shape = if image.shape().len() == 2 {
        vec![h, w]
    } else {
        vec![c, h, w]
    };
    Tensor::new(shape, data).expect("volume consistent")
}

/// Nearest-neighbor downsample to `(h, w)`: target pixel `(i, j)` reads the
/// source at `(floor(i * H / h), floor(j * W / w))`.
pub fn downsample_nn(image: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (c, src_h, src_w) = split_channels(image, "downsample_nn")?;
    let (h, w) = target;
    if h == 0 || w == 0 || h > src_h || w > src_w {
        return Err(Error::InvalidConfig(format!(
            "downsample target {h}x{w} must be nonzero and <= source {src_h}x{src_w}"
        )));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            let sy = i * src_h / h;
            for j in 0..w {
                let sx = j * src_w / w;
                data.push(image.data()[(ch * src_h + sy) * src_w + sx]);
            }
        }
    }
    Ok(like_input(image, c, h, w, data))
}

/// Centered crop to `(h, w)` with upper-left bias on odd margins.
pub fn center_crop(image: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (c, src_h, src_w) = split_channels(image, "center_crop")?;
    let (h, w) = target;
    if h == 0 || w == 0 || h > src_h || w > src_w {
        return Err(Error::InvalidConfig(format!(
            "crop {h}x{w} must be nonzero and <= source {src_h}x{src_w}"
        )));
    }
    let oy = (src_h - h) / 2;
    let ox = (src_w - w) / 2;
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                data.push(image.data()[(ch * src_h + oy + i) * src_w + ox + j]);
            }
        }
    }
    Ok(like_input(image, c, h, w, data))
}

/// Orthonormal type-II DCT along one axis of a row-major `rows x cols` slice.
fn dct1d_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    // out[r][k] = a_k * sum_n data[r][n] * cos(pi (2n+1) k / (2 cols))
    let mut out = vec![0.0; rows * cols];
    let a0 = (1.0 / cols as f64).sqrt();
    let ak = (2.0 / cols as f64).sqrt();
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for k in 0..cols {
            let scale = if k == 0 { a0 } else { ak };
            let mut acc = 0.0;
            for (n, &v) in row.iter().enumerate() {
                acc += v * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64
                    / (2 * cols) as f64)
                    .cos();
            }
            out[r * cols + k] = scale * acc;
        }
    }
    out
}

/// Inverse of [`dct1d_rows`] (type-III with the same normalization).
fn idct1d_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    let a0 = (1.0 / cols as f64).sqrt();
    let ak = (2.0 / cols as f64).sqrt();
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for n in 0..cols {
            let mut acc = 0.0;
            for (k, &v) in row.iter().enumerate() {
                let scale = if k == 0 { a0 } else { ak };
                acc += scale
                    * v
                    * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * cols) as f64)
                        .cos();
            }
            out[r * cols + n] = acc;
        }
    }
    out
}

fn transpose_slice(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Orthonormal separable 2D DCT of one `H x W` channel.
pub fn dct2d(channel: &Tensor) -> Result<Tensor> {
    let (h, w) = match channel.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                context: "dct2d",
                expected: vec![2],
                actual: other.to_vec(),
            })
        }
    };
    let rowwise = dct1d_rows(channel.data(), h, w);
    let t = transpose_slice(&rowwise, h, w);
    let colwise = dct1d_rows(&t, w, h);
    Tensor::new(vec![h, w], transpose_slice(&colwise, w, h))
}

/// Inverse 2D DCT; exact round trip up to rounding since the transform is
/// orthonormal.
pub fn idct2d(coeffs: &Tensor) -> Result<Tensor> {
    let (h, w) = (coeffs.shape()[0], coeffs.shape()[1]);
    let rowwise = idct1d_rows(coeffs.data(), h, w);
    let t = transpose_slice(&rowwise, h, w);
    let colwise = idct1d_rows(&t, w, h);
    Tensor::new(vec![h, w], transpose_slice(&colwise, w, h))
}

/// Per-channel `log(|DCT| + eps)` features, with an optional center-crop
/// first.
pub fn log_dct_features(image: &Tensor, cfg: &DctConfig) -> Result<Tensor> {
    if cfg.eps <= 0.0 || cfg.eps.is_nan() {
        return Err(Error::InvalidConfig(format!("dct eps must be > 0, got {}", cfg.eps)));
    }
    let image = match cfg.crop {
        Some(target) => center_crop(image, target)?,
        None => image.clone(),
    };
    let (c, h, w) = split_channels(&image, "log_dct_features")?;
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = Tensor::new(
            vec![h, w],
            image.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
        )?;
        let coeffs = dct2d(&plane)?;
        data.extend(coeffs.data().iter().map(|v| (v.abs() + cfg.eps).ln()));
    }
    Ok(like_input(&image, c, h, w, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_block_constant_picks_block_values() {
        // 4x4 of 2x2 constant blocks -> the block values
        let img = Tensor::new(
            vec![4, 4],
            vec![
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ],
        )
        .unwrap();
        let got = downsample_nn(&img, (2, 2)).unwrap();
        assert_eq!(got.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn downsample_identity_at_matching_size() {
        let img = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let got = downsample_nn(&img, (3, 3)).unwrap();
        assert_eq!(got.data(), img.data());
        assert!(downsample_nn(&img, (4, 4)).is_err());
    }

    #[test]
    fn center_crop_cases() {
        let img = Tensor::new(vec![4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        assert_eq!(center_crop(&img, (4, 4)).unwrap().data(), img.data());
        // floor((4-2)/2) = 1 -> rows/cols {1, 2}
        let got = center_crop(&img, (2, 2)).unwrap();
        assert_eq!(got.data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(center_crop(&img, (5, 2)).is_err());
    }

    #[test]
    fn dct_of_constant_image_is_pure_dc() {
        let n = 6;
        let c = 0.37;
        let img = Tensor::new(vec![n, n], vec![c; n * n]).unwrap();
        let coeffs = dct2d(&img).unwrap();
        assert!((coeffs.at(&[0, 0]) - n as f64 * c).abs() < 1e-12);
        for i in 0..n {
            for j in 0..n {
                if (i, j) != (0, 0) {
                    assert!(coeffs.at(&[i, j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dct_preserves_energy_and_round_trips() {
        let mut rng = crate::rng::Prng::seed_from_u64(31);
        let img = rng.normal_tensor(vec![8, 8]);
        let coeffs = dct2d(&img).unwrap();
        assert!((coeffs.norm_l2() - img.norm_l2()).abs() < 1e-10);
        let back = idct2d(&coeffs).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn log_dct_of_zero_image_is_log_eps() {
        let img = Tensor::zeros(vec![1, 4, 4]);
        let feats = log_dct_features(&img, &DctConfig::default()).unwrap();
        let want = (1e-10f64).ln();
        assert!((want + 23.0259).abs() < 1e-3);
        assert!(feats.data().iter().all(|&v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn log_dct_of_constant_image() {
        let img = Tensor::new(vec![8, 8], vec![1.0; 64]).unwrap();
        let feats = log_dct_features(&img, &DctConfig::default()).unwrap();
        assert!((feats.at(&[0, 0]) - (8.0f64 + 1e-10).ln()).abs() < 1e-12);
        // off-DC coefficients are ~1e-15 rounding noise, which shifts the
        // log by about coef/eps ~ 1e-5
        let log_eps = (1e-10f64).ln();
        for (i, &v) in feats.data().iter().enumerate() {
            if i != 0 {
                assert!((v - log_eps).abs() < 1e-4, "coefficient {i} = {v}");
            }
        }
    }

    #[test]
    fn log_dct_scaling_shifts_by_log_ten() {
        let mut rng = crate::rng::Prng::seed_from_u64(5);
        let img = rng.normal_tensor(vec![1, 8, 8]);
        let f1 = log_dct_features(&img, &DctConfig::default()).unwrap();
        let f10 = log_dct_features(&img.scale(10.0), &DctConfig::default()).unwrap();
        let coeffs = dct2d(&Tensor::new(vec![8, 8], img.data().to_vec()).unwrap()).unwrap();
        // the log identity holds up to ~eps/|coef|
        for i in 0..64 {
            if coeffs.data()[i].abs() > 1e-3 {
                assert!(
                    (f10.data()[i] - f1.data()[i] - 10.0f64.ln()).abs() < 1e-6,
                    "coefficient {i}"
                );
            }
        }
    }

    #[test]
    fn crop_then_dct_path() {
        let mut rng = crate::rng::Prng::seed_from_u64(6);
        let img = rng.normal_tensor(vec![2, 8, 8]);
        let cfg = DctConfig {
            crop: Some((4, 4)),
            ..DctConfig::default()
        };
        let feats = log_dct_features(&img, &cfg).unwrap();
        assert_eq!(feats.shape(), &[2, 4, 4]);
        assert!(feats.all_finite());
    }
}
