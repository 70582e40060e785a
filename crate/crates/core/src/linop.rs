//! Matrix-free 2D convolution operators, their adjoints, and dense views.
//!
//! A [`ConvSpec`] describes one (possibly transposed) 2D convolution with
//! channels, stride, padding, and dilation. [`conv_apply`] and
//! [`conv_adjoint`] run it without ever forming a matrix;
//! [`materialize_matrix`] builds the equivalent dense matrix by the
//! independent banded-Toeplitz construction (delete rows for stride and
//! window conformality, delete columns for padding), so the two paths can
//! check each other.
//!
//! Padding admits two equivalent dense views: zero-extend the input and keep
//! all columns, or keep the input and delete the padding columns. The
//! materialization here uses the column-deletion view; `conv_apply` reads
//! out-of-range taps as zero, which is the same map.
//!
//! Non-transposed specs require conforming input sizes (the sliding windows
//! must tile the padded input exactly, i.e. `(H + 2p - d*(k-1) - 1) % s == 0`),
//! which makes the adjoint's output shape well defined from the cotangent
//! alone.

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Entry budget for dense materialization.
pub const MATERIALIZE_MAX_ENTRIES: usize = 1 << 22;

/// Parametrization of one 2D (transposed) convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    /// Kernel weights, shape `[out_channels, in_channels, kH, kW]`.
    pub kernel: Tensor,
    /// Optional per-output-channel bias, shape `[out_channels]`.
    pub bias: Option<Tensor>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub transposed: bool,
}

impl ConvSpec {
    pub fn new(kernel: Tensor) -> Self {
        Self {
            kernel,
            bias: None,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            transposed: false,
        }
    }

    pub fn with_bias(mut self, bias: Tensor) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_stride(mut self, s: (usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn with_padding(mut self, p: (usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn with_dilation(mut self, d: (usize, usize)) -> Self {
        self.dilation = d;
        self
    }

    pub fn transposed(mut self) -> Self {
        self.transposed = true;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    /// Output shape `[out_c, oh, ow]` for an input of shape `[in_c, h, w]`.
    pub fn output_shape(&self, in_shape: &[usize]) -> Result<[usize; 3]> {
        let [c, h, w] = expect_chw(in_shape, "ConvSpec::output_shape")?;
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                context: "ConvSpec::output_shape (channels)",
                expected: vec![self.in_channels()],
                actual: vec![c],
            });
        }
        let (kh, kw) = self.kernel_hw();
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let (dh, dw) = self.dilation;
        let (oh, ow) = if self.transposed {
            let oh = (h - 1) * sh + dh * (kh - 1) + 1;
            let ow = (w - 1) * sw + dw * (kw - 1) + 1;
            if oh < 2 * ph + 1 || ow < 2 * pw + 1 {
                return Err(Error::ShapeMismatch {
                    context: "transposed output smaller than padding trim",
                    expected: vec![2 * ph + 1, 2 * pw + 1],
                    actual: vec![oh, ow],
                });
            }
            (oh - 2 * ph, ow - 2 * pw)
        } else {
            // floor semantics: a window anchor not reachable by the stride
            // is dropped (a deleted row in the dense view)
            let span_h = h + 2 * ph;
            let span_w = w + 2 * pw;
            let win_h = dh * (kh - 1) + 1;
            let win_w = dw * (kw - 1) + 1;
            if span_h < win_h || span_w < win_w {
                return Err(Error::ShapeMismatch {
                    context: "input smaller than kernel window",
                    expected: vec![win_h, win_w],
                    actual: vec![span_h, span_w],
                });
            }
            ((span_h - win_h) / sh + 1, (span_w - win_w) / sw + 1)
        };
        Ok([self.out_channels(), oh, ow])
    }

    /// Smallest input shape `[in_c, h, w]` producing an output of shape
    /// `[out_c, oh, ow]`. With floor semantics a larger input can map to the
    /// same output (trailing rows under a dangling stride anchor); adjoints
    /// against such inputs must be taken with the input shape made explicit
    /// ([`conv_adjoint_for`]).
    pub fn input_shape(&self, out_shape: &[usize]) -> Result<[usize; 3]> {
        let [c, oh, ow] = expect_chw(out_shape, "ConvSpec::input_shape")?;
        if c != self.out_channels() {
            return Err(Error::ShapeMismatch {
                context: "ConvSpec::input_shape (channels)",
                expected: vec![self.out_channels()],
                actual: vec![c],
            });
        }
        let (kh, kw) = self.kernel_hw();
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let (dh, dw) = self.dilation;
        let (h, w) = if self.transposed {
            let span_h = oh + 2 * ph;
            let span_w = ow + 2 * pw;
            let win_h = dh * (kh - 1) + 1;
            let win_w = dw * (kw - 1) + 1;
            if span_h < win_h || span_w < win_w || (span_h - win_h) % sh != 0 || (span_w - win_w) % sw != 0 {
                return Err(Error::ShapeMismatch {
                    context: "cotangent shape not producible by this transposed conv",
                    expected: vec![win_h, win_w],
                    actual: vec![span_h, span_w],
                });
            }
            ((span_h - win_h) / sh + 1, (span_w - win_w) / sw + 1)
        } else {
            let full_h = (oh - 1) * sh + dh * (kh - 1) + 1;
            let full_w = (ow - 1) * sw + dw * (kw - 1) + 1;
            if full_h < 2 * ph + 1 || full_w < 2 * pw + 1 {
                return Err(Error::ShapeMismatch {
                    context: "cotangent smaller than padding trim",
                    expected: vec![2 * ph + 1, 2 * pw + 1],
                    actual: vec![full_h, full_w],
                });
            }
            (full_h - 2 * ph, full_w - 2 * pw)
        };
        Ok([self.in_channels(), h, w])
    }
}

/// Borrow `t` if its shape already matches, otherwise reshape a copy of
/// matching length.
fn conform<'a>(
    t: &'a Tensor,
    shape: &[usize; 3],
    context: &'static str,
) -> Result<std::borrow::Cow<'a, Tensor>> {
    if t.shape() == shape {
        return Ok(std::borrow::Cow::Borrowed(t));
    }
    if t.len() == shape.iter().product::<usize>() {
        return Ok(std::borrow::Cow::Owned(
            t.clone().reshape(shape.to_vec()).expect("length checked"),
        ));
    }
    Err(Error::ShapeMismatch {
        context,
        expected: shape.to_vec(),
        actual: t.shape().to_vec(),
    })
}

fn expect_chw(shape: &[usize], context: &'static str) -> Result<[usize; 3]> {
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![3],
            actual: shape.to_vec(),
        });
    }
    Ok([shape[0], shape[1], shape[2]])
}

/// Kernel accessor that optionally swaps the channel axes; the adjoint of a
/// convolution uses the same weights with producer/consumer roles exchanged.
/// Indexing is flattened: `k[b, a] = data[b * stride_b + a * stride_a + ...]`.
struct KernelView<'a> {
    data: &'a [f64],
    stride_b: usize,
    stride_a: usize,
}

impl<'a> KernelView<'a> {
    fn new(kernel: &'a Tensor, swap: bool) -> Self {
        let s = kernel.shape();
        let (ax0, ax1) = (s[1] * s[2] * s[3], s[2] * s[3]);
        let (stride_b, stride_a) = if swap { (ax1, ax0) } else { (ax0, ax1) };
        Self {
            data: kernel.data(),
            stride_b,
            stride_a,
        }
    }
}

struct Geometry {
    stride: (usize, usize),
    padding: (usize, usize),
    dilation: (usize, usize),
    khw: (usize, usize),
}

/// out[b, oy, ox] = sum_{a, ky, kx} input[a, oy*s - p + ky*d, ...] * k(b, a, ky, kx)
/// with out-of-range reads treated as zero.
fn gather(input: &Tensor, k: &KernelView, g: &Geometry, out_shape: [usize; 3]) -> Tensor {
    let [in_c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let [out_c, oh, ow] = out_shape;
    let (kh, kw) = g.khw;
    let x = input.data();
    let mut out = vec![0.0; out_c * oh * ow];
    for b in 0..out_c {
        let k_b = b * k.stride_b;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for a in 0..in_c {
                    let k_ba = k_b + a * k.stride_a;
                    let x_a = a * h * w;
                    for ky in 0..kh {
                        let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize
                            - g.padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = x_a + iy as usize * w;
                        let k_row = k_ba + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize
                                - g.padding.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[x_row + ix as usize] * k.data[k_row + kx];
                        }
                    }
                }
                out[(b * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![out_c, oh, ow], out).expect("volume consistent")
}

/// out[b, iy*s - p + ky*d, ...] += input[a, iy, ix] * k(b, a, ky, kx)
/// with out-of-range writes dropped.
fn scatter(input: &Tensor, k: &KernelView, g: &Geometry, out_shape: [usize; 3]) -> Tensor {
    let [in_c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2]];
    let [out_c, oh, ow] = out_shape;
    let (kh, kw) = g.khw;
    let x = input.data();
    let mut out = vec![0.0; out_c * oh * ow];
    for a in 0..in_c {
        let k_a = a * k.stride_a;
        for iy in 0..h {
            for ix in 0..w {
                let v = x[(a * h + iy) * w + ix];
                if v == 0.0 {
                    continue;
                }
                for b in 0..out_c {
                    let k_ab = k_a + b * k.stride_b;
                    let o_b = b * oh * ow;
                    for ky in 0..kh {
                        let ty = (iy * g.stride.0 + ky * g.dilation.0) as isize
                            - g.padding.0 as isize;
                        if ty < 0 || ty >= oh as isize {
                            continue;
                        }
                        let o_row = o_b + ty as usize * ow;
                        let k_row = k_ab + ky * kw;
                        for kx in 0..kw {
                            let tx = (ix * g.stride.1 + kx * g.dilation.1) as isize
                                - g.padding.1 as isize;
                            if tx < 0 || tx >= ow as isize {
                                continue;
                            }
                            out[o_row + tx as usize] += v * k.data[k_row + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![out_c, oh, ow], out).expect("volume consistent")
}

/// Apply the convolution to `input` of shape `[in_c, h, w]`, adding bias when present.
pub fn conv_apply(spec: &ConvSpec, input: &Tensor) -> Result<Tensor> {
    let out_shape = spec.output_shape(input.shape())?;
    let mut out = apply_linear(spec, input, out_shape);
    if let Some(bias) = &spec.bias {
        if bias.shape() != [spec.out_channels()] {
            return Err(Error::ShapeMismatch {
                context: "conv_apply bias",
                expected: vec![spec.out_channels()],
                actual: bias.shape().to_vec(),
            });
        }
        let plane = out_shape[1] * out_shape[2];
        for c in 0..out_shape[0] {
            let b = bias.data()[c];
            for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
                *v += b;
            }
        }
    }
    Ok(out)
}

fn geometry(spec: &ConvSpec) -> Geometry {
    Geometry {
        stride: spec.stride,
        padding: spec.padding,
        dilation: spec.dilation,
        khw: spec.kernel_hw(),
    }
}

/// The strictly linear part of the map (bias excluded).
fn apply_linear(spec: &ConvSpec, input: &Tensor, out_shape: [usize; 3]) -> Tensor {
    let k = KernelView::new(&spec.kernel, false);
    let g = geometry(spec);
    if spec.transposed {
        scatter(input, &k, &g, out_shape)
    } else {
        gather(input, &k, &g, out_shape)
    }
}

/// Adjoint of the linear map: `conv_adjoint(s, y) = G^T y`. Bias is ignored.
///
/// The input space is taken to be the smallest one producing the cotangent's
/// shape; use [`conv_adjoint_for`] when the operator was bound to a larger
/// (floor-semantics) input.
pub fn conv_adjoint(spec: &ConvSpec, cotangent: &Tensor) -> Result<Tensor> {
    let in_shape = spec.input_shape(cotangent.shape())?;
    conv_adjoint_for(spec, cotangent, &in_shape)
}

/// Adjoint against an explicitly declared input shape.
pub fn conv_adjoint_for(
    spec: &ConvSpec,
    cotangent: &Tensor,
    in_shape: &[usize],
) -> Result<Tensor> {
    let in_shape = expect_chw(in_shape, "conv_adjoint_for")?;
    let expected_out = spec.output_shape(&in_shape)?;
    if cotangent.shape() != expected_out {
        return Err(Error::ShapeMismatch {
            context: "conv_adjoint_for cotangent",
            expected: expected_out.to_vec(),
            actual: cotangent.shape().to_vec(),
        });
    }
    let k = KernelView::new(&spec.kernel, true);
    let g = geometry(spec);
    Ok(if spec.transposed {
        gather(cotangent, &k, &g, in_shape)
    } else {
        scatter(cotangent, &k, &g, in_shape)
    })
}

/// Dense row-major matrix; the materialized view of a linear operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec length mismatch");
        self.data
            .chunks_exact(self.cols.max(1))
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "matvec_t length mismatch");
        let mut x = vec![0.0; self.cols];
        for (row, &yr) in self.data.chunks_exact(self.cols.max(1)).zip(y) {
            for (xi, a) in x.iter_mut().zip(row) {
                *xi += yr * a;
            }
        }
        x
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.at(r, c));
            }
        }
        t
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Dense matrix `M` with `M * vec(z) == vec(conv_apply(spec, z))`, bias excluded.
///
/// Built by the banded-Toeplitz route: enumerate conformal stride-1 window
/// anchors over the zero-padded input, keep every stride-th row, and keep
/// only the columns that fall inside the unpadded region. Transposed specs
/// materialize the non-transposed twin (channel axes swapped) and transpose.
pub fn materialize_matrix(spec: &ConvSpec, in_shape: &[usize]) -> Result<DenseMatrix> {
    let out_shape = spec.output_shape(in_shape)?;
    let rows: usize = out_shape.iter().product();
    let cols: usize = in_shape.iter().product();
    if rows.saturating_mul(cols) > MATERIALIZE_MAX_ENTRIES {
        return Err(Error::SizeGuard {
            rows,
            cols,
            max_entries: MATERIALIZE_MAX_ENTRIES,
        });
    }
    if spec.transposed {
        let twin = ConvSpec {
            kernel: swap_channel_axes(&spec.kernel),
            bias: None,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            transposed: false,
        };
        let m = materialize_forward(&twin, &[out_shape[0], out_shape[1], out_shape[2]]);
        Ok(m.transpose())
    } else {
        Ok(materialize_forward(spec, in_shape))
    }
}

fn swap_channel_axes(kernel: &Tensor) -> Tensor {
    let s = kernel.shape();
    let (oc, ic, kh, kw) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(vec![ic, oc, kh, kw]);
    for a in 0..oc {
        for b in 0..ic {
            for y in 0..kh {
                for x in 0..kw {
                    out.set(&[b, a, y, x], kernel.at(&[a, b, y, x]));
                }
            }
        }
    }
    out
}

fn materialize_forward(spec: &ConvSpec, in_shape: &[usize]) -> DenseMatrix {
    let [in_c, h, w] = [in_shape[0], in_shape[1], in_shape[2]];
    let out = spec
        .output_shape(in_shape)
        .expect("validated by materialize_matrix");
    let [out_c, oh, ow] = out;
    let (kh, kw) = spec.kernel_hw();
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let mut m = DenseMatrix::zeros(out_c * oh * ow, in_c * h * w);
    // Conformal stride-1 anchor grid over the padded input; stride keeps
    // every (sh, sw)-th anchor, padding deletes columns outside the real
    // region.
    for co in 0..out_c {
        for oy in 0..oh {
            let u = oy * sh; // padded-row anchor after row deletion
            for ox in 0..ow {
                let v = ox * sw;
                let row = (co * oh + oy) * ow + ox;
                for ci in 0..in_c {
                    for ky in 0..kh {
                        let py = u + ky * dh;
                        if py < ph || py >= ph + h {
                            continue; // deleted padding column
                        }
                        for kx in 0..kw {
                            let px = v + kx * dw;
                            if px < pw || px >= pw + w {
                                continue;
                            }
                            let col = (ci * h + (py - ph)) * w + (px - pw);
                            let entry = spec.kernel.at(&[co, ci, ky, kx]);
                            m.set(row, col, m.at(row, col) + entry);
                        }
                    }
                }
            }
        }
    }
    m
}

/// Fixed linear map stored as compressed sparse rows; the solver-facing form
/// of a convolution bound to one input shape.
#[derive(Debug, Clone)]
struct SparseMap {
    rows: usize,
    cols: usize,
    row_ptr: Vec<u32>,
    col: Vec<u32>,
    val: Vec<f64>,
}

impl SparseMap {
    /// Build from (row, col, weight) triples in any order.
    fn from_entries(rows: usize, cols: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        let mut row_ptr = vec![0u32; rows + 1];
        for &(r, _, _) in &entries {
            row_ptr[r + 1] += 1;
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut col = vec![0u32; entries.len()];
        let mut val = vec![0.0; entries.len()];
        let mut cursor = row_ptr.clone();
        for (r, c, v) in entries {
            let at = cursor[r] as usize;
            col[at] = c as u32;
            val[at] = v;
            cursor[r] += 1;
        }
        Self {
            rows,
            cols,
            row_ptr,
            col,
            val,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let lo = self.row_ptr[r] as usize;
            let hi = self.row_ptr[r + 1] as usize;
            let mut acc = 0.0;
            for i in lo..hi {
                acc += self.val[i] * x[self.col[i] as usize];
            }
            *o = acc;
        }
        out
    }
}

/// Precomputed apply/adjoint tables for one conv operator. The two tables
/// come from independent enumerations (forward conv arithmetic vs the
/// swapped-kernel adjoint arithmetic), so adjoint-identity tests on the
/// operator still exercise a real derivation rather than a transpose of the
/// same data.
#[doc(hidden)]
#[derive(Debug, Clone)]
pub struct ConvCache {
    forward: SparseMap,
    adjoint: SparseMap,
}

const CACHE_MAX_ENTRIES: usize = 1 << 24;

fn gather_entries(
    in_shape: [usize; 3],
    out_shape: [usize; 3],
    k: &KernelView,
    g: &Geometry,
    emit: &mut impl FnMut(usize, usize, f64),
) {
    let [in_c, h, w] = in_shape;
    let [out_c, oh, ow] = out_shape;
    let (kh, kw) = g.khw;
    for b in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let out_idx = (b * oh + oy) * ow + ox;
                for a in 0..in_c {
                    for ky in 0..kh {
                        let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize
                            - g.padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize
                                - g.padding.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_idx = (a * h + iy as usize) * w + ix as usize;
                            emit(
                                out_idx,
                                in_idx,
                                k.data[b * k.stride_b + a * k.stride_a + ky * kw + kx],
                            );
                        }
                    }
                }
            }
        }
    }
}

fn scatter_entries(
    in_shape: [usize; 3],
    out_shape: [usize; 3],
    k: &KernelView,
    g: &Geometry,
    emit: &mut impl FnMut(usize, usize, f64),
) {
    let [in_c, h, w] = in_shape;
    let [out_c, oh, ow] = out_shape;
    let (kh, kw) = g.khw;
    // grouped by output row so CSR construction stays a single pass
    for b in 0..out_c {
        for a in 0..in_c {
            for iy in 0..h {
                for ix in 0..w {
                    let in_idx = (a * h + iy) * w + ix;
                    for ky in 0..kh {
                        let ty = (iy * g.stride.0 + ky * g.dilation.0) as isize
                            - g.padding.0 as isize;
                        if ty < 0 || ty >= oh as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let tx = (ix * g.stride.1 + kx * g.dilation.1) as isize
                                - g.padding.1 as isize;
                            if tx < 0 || tx >= ow as isize {
                                continue;
                            }
                            let out_idx = (b * oh + ty as usize) * ow + tx as usize;
                            emit(
                                out_idx,
                                in_idx,
                                k.data[b * k.stride_b + a * k.stride_a + ky * kw + kx],
                            );
                        }
                    }
                }
            }
        }
    }
}

fn build_cache(spec: &ConvSpec, in_shape: [usize; 3]) -> Option<ConvCache> {
    let out_shape = spec.output_shape(&in_shape).ok()?;
    let in_len: usize = in_shape.iter().product();
    let out_len: usize = out_shape.iter().product();
    let taps = spec.kernel.len();
    if in_len.checked_mul(taps)? > CACHE_MAX_ENTRIES {
        return None;
    }
    let g = geometry(spec);
    let mut fwd_entries = Vec::new();
    {
        let k = KernelView::new(&spec.kernel, false);
        let mut emit = |o: usize, i: usize, v: f64| fwd_entries.push((o, i, v));
        if spec.transposed {
            scatter_entries(in_shape, out_shape, &k, &g, &mut emit);
        } else {
            gather_entries(in_shape, out_shape, &k, &g, &mut emit);
        }
    }
    let mut adj_entries = Vec::new();
    {
        let k = KernelView::new(&spec.kernel, true);
        let mut emit = |o: usize, i: usize, v: f64| adj_entries.push((o, i, v));
        // the adjoint maps cotangents (out space) back to the input space
        if spec.transposed {
            gather_entries(out_shape, in_shape, &k, &g, &mut emit);
        } else {
            scatter_entries(out_shape, in_shape, &k, &g, &mut emit);
        }
    }
    Some(ConvCache {
        forward: SparseMap::from_entries(out_len, in_len, fwd_entries),
        adjoint: SparseMap::from_entries(in_len, out_len, adj_entries),
    })
}

/// A linear operator: a convolution bound to a concrete input shape, or a
/// dense matrix. This is what the solver consumes; bias never enters.
#[derive(Debug, Clone)]
pub enum LinearOp {
    Conv {
        spec: ConvSpec,
        in_shape: [usize; 3],
        cache: std::sync::Arc<Option<ConvCache>>,
    },
    Dense(DenseMatrix),
}

impl LinearOp {
    pub fn conv(spec: ConvSpec, in_shape: [usize; 3]) -> Result<Self> {
        spec.output_shape(&in_shape)?;
        let cache = std::sync::Arc::new(build_cache(&spec, in_shape));
        Ok(LinearOp::Conv {
            spec,
            in_shape,
            cache,
        })
    }

    pub fn in_shape(&self) -> Vec<usize> {
        match self {
            LinearOp::Conv { in_shape, .. } => in_shape.to_vec(),
            LinearOp::Dense(m) => vec![m.cols()],
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        match self {
            LinearOp::Conv { spec, in_shape, .. } => spec
                .output_shape(in_shape)
                .expect("validated at construction")
                .to_vec(),
            LinearOp::Dense(m) => vec![m.rows()],
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_shape().iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_shape().iter().product()
    }

    /// Strictly linear application (any conv bias is excluded).
    ///
    /// Accepts the exact input shape or any tensor of matching length
    /// (flattened vectors are common in the solver paths).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            LinearOp::Conv {
                spec,
                in_shape,
                cache,
            } => {
                let out_shape = spec.output_shape(in_shape)?;
                if let Some(c) = cache.as_ref() {
                    if x.len() != c.forward.cols {
                        return Err(Error::ShapeMismatch {
                            context: "LinearOp::apply",
                            expected: in_shape.to_vec(),
                            actual: x.shape().to_vec(),
                        });
                    }
                    return Tensor::new(out_shape.to_vec(), c.forward.apply(x.data()));
                }
                let x = conform(x, in_shape, "LinearOp::apply")?;
                Ok(apply_linear(spec, &x, out_shape))
            }
            LinearOp::Dense(m) => {
                if x.len() != m.cols() {
                    return Err(Error::ShapeMismatch {
                        context: "LinearOp::apply",
                        expected: vec![m.cols()],
                        actual: x.shape().to_vec(),
                    });
                }
                Ok(Tensor::from_vec(m.matvec(x.data())))
            }
        }
    }

    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            LinearOp::Conv {
                spec,
                in_shape,
                cache,
            } => {
                let expected = spec.output_shape(in_shape)?;
                if let Some(c) = cache.as_ref() {
                    if y.len() != c.adjoint.cols {
                        return Err(Error::ShapeMismatch {
                            context: "LinearOp::adjoint",
                            expected: expected.to_vec(),
                            actual: y.shape().to_vec(),
                        });
                    }
                    return Tensor::new(in_shape.to_vec(), c.adjoint.apply(y.data()));
                }
                let y = conform(y, &expected, "LinearOp::adjoint")?;
                conv_adjoint_for(spec, &y, in_shape)
            }
            LinearOp::Dense(m) => {
                if y.len() != m.rows() {
                    return Err(Error::ShapeMismatch {
                        context: "LinearOp::adjoint",
                        expected: vec![m.rows()],
                        actual: y.shape().to_vec(),
                    });
                }
                Ok(Tensor::from_vec(m.matvec_t(y.data())))
            }
        }
    }

    pub fn materialize(&self) -> Result<DenseMatrix> {
        match self {
            LinearOp::Conv { spec, in_shape, .. } => materialize_matrix(spec, in_shape),
            LinearOp::Dense(m) => Ok(m.clone()),
        }
    }

    /// Power-iteration estimate of `lambda_max(G^T G)` (squared spectral norm).
    pub fn norm_sq_estimate(&self, iters: usize, seed: u64) -> f64 {
        assert!(iters >= 1, "iters must be >= 1");
        let mut rng = Prng::seed_from_u64(seed);
        let in_shape = self.in_shape();
        let mut v = rng.normal_tensor(in_shape);
        let n = v.norm_l2();
        if n == 0.0 {
            return 0.0;
        }
        v = v.scale(1.0 / n);
        let mut rayleigh = 0.0;
        for _ in 0..iters {
            let w = self
                .adjoint(&self.apply(&v).expect("shape fixed"))
                .expect("shape fixed");
            rayleigh = v.dot(&w);
            let wn = w.norm_l2();
            if wn == 0.0 {
                return 0.0;
            }
            v = w.scale(1.0 / wn);
        }
        rayleigh
    }
}

/// Power-iteration estimate of the squared operator norm of a convolution.
pub fn operator_norm_sq(spec: &ConvSpec, in_shape: &[usize], iters: usize, seed: u64) -> Result<f64> {
    let op = LinearOp::conv(
        spec.clone(),
        [in_shape[0], in_shape[1], in_shape[2]],
    )?;
    Ok(op.norm_sq_estimate(iters, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 2x2 kernel [[0,1],[2,3]], one channel.
    pub(crate) fn paper_kernel() -> Tensor {
        Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    fn paper_spec() -> ConvSpec {
        ConvSpec::new(paper_kernel()).transposed()
    }

    #[test]
    fn transposed_conv_matches_worked_example() {
        let z = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let x = conv_apply(&paper_spec(), &z).unwrap();
        assert_eq!(x.shape(), &[1, 3, 3]);
        assert_eq!(
            x.data(),
            &[0.0, 0.0, 1.0, 0.0, 4.0, 6.0, 4.0, 12.0, 9.0]
        );
    }

    #[test]
    fn zero_kernel_maps_to_zero() {
        let spec = ConvSpec::new(Tensor::zeros(vec![2, 3, 3, 3]))
            .with_stride((2, 2))
            .with_padding((1, 1));
        let z = Tensor::new(vec![3, 5, 5], (0..75).map(|i| i as f64).collect()).unwrap();
        let x = conv_apply(&spec, &z).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_adds_per_channel() {
        let spec = ConvSpec::new(Tensor::zeros(vec![2, 1, 1, 1]))
            .with_bias(Tensor::from_vec(vec![1.0, -2.0]));
        let z = Tensor::zeros(vec![1, 2, 2]);
        let x = conv_apply(&spec, &z).unwrap();
        assert_eq!(x.data(), &[1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn shape_mismatch_reports_expected_and_actual() {
        let spec = paper_spec();
        let bad = Tensor::zeros(vec![2, 2, 2]);
        let err = conv_apply(&spec, &bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected"), "{msg}");
    }

    #[test]
    fn identity_kernel_adjoint_is_identity() {
        let spec = ConvSpec::new(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = Tensor::new(vec![1, 3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
        let x = conv_adjoint(&spec, &y).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn materialized_worked_example_is_9x4_with_disjoint_placements() {
        let m = materialize_matrix(&paper_spec(), &[1, 2, 2]).unwrap();
        assert_eq!((m.rows(), m.cols()), (9, 4));
        // apply check against the known output for z = [[0,1],[2,3]]
        let y = m.matvec(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(y, vec![0.0, 0.0, 1.0, 0.0, 4.0, 6.0, 4.0, 12.0, 9.0]);
        // each (row, kernel-entry) placement appears in at most one column
        let kernel = [0.0, 1.0, 2.0, 3.0];
        let mut seen = std::collections::HashSet::new();
        for c in 0..m.cols() {
            for r in 0..m.rows() {
                let v = m.at(r, c);
                if v == 0.0 {
                    continue;
                }
                let ki = kernel.iter().position(|&k| k == v).expect("kernel value");
                assert!(seen.insert((r, ki)), "placement ({r},{ki}) reused");
            }
        }
    }

    #[test]
    fn one_by_one_kernel_materializes_to_scaled_identity() {
        let spec = ConvSpec::new(Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap());
        let m = materialize_matrix(&spec, &[1, 4, 4]).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let want = if r == c { 0.5 } else { 0.0 };
                assert_eq!(m.at(r, c), want);
            }
        }
    }

    #[test]
    fn materialize_guard_rejects_huge_instances() {
        let spec = ConvSpec::new(Tensor::zeros(vec![8, 8, 3, 3])).with_padding((1, 1));
        let err = materialize_matrix(&spec, &[8, 512, 512]).unwrap_err();
        assert!(matches!(err, Error::SizeGuard { .. }));
    }

    #[test]
    fn norm_sq_of_scaled_identity_is_exact() {
        let spec = ConvSpec::new(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let got = operator_norm_sq(&spec, &[1, 4, 4], 100, 0).unwrap();
        assert!((got - 4.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn norm_sq_of_zero_operator_is_zero() {
        let spec = ConvSpec::new(Tensor::zeros(vec![1, 1, 2, 2]));
        let got = operator_norm_sq(&spec, &[1, 4, 4], 10, 0).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn floor_semantics_drop_dangling_anchor() {
        // H=5, k=2, s=2: the last stride-1 anchor is unreachable and its row
        // is deleted, giving floor((5-2)/2)+1 = 2 outputs
        let spec = ConvSpec::new(Tensor::zeros(vec![1, 1, 2, 2])).with_stride((2, 2));
        assert_eq!(spec.output_shape(&[1, 5, 5]).unwrap(), [1, 2, 2]);
        assert_eq!(spec.output_shape(&[1, 6, 6]).unwrap(), [1, 3, 3]);
        // too-small inputs are still rejected
        assert!(spec.output_shape(&[1, 1, 1]).is_err());
    }
}
