//! Layer kernels: convolution in both the direct triple-sum form and the
//! flattened 1-D form, max pooling, cross-channel LRN, ReLU, fully connected,
//! softmax, elementwise add, and channel concat.
//!
//! Every kernel is a pure function over immutable inputs. The two convolution
//! routes are kept deliberately independent: `conv2d_direct` walks the
//! `(f_i, k_y, k_x)` loop nest, `conv2d_flat` gathers each window into a flat
//! vector and runs a dot product against the flattened weight row. With
//! sequential accumulation the two perform the same multiply/add sequence per
//! output element and agree bit-for-bit; the tree mode trades that for a
//! balanced pairwise reduction.

use crate::error::{Error, Result};
use crate::tensor::{ConvWeights, Shape3, Tensor};

/// Accumulation order for the flattened convolution dot product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accum {
    /// Left-to-right accumulation starting from the bias; bit-identical to
    /// the direct form.
    #[default]
    Sequential,
    /// Balanced pairwise reduction of the products, then bias added last.
    /// Agrees with the direct form within a small relative tolerance.
    Tree,
}

impl std::str::FromStr for Accum {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(Accum::Sequential),
            "tree" => Ok(Accum::Tree),
            other => Err(Error::Parse {
                line: 0,
                message: format!("unknown accumulation mode `{other}` (expected seq or tree)"),
            }),
        }
    }
}

/// Convolution hyperparameters. Padding is symmetric zero-padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::Shape("conv kernel must be at least 1".into()));
        }
        if stride == 0 {
            return Err(Error::Shape("conv stride must be at least 1".into()));
        }
        Ok(ConvParams {
            kernel,
            stride,
            padding,
        })
    }

    /// Output spatial dims: `floor((D + 2*pad - K)/stride) + 1`, which must
    /// come out at least 1 in both axes.
    pub fn output_dims(&self, input: Shape3) -> Result<(usize, usize)> {
        let h = conv_out_dim(input.height, self.kernel, self.stride, self.padding)?;
        let w = conv_out_dim(input.width, self.kernel, self.stride, self.padding)?;
        Ok((h, w))
    }
}

fn conv_out_dim(dim: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = dim + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} does not fit dimension {dim} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Max-pooling hyperparameters over a square window. Windows overhanging the
/// border are dropped (floor output-size rule, no padding, no ceil mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub window: usize,
    pub stride: usize,
    pub kind: PoolKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolKind {
    #[default]
    Max,
}

impl PoolParams {
    pub fn max(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::Shape(
                "pool window and stride must be at least 1".into(),
            ));
        }
        Ok(PoolParams {
            window,
            stride,
            kind: PoolKind::Max,
        })
    }

    pub fn output_dims(&self, input: Shape3) -> Result<(usize, usize)> {
        if self.window > input.height || self.window > input.width {
            return Err(Error::Shape(format!(
                "pool window {} has no valid position on a {}x{} map",
                self.window, input.height, input.width
            )));
        }
        Ok((
            (input.height - self.window) / self.stride + 1,
            (input.width - self.window) / self.stride + 1,
        ))
    }
}

/// Cross-channel local response normalization:
///
/// `out(c,y,x) = in(c,y,x) / (k + (alpha/n) * sum_{c' in window(c)} in(c',y,x)^2)^beta`
///
/// where the window holds `n` channels centered on `c`, clamped at the
/// channel borders while `n` stays fixed in the `alpha/n` scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub local_size: usize,
    pub k: f32,
    pub alpha: f32,
    pub beta: f32,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            local_size: 5,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    pub fn new(local_size: usize, k: f32, alpha: f32, beta: f32) -> Result<Self> {
        if local_size == 0 || local_size.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "lrn local size must be an odd window, got {local_size}"
            )));
        }
        if k.is_nan() || k <= 0.0 {
            return Err(Error::Shape("lrn k must be positive".into()));
        }
        if alpha.is_nan() || alpha < 0.0 {
            return Err(Error::Shape("lrn alpha must be nonnegative".into()));
        }
        if beta.is_nan() || beta <= 0.0 {
            return Err(Error::Shape("lrn beta must be positive".into()));
        }
        Ok(LrnParams {
            local_size,
            k,
            alpha,
            beta,
        })
    }
}

/// Fully connected weights: a row-major `out x in` matrix plus a bias per
/// output feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FcWeights {
    out_features: usize,
    in_features: usize,
    matrix: Vec<f32>,
    bias: Vec<f32>,
}

impl FcWeights {
    pub fn new(
        out_features: usize,
        in_features: usize,
        matrix: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let expect = out_features
            .checked_mul(in_features)
            .ok_or_else(|| Error::Shape("fc element count overflows".into()))?;
        if matrix.len() != expect {
            return Err(Error::Shape(format!(
                "fc matrix: got {} values, expected {}x{} = {}",
                matrix.len(),
                out_features,
                in_features,
                expect
            )));
        }
        if bias.len() != out_features {
            return Err(Error::Shape(format!(
                "fc bias: got {} values, expected {}",
                bias.len(),
                out_features
            )));
        }
        Ok(FcWeights {
            out_features,
            in_features,
            matrix,
            bias,
        })
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn param_count(&self) -> u64 {
        self.matrix.len() as u64 + self.bias.len() as u64
    }
}

// ---------------------------------------------------------------------------
// Accumulation primitives
// ---------------------------------------------------------------------------

/// Sequential dot product starting from `acc0`, strictly left to right.
#[inline]
pub(crate) fn dot_seq(acc0: f32, a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = acc0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Balanced pairwise reduction; consumes the buffer in place.
pub(crate) fn tree_sum(buf: &mut [f32]) -> f32 {
    let mut n = buf.len();
    if n == 0 {
        return 0.0;
    }
    while n > 1 {
        let half = n / 2;
        for i in 0..half {
            buf[i] = buf[2 * i] + buf[2 * i + 1];
        }
        if n % 2 == 1 {
            buf[half] = buf[n - 1];
            n = half + 1;
        } else {
            n = half;
        }
    }
    buf[0]
}

/// Tree-mode dot product: products first, balanced reduction, bias last.
#[inline]
pub(crate) fn dot_tree(bias: f32, a: &[f32], b: &[f32], scratch: &mut Vec<f32>) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    scratch.clear();
    scratch.extend(a.iter().zip(b).map(|(x, y)| x * y));
    bias + tree_sum(scratch)
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn check_conv(input: &Tensor, weights: &ConvWeights, params: &ConvParams) -> Result<Shape3> {
    if input.shape().channels != weights.in_channels() {
        return Err(Error::Shape(format!(
            "conv input has {} channels, weights expect {}",
            input.shape().channels,
            weights.in_channels()
        )));
    }
    if weights.kernel() != params.kernel {
        return Err(Error::Shape(format!(
            "conv weights use kernel {}, params say {}",
            weights.kernel(),
            params.kernel
        )));
    }
    let (h_out, w_out) = params.output_dims(input.shape())?;
    Shape3::new(weights.out_channels(), h_out, w_out)
}

/// Direct convolution: for every output element, accumulate
/// `bias + sum over (f_i, k_y, k_x)` in exactly that loop order, reading 0
/// outside the padded border.
pub fn conv2d_direct(input: &Tensor, weights: &ConvWeights, params: &ConvParams) -> Result<Tensor> {
    let out_shape = check_conv(input, weights, params)?;
    let (k, s, p) = (params.kernel, params.stride, params.padding);
    let in_shape = input.shape();
    let mut out = vec![0.0f32; out_shape.elements()];
    for f_o in 0..weights.out_channels() {
        for y in 0..out_shape.height {
            for x in 0..out_shape.width {
                let mut acc = weights.bias()[f_o];
                for f_i in 0..weights.in_channels() {
                    for k_y in 0..k {
                        for k_x in 0..k {
                            let iy = (y * s + k_y) as isize - p as isize;
                            let ix = (x * s + k_x) as isize - p as isize;
                            let d = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < in_shape.height
                                && (ix as usize) < in_shape.width
                            {
                                input.get(f_i, iy as usize, ix as usize)
                            } else {
                                0.0
                            };
                            let w = weights.w4d()
                                [((f_o * weights.in_channels() + f_i) * k + k_y) * k + k_x];
                            acc += w * d;
                        }
                    }
                }
                out[out_shape.offset(f_o, y, x)] = acc;
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Gathers the input window for output coordinate `(y, x)` into `dst`, laid
/// out by the flattened index `x_i = f_i*K*K + k_y*K + k_x`, with zeros for
/// positions outside the padded border. `dst` must have length `C*K*K`.
pub(crate) fn gather_window_into(
    dst: &mut [f32],
    input: &Tensor,
    y: usize,
    x: usize,
    params: &ConvParams,
) {
    let sh = input.shape();
    let k = params.kernel;
    debug_assert_eq!(dst.len(), sh.channels * k * k);
    dst.fill(0.0);
    let y_base = (y * params.stride) as isize - params.padding as isize;
    let x_base = (x * params.stride) as isize - params.padding as isize;
    // First and one-past-last kx whose source column lands inside the map.
    let kx0 = (-x_base).clamp(0, k as isize) as usize;
    let kx1 = (sh.width as isize - x_base).clamp(0, k as isize) as usize;
    if kx0 >= kx1 {
        return;
    }
    let run = kx1 - kx0;
    let src_x = (x_base + kx0 as isize) as usize;
    let data = input.data();
    for f_i in 0..sh.channels {
        for k_y in 0..k {
            let iy = y_base + k_y as isize;
            if iy < 0 || iy >= sh.height as isize {
                continue;
            }
            let src = sh.offset(f_i, iy as usize, src_x);
            let dst_off = (f_i * k + k_y) * k + kx0;
            dst[dst_off..dst_off + run].copy_from_slice(&data[src..src + run]);
        }
    }
}

/// Window gather for one output coordinate, in the same `x_i` ordering as
/// [`crate::tensor::flatten_weights`].
pub fn gather_window(input: &Tensor, y: usize, x: usize, params: &ConvParams) -> Vec<f32> {
    let mut buf = vec![0.0f32; input.shape().channels * params.kernel * params.kernel];
    gather_window_into(&mut buf, input, y, x, params);
    buf
}

/// Flattened convolution: one dot product per output element over the
/// gathered window and the flattened weight row.
pub fn conv2d_flat(
    input: &Tensor,
    weights: &ConvWeights,
    params: &ConvParams,
    accum: Accum,
) -> Result<Tensor> {
    let out_shape = check_conv(input, weights, params)?;
    let mut out = vec![0.0f32; out_shape.elements()];
    let mut window = vec![0.0f32; weights.window_len()];
    let mut scratch = Vec::with_capacity(weights.window_len());
    for y in 0..out_shape.height {
        for x in 0..out_shape.width {
            gather_window_into(&mut window, input, y, x, params);
            for f_o in 0..weights.out_channels() {
                let row = weights.flat_row(f_o);
                let v = match accum {
                    Accum::Sequential => dot_seq(weights.bias()[f_o], row, &window),
                    Accum::Tree => dot_tree(weights.bias()[f_o], row, &window, &mut scratch),
                };
                out[out_shape.offset(f_o, y, x)] = v;
            }
        }
    }
    Tensor::new(out_shape, out)
}

// ---------------------------------------------------------------------------
// Pooling and normalization
// ---------------------------------------------------------------------------

/// Max over one pooling window; `src` is a `(channels, src_height, width)`
/// slab and the window is fully in range.
#[inline]
fn window_max(
    src: &[f32],
    src_height: usize,
    width: usize,
    c: usize,
    y0: usize,
    x0: usize,
    window: usize,
) -> f32 {
    let mut m = f32::NEG_INFINITY;
    for dy in 0..window {
        let row = (c * src_height + y0 + dy) * width + x0;
        for dx in 0..window {
            let v = src[row + dx];
            if v > m {
                m = v;
            }
        }
    }
    m
}

/// Pools output rows `y0_out..y1_out` from a `(channels, src_height, width)`
/// slab; returns a `(channels, y1_out - y0_out, w_out)` slab. Shared by the
/// whole-tensor kernel and the streaming pipeline stage so both produce the
/// same bits.
pub(crate) fn pool_rows(
    src: &[f32],
    channels: usize,
    src_height: usize,
    width: usize,
    params: &PoolParams,
    y0_out: usize,
    y1_out: usize,
) -> Vec<f32> {
    let PoolKind::Max = params.kind;
    let w_out = (width - params.window) / params.stride + 1;
    let rows = y1_out - y0_out;
    let mut out = vec![0.0f32; channels * rows * w_out];
    for c in 0..channels {
        for (r, y) in (y0_out..y1_out).enumerate() {
            for x in 0..w_out {
                out[(c * rows + r) * w_out + x] = window_max(
                    src,
                    src_height,
                    width,
                    c,
                    y * params.stride,
                    x * params.stride,
                    params.window,
                );
            }
        }
    }
    out
}

/// Max pooling per channel; spatial dims shrink, channel count is unchanged.
pub fn maxpool(input: &Tensor, params: &PoolParams) -> Result<Tensor> {
    let (h_out, w_out) = params.output_dims(input.shape())?;
    let sh = input.shape();
    let out_shape = Shape3::new(sh.channels, h_out, w_out)?;
    let data = pool_rows(
        input.data(),
        sh.channels,
        sh.height,
        sh.width,
        params,
        0,
        h_out,
    );
    Tensor::new(out_shape, data)
}

/// LRN over a `(channels, rows, width)` slab. Each element only looks at the
/// same `(y, x)` across a channel window, so slabs of any row count give the
/// same bits as the whole tensor.
pub(crate) fn lrn_slab(
    src: &[f32],
    channels: usize,
    rows: usize,
    width: usize,
    params: &LrnParams,
) -> Vec<f32> {
    let radius = params.local_size / 2;
    let scale = params.alpha / params.local_size as f32;
    let mut out = vec![0.0f32; src.len()];
    let plane = rows * width;
    for c in 0..channels {
        let lo = c.saturating_sub(radius);
        let hi = (c + radius).min(channels - 1);
        for i in 0..plane {
            let mut sum_sq = 0.0f32;
            for cc in lo..=hi {
                let v = src[cc * plane + i];
                sum_sq += v * v;
            }
            let denom = (params.k + scale * sum_sq).powf(params.beta);
            out[c * plane + i] = src[c * plane + i] / denom;
        }
    }
    out
}

/// Cross-channel local response normalization.
pub fn lrn(input: &Tensor, params: &LrnParams) -> Result<Tensor> {
    let sh = input.shape();
    let data = lrn_slab(input.data(), sh.channels, sh.height, sh.width, params);
    Tensor::new(sh, data)
}

// ---------------------------------------------------------------------------
// Elementwise and dense layers
// ---------------------------------------------------------------------------

/// Elementwise `max(0, v)`.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(input.shape(), data).expect("shape preserved")
}

/// Matrix-vector product with bias, accumulated sequentially over the input.
pub fn fc(input: &[f32], weights: &FcWeights) -> Result<Vec<f32>> {
    if input.len() != weights.in_features() {
        return Err(Error::Shape(format!(
            "fc input has {} values, weights expect {}",
            input.len(),
            weights.in_features()
        )));
    }
    let n = weights.in_features();
    Ok((0..weights.out_features())
        .map(|j| {
            dot_seq(
                weights.bias()[j],
                &weights.matrix()[j * n..(j + 1) * n],
                input,
            )
        })
        .collect())
}

/// Numerically stable softmax: exponentials are shifted by the input maximum,
/// so outputs land in (0, 1] and sum to 1.
pub fn softmax(input: &[f32]) -> Vec<f32> {
    if input.is_empty() {
        return Vec::new();
    }
    let max = input.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = input.iter().map(|v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Elementwise sum of two same-shaped tensors.
pub fn eltwise_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "eltwise add of mismatched shapes {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Channel-axis concatenation in argument order. All inputs must share
/// height and width.
pub fn concat(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Shape("concat needs at least one input".into()))?;
    let (h, w) = (first.shape().height, first.shape().width);
    let mut channels = 0usize;
    for t in inputs {
        if t.shape().height != h || t.shape().width != w {
            return Err(Error::Shape(format!(
                "concat input {} does not match spatial dims {}x{}",
                t.shape(),
                h,
                w
            )));
        }
        channels += t.shape().channels;
    }
    let shape = Shape3::new(channels, h, w)?;
    let mut data = Vec::with_capacity(shape.elements());
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}
