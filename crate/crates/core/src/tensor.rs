//! Dense float32 feature-map containers in channel-major layout, plus the
//! flattened weight view used by the 1-D convolution kernel.
//!
//! The layout is fixed: `index(c, y, x) = c*H*W + y*W + x`. With weights
//! stored row-major in `(out, in, ky, kx)` order, the flattened index
//! `x_i = in*K*K + ky*K + kx` turns every convolution window into a plain
//! gather followed by a dot product.

use crate::error::{Error, Result};

/// Shape of a feature map: channels x height x width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    /// Builds a shape, requiring every dimension to be at least 1 and the
    /// element count to fit in `usize`.
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "shape ({channels},{height},{width}) has a zero dimension"
            )));
        }
        channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| {
                Error::Shape(format!(
                    "shape ({channels},{height},{width}) overflows the addressable size"
                ))
            })?;
        Ok(Shape3 {
            channels,
            height,
            width,
        })
    }

    pub fn elements(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Size of a float32 tensor of this shape, in bytes.
    pub fn bytes(&self) -> u64 {
        self.elements() as u64 * 4
    }

    /// Checked flat offset of `(c, y, x)`: `c*H*W + y*W + x`.
    ///
    /// Bijective over valid coordinates; out-of-range coordinates are a
    /// bounds error.
    pub fn index(&self, c: usize, y: usize, x: usize) -> Result<usize> {
        if c >= self.channels || y >= self.height || x >= self.width {
            return Err(Error::Shape(format!(
                "coordinate ({c},{y},{x}) out of bounds for shape ({},{},{})",
                self.channels, self.height, self.width
            )));
        }
        Ok(self.offset(c, y, x))
    }

    /// Unchecked flat offset; callers guarantee the coordinate is in range.
    #[inline]
    pub(crate) fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.channels, self.height, self.width)
    }
}

/// Immutable dense float32 tensor in channel-major, row-major layout.
///
/// Tensors are never mutated after construction, so they can be shared
/// read-only across pipeline workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape3,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.elements() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.elements()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.elements()],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.offset(c, y, x)]
    }

    pub fn byte_len(&self) -> u64 {
        self.shape.bytes()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bit-level equality, distinguishing -0.0 from 0.0 and failing on NaN
    /// payload differences. Used wherever "bit-identical" is meant.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Rewrites a 4-D weight array `(out, in, ky, kx)` as one flat row per output
/// channel, with `x_i = in*K*K + ky*K + kx`. A pure permutation: values are
/// bit-identical.
pub fn flatten_weights(w4d: &[f32], kernel: usize, in_channels: usize) -> Result<Vec<f32>> {
    if kernel == 0 || in_channels == 0 {
        return Err(Error::Shape(
            "kernel and in_channels must be at least 1".into(),
        ));
    }
    let window = in_channels * kernel * kernel;
    if w4d.is_empty() || !w4d.len().is_multiple_of(window) {
        return Err(Error::Shape(format!(
            "weight array of length {} is not a multiple of in_channels*K*K = {}",
            w4d.len(),
            window
        )));
    }
    let out_channels = w4d.len() / window;
    let mut flat = vec![0.0f32; w4d.len()];
    for f_o in 0..out_channels {
        for f_i in 0..in_channels {
            for k_y in 0..kernel {
                for k_x in 0..kernel {
                    let src = ((f_o * in_channels + f_i) * kernel + k_y) * kernel + k_x;
                    let x_i = f_i * kernel * kernel + k_y * kernel + k_x;
                    flat[f_o * window + x_i] = w4d[src];
                }
            }
        }
    }
    Ok(flat)
}

/// Convolution weights held in both the natural 4-D order and the flattened
/// per-output-channel rows the 1-D kernel consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    w4d: Vec<f32>,
    w_flat: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvWeights {
    /// Takes weights in `(out, in, ky, kx)` row-major order and a bias per
    /// output channel; the flattened view is derived on construction.
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        w4d: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let expect = out_channels
            .checked_mul(in_channels)
            .and_then(|n| n.checked_mul(kernel * kernel))
            .ok_or_else(|| Error::Shape("weight element count overflows".into()))?;
        if w4d.len() != expect {
            return Err(Error::Shape(format!(
                "conv weights: got {} values, expected {}x{}x{}x{} = {}",
                w4d.len(),
                out_channels,
                in_channels,
                kernel,
                kernel,
                expect
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Shape(format!(
                "conv bias: got {} values, expected {}",
                bias.len(),
                out_channels
            )));
        }
        let w_flat = flatten_weights(&w4d, kernel, in_channels)?;
        Ok(ConvWeights {
            out_channels,
            in_channels,
            kernel,
            w4d,
            w_flat,
            bias,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// Length of one flattened window / flat weight row: `in*K*K`.
    pub fn window_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn w4d(&self) -> &[f32] {
        &self.w4d
    }

    pub fn w_flat(&self) -> &[f32] {
        &self.w_flat
    }

    /// Flat weight row for output channel `f_o`.
    #[inline]
    pub fn flat_row(&self, f_o: usize) -> &[f32] {
        let w = self.window_len();
        &self.w_flat[f_o * w..(f_o + 1) * w]
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Parameter count including biases.
    pub fn param_count(&self) -> u64 {
        self.w4d.len() as u64 + self.bias.len() as u64
    }
}
