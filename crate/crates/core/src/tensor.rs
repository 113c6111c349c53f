//! Dense `H×W×C` tensors and the handful of primitives the network and the
//! tracker are built from.
//!
//! Storage is always row-major `(row, column, channel)`: the value at row `y`,
//! column `x`, channel `c` lives at `(y * width + x) * channels + c`.

use rayon::prelude::*;
use thiserror::Error;

/// Norm floor used by [`Tensor::l2_normalize_channels`].
pub const L2_EPSILON: f32 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("tensor dimensions must be positive, got {height}x{width}x{channels}")]
    EmptyShape {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("data length {found} does not match {height}x{width}x{channels}")]
    DataLength {
        height: usize,
        width: usize,
        channels: usize,
        found: usize,
    },
    #[error("expected {expected} input channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("unsupported kernel size {0}, only 1 and 3 are allowed")]
    KernelSize(usize),
    #[error("layer parameter count mismatch: expected {expected} {what}, got {found}")]
    LayerShape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("sample point ({x}, {y}) lies outside the {width}x{height} map")]
    OutOfBounds {
        x: f32,
        y: f32,
        width: usize,
        height: usize,
    },
    #[error("tensor of {height}x{width} is too small to downsample")]
    TooSmall { height: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self, TensorError> {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(
        height: usize,
        width: usize,
        channels: usize,
        value: f32,
    ) -> Result<Self, TensorError> {
        check_shape(height, width, channels)?;
        Ok(Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        })
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        check_shape(height, width, channels)?;
        if data.len() != height * width * channels {
            return Err(TensorError::DataLength {
                height,
                width,
                channels,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(row, column, channel)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, TensorError> {
        check_shape(height, width, channels)?;
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    /// Channel vector of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Extracts a single channel as a `H×W×1` tensor.
    pub fn channel(&self, channel: usize) -> Tensor {
        assert!(channel < self.channels, "channel index out of range");
        Tensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self
                .data
                .chunks_exact(self.channels)
                .map(|px| px[channel])
                .collect(),
        }
    }

    /// Keeps channels `start..start + count`.
    pub fn channel_range(&self, start: usize, count: usize) -> Tensor {
        assert!(count > 0 && start + count <= self.channels);
        let mut data = Vec::with_capacity(self.height * self.width * count);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[start..start + count]);
        }
        Tensor {
            height: self.height,
            width: self.width,
            channels: count,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    /// Divides every pixel's channel vector by `max(‖v‖₂, epsilon)`.
    pub fn l2_normalize_channels(&self, epsilon: f32) -> Tensor {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(self.channels) {
            normalize_in_place(px, epsilon);
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    #[inline]
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f32 && y <= (self.height - 1) as f32
    }

    /// Bilinear interpolation of every channel at subpixel column `x`, row `y`.
    pub fn bilinear_sample(&self, x: f32, y: f32) -> Result<Vec<f32>, TensorError> {
        let mut out = vec![0.0; self.channels];
        self.bilinear_sample_into(x, y, &mut out)?;
        Ok(out)
    }

    pub fn bilinear_sample_into(&self, x: f32, y: f32, out: &mut [f32]) -> Result<(), TensorError> {
        if !self.contains(x, y) {
            return Err(TensorError::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = x - x0 as f32;
        let ay = y - y0 as f32;
        let w00 = (1.0 - ax) * (1.0 - ay);
        let w01 = ax * (1.0 - ay);
        let w10 = (1.0 - ax) * ay;
        let w11 = ax * ay;
        let p00 = self.pixel(y0, x0);
        let p01 = self.pixel(y0, x1);
        let p10 = self.pixel(y1, x0);
        let p11 = self.pixel(y1, x1);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
        }
        Ok(())
    }

    /// Averages each 2×2 block; odd trailing rows/columns are dropped.
    pub fn downsample_half(&self) -> Result<Tensor, TensorError> {
        if self.height < 2 || self.width < 2 {
            return Err(TensorError::TooSmall {
                height: self.height,
                width: self.width,
            });
        }
        let (h, w, c) = (self.height / 2, self.width / 2, self.channels);
        let mut data = vec![0.0f32; h * w * c];
        data.chunks_exact_mut(w * c)
            .enumerate()
            .for_each(|(y, row)| {
                let stride = self.width * c;
                let top = &self.data[2 * y * stride..][..2 * w * c];
                let bot = &self.data[(2 * y + 1) * stride..][..2 * w * c];
                let pairs = top.chunks_exact(2 * c).zip(bot.chunks_exact(2 * c));
                for (out, (t, b)) in row.chunks_exact_mut(c).zip(pairs) {
                    for ch in 0..c {
                        out[ch] = 0.25 * ((t[ch] + t[c + ch]) + (b[ch] + b[c + ch]));
                    }
                }
            });
        Ok(Tensor {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    /// Resamples to `height×width` by bilinear interpolation with pixel-center
    /// alignment. Shrinking by more than 2× first box-filters with
    /// [`Tensor::downsample_half`] to limit aliasing.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Tensor, TensorError> {
        check_shape(height, width, self.channels)?;
        let mut src = std::borrow::Cow::Borrowed(self);
        while src.height >= 2 * height && src.width >= 2 * width && src.height >= 2 {
            src = std::borrow::Cow::Owned(src.downsample_half()?);
        }
        let sy = src.height as f32 / height as f32;
        let sx = src.width as f32 / width as f32;
        let max_x = (src.width - 1) as f32;
        let max_y = (src.height - 1) as f32;
        let mut out = Tensor::zeros(height, width, self.channels)?;
        let c = self.channels;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let start = (y * width + x) * c;
                src.bilinear_sample_into(fx, fy, &mut out.data[start..start + c])?;
            }
        }
        Ok(out)
    }

    /// Concatenates per-pixel channel vectors of equally sized tensors.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyShape {
            height: 0,
            width: 0,
            channels: 0,
        })?;
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(first.height * first.width * channels);
        for p in parts {
            if p.height != first.height || p.width != first.width {
                return Err(TensorError::DataLength {
                    height: first.height,
                    width: first.width,
                    channels: p.channels,
                    found: p.data.len(),
                });
            }
        }
        for i in 0..first.height * first.width {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        Tensor::from_vec(first.height, first.width, channels, data)
    }
}

fn check_shape(height: usize, width: usize, channels: usize) -> Result<(), TensorError> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(TensorError::EmptyShape {
            height,
            width,
            channels,
        });
    }
    Ok(())
}

/// Numerically safe logistic function.
#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn normalize_in_place(v: &mut [f32], epsilon: f32) {
    let norm = v.iter().map(|a| a * a).sum::<f32>().sqrt();
    let scale = 1.0 / norm.max(epsilon);
    for a in v.iter_mut() {
        *a *= scale;
    }
}

/// A stride-1 convolution that preserves resolution (zero padding for 3×3).
///
/// Weights are stored out-major: `weights[((o * in + i) * k + ky) * k + kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    kernel_size: usize,
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvLayer {
    pub fn new(
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, TensorError> {
        if kernel_size != 1 && kernel_size != 3 {
            return Err(TensorError::KernelSize(kernel_size));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(TensorError::EmptyShape {
                height: kernel_size,
                width: kernel_size,
                channels: in_channels.min(out_channels),
            });
        }
        let expected = out_channels * in_channels * kernel_size * kernel_size;
        if weights.len() != expected {
            return Err(TensorError::LayerShape {
                what: "weights",
                expected,
                found: weights.len(),
            });
        }
        if bias.len() != out_channels {
            return Err(TensorError::LayerShape {
                what: "biases",
                expected: out_channels,
                found: bias.len(),
            });
        }
        Ok(Self {
            kernel_size,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(kernel_size: usize, in_channels: usize, out_channels: usize) -> Result<Self, TensorError> {
        Self::new(
            kernel_size,
            in_channels,
            out_channels,
            vec![0.0; out_channels * in_channels * kernel_size * kernel_size],
            vec![0.0; out_channels],
        )
    }

    #[inline]
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    #[inline]
    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    #[inline]
    pub fn weight(&self, out: usize, input: usize, ky: usize, kx: usize) -> f32 {
        let k = self.kernel_size;
        self.weights[((out * self.in_channels + input) * k + ky) * k + kx]
    }

    #[inline]
    pub fn set_weight(&mut self, out: usize, input: usize, ky: usize, kx: usize, value: f32) {
        let k = self.kernel_size;
        self.weights[((out * self.in_channels + input) * k + ky) * k + kx] = value;
    }

    pub fn set_bias(&mut self, out: usize, value: f32) {
        self.bias[out] = value;
    }

    /// Weights regrouped as `[ky][kx][in][out]` so the innermost loop runs
    /// over contiguous output channels.
    fn tap_major(&self) -> Vec<f32> {
        let (k, ic, oc) = (self.kernel_size, self.in_channels, self.out_channels);
        let mut out = vec![0.0; self.weights.len()];
        for o in 0..oc {
            for i in 0..ic {
                for ky in 0..k {
                    for kx in 0..k {
                        out[((ky * k + kx) * ic + i) * oc + o] = self.weight(o, i, ky, kx);
                    }
                }
            }
        }
        out
    }
}

/// Same-resolution convolution. Rows are computed in parallel; every output
/// element is produced by the same arithmetic sequence regardless of the
/// worker count.
pub fn conv2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor, TensorError> {
    if input.channels != layer.in_channels {
        return Err(TensorError::ChannelMismatch {
            expected: layer.in_channels,
            found: input.channels,
        });
    }
    let (h, w) = (input.height, input.width);
    let oc = layer.out_channels;
    let taps = layer.tap_major();
    let mut data = vec![0.0f32; h * w * oc];
    let wide = wide_simd_available();
    data.par_chunks_mut(w * oc).enumerate().for_each(|(y, row)| {
        #[cfg(target_arch = "x86_64")]
        if wide {
            // SAFETY: the required CPU feature was detected at runtime.
            unsafe { conv_row_avx2(input, layer, &taps, y, row) };
            return;
        }
        let _ = wide;
        conv_row_any(input, layer, &taps, y, row);
    });
    Ok(Tensor {
        height: h,
        width: w,
        channels: oc,
        data,
    })
}

pub(crate) fn wide_simd_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// The same kernel compiled for 256-bit vectors. Rust never fuses the
/// multiply and add, so results are bit-identical to the portable path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_row_avx2(input: &Tensor, layer: &ConvLayer, taps: &[f32], y: usize, row: &mut [f32]) {
    conv_row_any(input, layer, taps, y, row)
}

#[inline(always)]
fn conv_row_any(input: &Tensor, layer: &ConvLayer, taps: &[f32], y: usize, row: &mut [f32]) {
    match layer.out_channels {
        // Interior pixels are computed BLOCK at a time, sharing each
        // weight load; the block keeps the accumulators in registers.
        4 => conv_row::<4, 8>(input, layer, taps, y, row),
        8 => conv_row::<8, 4>(input, layer, taps, y, row),
        16 => conv_row::<16, 2>(input, layer, taps, y, row),
        _ => conv_row_dyn(input, layer, taps, y, row),
    }
}

#[inline(always)]
fn conv_row<const OC: usize, const BLOCK: usize>(
    input: &Tensor,
    layer: &ConvLayer,
    taps: &[f32],
    y: usize,
    row: &mut [f32],
) {
    let (h, w, ic) = (input.height, input.width, input.channels);
    let k = layer.kernel_size;
    let pad = k / 2;
    let span = k * ic;
    let mut bias = [0.0f32; OC];
    bias.copy_from_slice(&layer.bias);
    let rows: Vec<(usize, usize)> = (0..k)
        .filter_map(|ky| {
            let sy = y as isize + ky as isize - pad as isize;
            (sy >= 0 && sy < h as isize).then_some((ky, sy as usize))
        })
        .collect();
    let interior_end = w.saturating_sub(pad);
    let mut x = 0;
    while x < w {
        if x >= pad && x + BLOCK <= interior_end {
            // All k taps of a kernel row are one contiguous run of k·ic values.
            let mut acc = [bias; BLOCK];
            for &(ky, sy) in &rows {
                let base = (sy * w + x - pad) * ic;
                let src = &input.data[base..base + span + (BLOCK - 1) * ic];
                let wts = &taps[ky * span * OC..(ky + 1) * span * OC];
                for (j, wrow) in wts.chunks_exact(OC).enumerate() {
                    let wrow: &[f32; OC] = wrow.try_into().unwrap();
                    for (p, a) in acc.iter_mut().enumerate() {
                        let v = src[p * ic + j];
                        for o in 0..OC {
                            a[o] += v * wrow[o];
                        }
                    }
                }
            }
            for (p, a) in acc.iter().enumerate() {
                row[(x + p) * OC..(x + p + 1) * OC].copy_from_slice(a);
            }
            x += BLOCK;
            continue;
        }
        let mut acc = bias;
        for &(ky, sy) in &rows {
            for kx in 0..k {
                let sx = x as isize + kx as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let px = input.pixel(sy, sx as usize);
                let tap = &taps[(ky * k + kx) * ic * OC..(ky * k + kx + 1) * ic * OC];
                for (&v, wrow) in px.iter().zip(tap.chunks_exact(OC)) {
                    for o in 0..OC {
                        acc[o] += v * wrow[o];
                    }
                }
            }
        }
        row[x * OC..(x + 1) * OC].copy_from_slice(&acc);
        x += 1;
    }
}

fn conv_row_dyn(input: &Tensor, layer: &ConvLayer, taps: &[f32], y: usize, row: &mut [f32]) {
    let (h, w, ic) = (input.height, input.width, input.channels);
    let (k, oc) = (layer.kernel_size, layer.out_channels);
    let pad = k / 2;
    for x in 0..w {
        let acc = &mut row[x * oc..(x + 1) * oc];
        acc.copy_from_slice(&layer.bias);
        for ky in 0..k {
            let sy = y as isize + ky as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for kx in 0..k {
                let sx = x as isize + kx as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let px = input.pixel(sy as usize, sx as usize);
                let tap = &taps[(ky * k + kx) * ic * oc..(ky * k + kx + 1) * ic * oc];
                for (i, &v) in px.iter().enumerate() {
                    for (a, &wv) in acc.iter_mut().zip(&tap[i * oc..(i + 1) * oc]) {
                        *a += v * wv;
                    }
                }
            }
        }
    }
}
