//! The four-convolution network: a shared encoder (3×3, 3×3, 1×1) followed by
//! a 1×1 decoder whose first three channels become the unit-norm feature map
//! and whose last channel becomes the sigmoid score map.
//!
//! # Weights file
//!
//! Little-endian binary:
//!
//! ```text
//! "LETW"            4 bytes magic
//! version           u32
//! per layer, in order enc1, enc2, enc3, dec:
//!   out, in, k      3 × u32
//!   weights         out·in·k·k × f32, out-major (out, in, ky, kx)
//!   biases          out × f32
//! ```

use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::{conv2d, ConvLayer, Tensor, TensorError, L2_EPSILON};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"LETW";
pub const WEIGHTS_VERSION: u32 = 1;

/// `(name, kernel, in, out)` for each layer, in file order.
pub const LAYER_SHAPES: [(&str, usize, usize, usize); 4] = [
    ("enc1", 3, 3, 8),
    ("enc2", 3, 8, 8),
    ("enc3", 1, 8, 16),
    ("dec", 1, 16, 4),
];

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("not a weights file: bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported weights format version {found} (expected {WEIGHTS_VERSION})")]
    Version { found: u32 },
    #[error("weights file truncated in {section}")]
    Truncated { section: &'static str },
    #[error("layer {layer}: expected {expected}, found {found}")]
    Dimension {
        layer: &'static str,
        expected: String,
        found: String,
    },
    #[error("{0} unexpected trailing bytes after the last layer")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("network input must have 3 channels, got {0}")]
    InputChannels(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LetNetWeights {
    pub enc1: ConvLayer,
    pub enc2: ConvLayer,
    pub enc3: ConvLayer,
    pub dec: ConvLayer,
    pub format_version: u32,
}

/// Network output at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    /// `H×W×1`, values in (0, 1).
    pub score_map: Tensor,
    /// `H×W×3`, unit channel norm per pixel (or exactly zero).
    pub feature_map: Tensor,
}

impl LetNetWeights {
    /// Builds weights from four layers, checking every dimension.
    pub fn from_layers(layers: [ConvLayer; 4]) -> Result<Self, WeightsError> {
        for (layer, &(name, k, i, o)) in layers.iter().zip(LAYER_SHAPES.iter()) {
            check_layer_shape(name, k, i, o, layer.kernel_size(), layer.in_channels(), layer.out_channels())?;
        }
        let [enc1, enc2, enc3, dec] = layers;
        Ok(Self {
            enc1,
            enc2,
            enc3,
            dec,
            format_version: WEIGHTS_VERSION,
        })
    }

    pub fn zeros() -> Self {
        let layers = LAYER_SHAPES.map(|(_, k, i, o)| ConvLayer::zeros(k, i, o).unwrap());
        Self::from_layers(layers).unwrap()
    }

    /// Deterministic weights drawn from `U(-1, 1) / sqrt(fan_in)`, biases from
    /// `U(-0.1, 0.1)`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = LAYER_SHAPES.map(|(_, k, i, o)| {
            let scale = 1.0 / ((i * k * k) as f32).sqrt();
            let weights = (0..o * i * k * k)
                .map(|_| rng.gen_range(-1.0f32..1.0) * scale)
                .collect();
            let bias = (0..o).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
            ConvLayer::new(k, i, o, weights, bias).unwrap()
        });
        Self::from_layers(layers).unwrap()
    }

    /// Hand-built weights with an exactly gain-invariant feature map: the
    /// features are the chromaticity `rgb / ‖rgb‖`, which a per-pixel
    /// multiplicative brightness change cannot alter. The score channel is a
    /// gradient-magnitude response of the gray image.
    ///
    /// Useful as a baseline when no trained weights are available.
    pub fn chromaticity() -> Self {
        let mut w = Self::zeros();
        // enc1: channels 0..3 copy RGB; 3..7 are ±d/dx, ±d/dy of gray.
        for c in 0..3 {
            w.enc1.set_weight(c, c, 1, 1, 1.0);
            let g = 1.0 / 3.0;
            w.enc1.set_weight(3, c, 1, 2, g);
            w.enc1.set_weight(3, c, 1, 0, -g);
            w.enc1.set_weight(4, c, 1, 0, g);
            w.enc1.set_weight(4, c, 1, 2, -g);
            w.enc1.set_weight(5, c, 2, 1, g);
            w.enc1.set_weight(5, c, 0, 1, -g);
            w.enc1.set_weight(6, c, 0, 1, g);
            w.enc1.set_weight(6, c, 2, 1, -g);
        }
        // enc2: identity for RGB, 3×3 box sum of the |gradient| parts.
        for c in 0..3 {
            w.enc2.set_weight(c, c, 1, 1, 1.0);
        }
        for c in 3..7 {
            for ky in 0..3 {
                for kx in 0..3 {
                    w.enc2.set_weight(c, c, ky, kx, 1.0 / 9.0);
                }
            }
        }
        for c in 0..7 {
            w.enc3.set_weight(c, c, 0, 0, 1.0);
        }
        for c in 0..3 {
            w.dec.set_weight(c, c, 0, 0, 1.0);
        }
        for c in 3..7 {
            w.dec.set_weight(3, c, 0, 0, 20.0);
        }
        w.dec.set_bias(3, -2.0);
        w
    }

    pub fn layers(&self) -> [&ConvLayer; 4] {
        [&self.enc1, &self.enc2, &self.enc3, &self.dec]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        for layer in self.layers() {
            for dim in [layer.out_channels(), layer.in_channels(), layer.kernel_size()] {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for v in layer.weights().iter().chain(layer.bias()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "header")?.try_into().unwrap();
        if &magic != WEIGHTS_MAGIC {
            return Err(WeightsError::BadMagic(magic));
        }
        let version = r.u32("header")?;
        if version != WEIGHTS_VERSION {
            return Err(WeightsError::Version { found: version });
        }
        let mut layers = Vec::with_capacity(4);
        for &(name, k, i, o) in &LAYER_SHAPES {
            let out_c = r.u32(name)? as usize;
            let in_c = r.u32(name)? as usize;
            let kernel = r.u32(name)? as usize;
            check_layer_shape(name, k, i, o, kernel, in_c, out_c)?;
            let weights = r.f32s(o * i * k * k, name)?;
            let bias = r.f32s(o, name)?;
            layers.push(ConvLayer::new(k, i, o, weights, bias).expect("shape checked"));
        }
        if r.pos != bytes.len() {
            return Err(WeightsError::TrailingBytes(bytes.len() - r.pos));
        }
        let layers: [ConvLayer; 4] = layers.try_into().unwrap();
        Self::from_layers(layers)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightsError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightsError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn check_layer_shape(
    layer: &'static str,
    k: usize,
    i: usize,
    o: usize,
    found_k: usize,
    found_i: usize,
    found_o: usize,
) -> Result<(), WeightsError> {
    if (k, i, o) != (found_k, found_i, found_o) {
        return Err(WeightsError::Dimension {
            layer,
            expected: format!("{o}x{i}x{k}x{k}"),
            found: format!("{found_o}x{found_i}x{found_k}x{found_k}"),
        });
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], WeightsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(WeightsError::Truncated { section })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, section: &'static str) -> Result<Vec<f32>, WeightsError> {
        Ok(self
            .take(4 * n, section)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Runs the network on an `H×W×3` image with values in `[0, 1]`.
pub fn forward(image: &Tensor, weights: &LetNetWeights) -> Result<NetOutput, NetError> {
    if image.channels() != 3 {
        return Err(NetError::InputChannels(image.channels()));
    }
    let x = relu_in_place(conv2d(image, &weights.enc1)?);
    let x = relu_in_place(conv2d(&x, &weights.enc2)?);
    Ok(pointwise_head(&x, &weights.enc3, &weights.dec))
}

/// enc3, ReLU, dec and the output split fused into one pass per pixel. Each
/// value follows the same arithmetic as the layer-by-layer path.
fn pointwise_head(x: &Tensor, enc3: &ConvLayer, dec: &ConvLayer) -> NetOutput {
    const IC: usize = 8;
    const MID: usize = 16;
    let (h, w) = (x.height(), x.width());
    let mut w3 = [[0.0f32; MID]; IC];
    for (i, row) in w3.iter_mut().enumerate() {
        for (o, v) in row.iter_mut().enumerate() {
            *v = enc3.weight(o, i, 0, 0);
        }
    }
    let mut wd = [[0.0f32; 4]; MID];
    for (i, row) in wd.iter_mut().enumerate() {
        for (o, v) in row.iter_mut().enumerate() {
            *v = dec.weight(o, i, 0, 0);
        }
    }
    let b3: [f32; MID] = enc3.bias().try_into().unwrap();
    let bd: [f32; 4] = dec.bias().try_into().unwrap();
    let mut features = vec![0.0f32; h * w * 3];
    let mut scores = vec![0.0f32; h * w];
    let wide = crate::tensor::wide_simd_available();
    features
        .par_chunks_mut(w * 3)
        .zip(scores.par_chunks_mut(w))
        .zip(x.data().par_chunks(w * IC))
        .for_each(|((frow, srow), xrow)| {
            let params = HeadParams { w3: &w3, b3: &b3, wd: &wd, bd: &bd };
            #[cfg(target_arch = "x86_64")]
            if wide {
                // SAFETY: the required CPU feature was detected at runtime.
                unsafe { head_row_avx2(xrow, frow, srow, &params) };
                return;
            }
            head_row(xrow, frow, srow, &params);
        });
    NetOutput {
        score_map: Tensor::from_vec(h, w, 1, scores).unwrap(),
        feature_map: Tensor::from_vec(h, w, 3, features).unwrap(),
    }
}

/// Pixels interleaved by the fused head to hide accumulation latency.
const HEAD_BLOCK: usize = 4;

struct HeadParams<'a> {
    w3: &'a [[f32; 16]; 8],
    b3: &'a [f32; 16],
    wd: &'a [[f32; 4]; 16],
    bd: &'a [f32; 4],
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn head_row_avx2(xrow: &[f32], frow: &mut [f32], srow: &mut [f32], p: &HeadParams) {
    head_row(xrow, frow, srow, p)
}

#[inline(always)]
fn head_row(xrow: &[f32], frow: &mut [f32], srow: &mut [f32], p: &HeadParams) {
    let w = srow.len();
    let blocks = w / HEAD_BLOCK * HEAD_BLOCK;
    for x0 in (0..blocks).step_by(HEAD_BLOCK) {
        head_block::<HEAD_BLOCK>(xrow, frow, srow, x0, p);
    }
    for x0 in blocks..w {
        head_block::<1>(xrow, frow, srow, x0, p);
    }
}

#[inline(always)]
fn head_block<const B: usize>(xrow: &[f32], frow: &mut [f32], srow: &mut [f32], x0: usize, p: &HeadParams) {
    let mut mid = [*p.b3; B];
    for i in 0..8 {
        for (q, m) in mid.iter_mut().enumerate() {
            let v = xrow[(x0 + q) * 8 + i];
            for o in 0..16 {
                m[o] += v * p.w3[i][o];
            }
        }
    }
    let mut out = [*p.bd; B];
    for i in 0..16 {
        for (q, acc) in out.iter_mut().enumerate() {
            let v = mid[q][i].max(0.0);
            for o in 0..4 {
                acc[o] += v * p.wd[i][o];
            }
        }
    }
    for (q, o) in out.iter().enumerate() {
        let mut feat = [o[0], o[1], o[2]];
        crate::tensor::normalize_in_place(&mut feat, L2_EPSILON);
        frow[(x0 + q) * 3..(x0 + q + 1) * 3].copy_from_slice(&feat);
        srow[x0 + q] = crate::tensor::sigmoid(o[3]);
    }
}

fn relu_in_place(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = v.max(0.0);
    }
    t
}

/// Splits the 4-channel decoder output into the normalized feature map and
/// the sigmoid score map.
pub fn split_decoder(dec: &Tensor) -> NetOutput {
    assert_eq!(dec.channels(), 4);
    let n = dec.height() * dec.width();
    let mut features = Vec::with_capacity(n * 3);
    let mut scores = Vec::with_capacity(n);
    for px in dec.data().chunks_exact(4) {
        let mut f = [px[0], px[1], px[2]];
        crate::tensor::normalize_in_place(&mut f, L2_EPSILON);
        features.extend_from_slice(&f);
        scores.push(crate::tensor::sigmoid(px[3]));
    }
    NetOutput {
        score_map: Tensor::from_vec(dec.height(), dec.width(), 1, scores).unwrap(),
        feature_map: Tensor::from_vec(dec.height(), dec.width(), 3, features).unwrap(),
    }
}

/// Replicates a single-channel image to three channels.
pub fn gray_to_rgb(gray: &Tensor) -> Tensor {
    assert_eq!(gray.channels(), 1);
    Tensor::from_fn(gray.height(), gray.width(), 3, |y, x, _| gray.get(y, x, 0)).unwrap()
}
