//! Convolutional control regressor: image in, four stick values out.
//!
//! Activations inside the conv stack are stored channel-major across the
//! batch (`[C][B][H][W]`), so each layer is one GEMM over an im2col matrix
//! and no transposes are needed between layers. The network is generic over
//! the scalar type; `f64` is the verification mode.

use std::fmt::Debug;
use std::io::{self, Read, Write};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::Image;

pub const OUTPUTS: usize = 4;
const INPUT_CHANNELS: usize = 3;
const WEIGHTS_MAGIC: &[u8; 4] = b"UAVW";
const WEIGHTS_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input is {got_w}x{got_h}, network expects {want_w}x{want_h}")]
    Resolution { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("layer index {0} out of range")]
    LayerIndex(usize),
    #[error("weights file: {0}")]
    Format(String),
    #[error("config hash mismatch: file {file:016x}, expected {expected:016x}")]
    HashMismatch { file: u64, expected: u64 },
    #[error("weights checksum mismatch")]
    Checksum,
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Scalar type the network computes in.
pub trait Real:
    Copy
    + Send
    + Sync
    + Debug
    + Default
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    );
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Matrix operand: a slice viewed as `rows x cols`, optionally transposed.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    trans: bool,
}

impl<'a, T> Mat<'a, T> {
    fn n(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, trans: false }
    }
    /// Transpose of a row-major `rows x cols` matrix.
    fn t(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows: cols, cols: rows, trans: true }
    }
    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c`, `c` row-major.
fn gemm<T: Real>(a: Mat<T>, b: Mat<T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    unsafe {
        T::gemm_raw(
            m, k, n, T::ONE, a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::ZERO; shape.iter().product()] }
    }
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, NetError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NetError::Shape(format!("{shape:?} vs {} values", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { out_channels, kernel, stride }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width: usize,
    pub height: usize,
    pub conv: Vec<ConvSpec>,
    /// Widths of the fully connected layers; the last one is the output.
    pub fc: Vec<usize>,
    pub dropout: f64,
}

impl NetConfig {
    /// Desk-scale network at 64x36.
    pub fn reduced() -> Self {
        Self {
            width: 64,
            height: 36,
            conv: vec![
                ConvSpec::new(12, 5, 2),
                ConvSpec::new(18, 5, 2),
                ConvSpec::new(24, 5, 2),
                ConvSpec::new(32, 3, 2),
                ConvSpec::new(32, 3, 2),
            ],
            fc: vec![100, 50, OUTPUTS],
            dropout: 0.5,
        }
    }

    /// Full-width network at 320x180.
    pub fn full_size() -> Self {
        Self {
            width: 320,
            height: 180,
            conv: vec![
                ConvSpec::new(24, 5, 2),
                ConvSpec::new(36, 5, 2),
                ConvSpec::new(48, 5, 2),
                ConvSpec::new(64, 3, 2),
                ConvSpec::new(64, 3, 2),
            ],
            fc: vec![100, 50, OUTPUTS],
            dropout: 0.5,
        }
    }

    pub fn with_input(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Config(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("input resolution must be positive");
        }
        if self.conv.iter().any(|c| c.stride == 0 || c.kernel == 0 || c.out_channels == 0) {
            return bad("conv layers need positive channels, kernel and stride");
        }
        if self.fc.last() != Some(&OUTPUTS) {
            return bad("final fc width must be 4");
        }
        if self.fc.contains(&0) {
            return bad("fc widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout_rate must be in [0, 1)");
        }
        Ok(())
    }

    /// (channels, height, width) after each conv layer, input first.
    pub fn conv_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut out = vec![(INPUT_CHANNELS, self.height, self.width)];
        for c in &self.conv {
            let (_, h, w) = *out.last().unwrap();
            let p = c.kernel / 2;
            let ho = (h + 2 * p - c.kernel) / c.stride + 1;
            let wo = (w + 2 * p - c.kernel) / c.stride + 1;
            out.push((c.out_channels, ho, wo));
        }
        out
    }

    pub fn flatten_dim(&self) -> usize {
        let (c, h, w) = *self.conv_shapes().last().unwrap();
        c * h * w
    }

    pub fn layer_count(&self) -> usize {
        self.conv.len() + self.fc.len()
    }

    pub fn hash(&self) -> u64 {
        crate::track::hash64(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<T = f32> {
    pub config: NetConfig,
    pub seed: u64,
    pub conv: Vec<Layer<T>>,
    pub fc: Vec<Layer<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediate values kept for the backward pass.
pub struct Cache<T> {
    batch: usize,
    cols: Vec<Vec<T>>,
    /// Post-ReLU output of every conv layer.
    conv_out: Vec<Vec<T>>,
    /// Inputs of every fc layer (after dropout).
    fc_in: Vec<Vec<T>>,
    /// Post-ReLU (pre-dropout) output of every hidden fc layer.
    fc_act: Vec<Vec<T>>,
    masks: Vec<Option<Vec<T>>>,
}

impl<T: Real> NetParams<T> {
    /// Fan-in scaled uniform initialization.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = config.conv_shapes();
        let mut uniform = |n: usize, bound: f64| -> Vec<T> {
            (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
        };
        let mut conv = Vec::new();
        for (i, c) in config.conv.iter().enumerate() {
            let cin = shapes[i].0;
            let fan_in = cin * c.kernel * c.kernel;
            let w = uniform(c.out_channels * fan_in, (6.0 / fan_in as f64).sqrt());
            conv.push(Layer {
                weight: Tensor::from_vec(&[c.out_channels, cin, c.kernel, c.kernel], w)?,
                bias: Tensor::from_vec(&[c.out_channels], vec![T::from_f64(0.01); c.out_channels])?,
            });
        }
        let mut fc = Vec::new();
        let mut fan_in = config.flatten_dim();
        for (j, &width) in config.fc.iter().enumerate() {
            let last = j + 1 == config.fc.len();
            let bound = if last { (3.0 / fan_in as f64).sqrt() } else { (6.0 / fan_in as f64).sqrt() };
            let w = uniform(width * fan_in, bound);
            let b = if last { 0.0 } else { 0.01 };
            fc.push(Layer {
                weight: Tensor::from_vec(&[width, fan_in], w)?,
                bias: Tensor::from_vec(&[width], vec![T::from_f64(b); width])?,
            });
            fan_in = width;
        }
        Ok(Self { config: config.clone(), seed, conv, fc })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Layer<T>| Layer { weight: Tensor::zeros(&l.weight.shape), bias: Tensor::zeros(&l.bias.shape) };
        Self {
            config: self.config.clone(),
            seed: self.seed,
            conv: self.conv.iter().map(z).collect(),
            fc: self.fc.iter().map(z).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        let c = |l: &Layer<T>| Layer { weight: l.weight.cast(), bias: l.bias.cast() };
        NetParams {
            config: self.config.clone(),
            seed: self.seed,
            conv: self.conv.iter().map(c).collect(),
            fc: self.fc.iter().map(c).collect(),
        }
    }

    /// Every parameter tensor, layer by layer, weight before bias.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.conv.iter().chain(&self.fc).flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.conv.iter_mut().chain(self.fc.iter_mut()).flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Forward pass over a batch of images in `[B][3][H][W]` layout with
    /// values in [0, 1]. Returns `[B][4]` predictions.
    pub fn forward_batch(
        &self,
        input: &[T],
        batch: usize,
        mode: Mode,
        seed: u64,
        keep_cache: bool,
    ) -> Result<(Vec<T>, Option<Cache<T>>), NetError> {
        let cfg = &self.config;
        let shapes = cfg.conv_shapes();
        let (c0, h0, w0) = shapes[0];
        if input.len() != batch * c0 * h0 * w0 {
            return Err(NetError::Shape(format!("input has {} values for batch {batch}", input.len())));
        }
        let mut cache = Cache {
            batch,
            cols: Vec::new(),
            conv_out: Vec::new(),
            fc_in: Vec::new(),
            fc_act: Vec::new(),
            masks: Vec::new(),
        };
        let mut act: Vec<T> = Vec::new();
        for (l, spec) in cfg.conv.iter().enumerate() {
            let (cin, h, w) = shapes[l];
            let (cout, ho, wo) = shapes[l + 1];
            let src: &[T] = if l == 0 { input } else { &act };
            let layout = if l == 0 { InputLayout::BatchMajor } else { InputLayout::ChannelMajor };
            let geo = ConvGeom { cin, h, w, ho, wo, k: spec.kernel, stride: spec.stride, batch };
            let col = im2col(src, &geo, layout);
            let n = batch * ho * wo;
            let layer = &self.conv[l];
            let mut out = vec![T::ZERO; cout * n];
            for (c, row) in out.chunks_exact_mut(n).enumerate() {
                row.fill(layer.bias.data[c]);
            }
            gemm(Mat::n(&layer.weight.data, cout, geo.kk()), Mat::n(&col, geo.kk(), n), T::ONE, &mut out);
            relu_check(&mut out, l)?;
            if keep_cache {
                cache.cols.push(col);
                cache.conv_out.push(out.clone());
            }
            act = out;
        }

        // Flatten [C][B][HW] into [B][C*HW].
        let (cl, hl, wl) = *shapes.last().unwrap();
        let hw = hl * wl;
        let feat = cl * hw;
        let mut x = vec![T::ZERO; batch * feat];
        for c in 0..cl {
            for b in 0..batch {
                let src = &act[(c * batch + b) * hw..(c * batch + b + 1) * hw];
                x[b * feat + c * hw..b * feat + (c + 1) * hw].copy_from_slice(src);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - cfg.dropout;
        let mut fan_in = feat;
        for (j, layer) in self.fc.iter().enumerate() {
            let width = cfg.fc[j];
            let last = j + 1 == cfg.fc.len();
            let mut y = vec![T::ZERO; batch * width];
            for row in y.chunks_exact_mut(width) {
                row.copy_from_slice(&layer.bias.data);
            }
            gemm(Mat::n(&x, batch, fan_in), Mat::t(&layer.weight.data, width, fan_in), T::ONE, &mut y);
            let layer_index = cfg.conv.len() + j;
            if last {
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(NetError::NonFinite { layer: layer_index });
                }
                if keep_cache {
                    cache.fc_in.push(x);
                }
                return Ok((y, keep_cache.then_some(cache)));
            }
            relu_check(&mut y, layer_index)?;
            let mask = if mode == Mode::Train && cfg.dropout > 0.0 {
                let scale = T::from_f64(1.0 / keep);
                let m: Vec<T> = (0..y.len()).map(|_| if rng.gen::<f64>() < keep { scale } else { T::ZERO }).collect();
                Some(m)
            } else {
                None
            };
            let next: Vec<T> = match &mask {
                Some(m) => y.iter().zip(m).map(|(a, b)| *a * *b).collect(),
                None => y.clone(),
            };
            if keep_cache {
                cache.fc_in.push(x);
                cache.fc_act.push(y);
                cache.masks.push(mask);
            }
            x = next;
            fan_in = width;
        }
        unreachable!("config validated to end with an output layer")
    }

    /// Single-image forward in eval or train mode.
    pub fn forward(&self, image: &Image, mode: Mode, seed: u64) -> Result<[T; OUTPUTS], NetError> {
        let input = self.image_input(image)?;
        let (y, _) = self.forward_batch(&input, 1, mode, seed, false)?;
        Ok([y[0], y[1], y[2], y[3]])
    }

    pub fn image_input(&self, image: &Image) -> Result<Vec<T>, NetError> {
        let (w, h) = (image.width as usize, image.height as usize);
        if w != self.config.width || h != self.config.height {
            return Err(NetError::Resolution { got_w: w, got_h: h, want_w: self.config.width, want_h: self.config.height });
        }
        let mut out = vec![T::ZERO; 3 * w * h];
        pixels_to_input(&image.pixels, w * h, &mut out);
        Ok(out)
    }

    /// Gradients of the mean squared error with respect to every parameter.
    pub fn backward(&self, cache: &Cache<T>, pred: &[T], targets: &[T]) -> Result<NetParams<T>, NetError> {
        let batch = cache.batch;
        if pred.len() != batch * OUTPUTS || targets.len() != pred.len() {
            return Err(NetError::Shape("targets must be batch x 4".into()));
        }
        let cfg = &self.config;
        let mut grads = self.zeros_like();
        let scale = T::from_f64(2.0 / pred.len() as f64);
        let mut dy: Vec<T> = pred.iter().zip(targets).map(|(p, t)| (*p - *t) * scale).collect();

        for j in (0..self.fc.len()).rev() {
            let width = cfg.fc[j];
            let x = &cache.fc_in[j];
            let fan_in = x.len() / batch;
            let g = &mut grads.fc[j];
            gemm(Mat::t(&dy, batch, width), Mat::n(x, batch, fan_in), T::ZERO, &mut g.weight.data);
            for row in dy.chunks_exact(width) {
                for (b, v) in g.bias.data.iter_mut().zip(row) {
                    *b += *v;
                }
            }
            let mut dx = vec![T::ZERO; batch * fan_in];
            gemm(Mat::n(&dy, batch, width), Mat::n(&self.fc[j].weight.data, width, fan_in), T::ZERO, &mut dx);
            if j > 0 {
                let act = &cache.fc_act[j - 1];
                if let Some(m) = &cache.masks[j - 1] {
                    for (d, mv) in dx.iter_mut().zip(m) {
                        *d *= *mv;
                    }
                }
                for (d, a) in dx.iter_mut().zip(act) {
                    if *a <= T::ZERO {
                        *d = T::ZERO;
                    }
                }
            }
            dy = dx;
        }

        // Unflatten into [C][B][HW] and run back through the conv stack.
        let shapes = cfg.conv_shapes();
        let (cl, hl, wl) = *shapes.last().unwrap();
        let hw = hl * wl;
        let feat = cl * hw;
        let mut dout = vec![T::ZERO; feat * batch];
        for c in 0..cl {
            for b in 0..batch {
                dout[(c * batch + b) * hw..(c * batch + b + 1) * hw]
                    .copy_from_slice(&dy[b * feat + c * hw..b * feat + (c + 1) * hw]);
            }
        }
        for l in (0..cfg.conv.len()).rev() {
            let (cin, h, w) = shapes[l];
            let (cout, ho, wo) = shapes[l + 1];
            let spec = cfg.conv[l];
            let geo = ConvGeom { cin, h, w, ho, wo, k: spec.kernel, stride: spec.stride, batch };
            let n = batch * ho * wo;
            for (d, a) in dout.iter_mut().zip(&cache.conv_out[l]) {
                if *a <= T::ZERO {
                    *d = T::ZERO;
                }
            }
            let g = &mut grads.conv[l];
            gemm(Mat::n(&dout, cout, n), Mat::t(&cache.cols[l], geo.kk(), n), T::ZERO, &mut g.weight.data);
            for (c, row) in dout.chunks_exact(n).enumerate() {
                let mut s = T::ZERO;
                for v in row {
                    s += *v;
                }
                g.bias.data[c] = s;
            }
            if l > 0 {
                let mut dcol = vec![T::ZERO; geo.kk() * n];
                gemm(Mat::t(&self.conv[l].weight.data, cout, geo.kk()), Mat::n(&dout, cout, n), T::ZERO, &mut dcol);
                dout = col2im(&dcol, &geo);
            }
        }
        Ok(grads)
    }

    /// Loss and gradients for one batch.
    pub fn loss_and_grad(
        &self,
        input: &[T],
        targets: &[T],
        batch: usize,
        mode: Mode,
        seed: u64,
    ) -> Result<(f64, NetParams<T>), NetError> {
        let (pred, cache) = self.forward_batch(input, batch, mode, seed, true)?;
        let l = loss(&pred, targets)?;
        let g = self.backward(cache.as_ref().expect("cache kept"), &pred, targets)?;
        Ok((l, g))
    }
}

/// Mean over batch and channels of the squared error.
pub fn loss<T: Real>(pred: &[T], targets: &[T]) -> Result<f64, NetError> {
    if pred.len() != targets.len() || pred.len() % OUTPUTS != 0 {
        return Err(NetError::Shape(format!("{} predictions vs {} targets", pred.len(), targets.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.iter().zip(targets).map(|(p, t)| (p.to_f64() - t.to_f64()).powi(2)).sum();
    Ok(s / pred.len() as f64)
}

fn relu_check<T: Real>(v: &mut [T], layer: usize) -> Result<(), NetError> {
    for x in v.iter_mut() {
        if !x.is_finite() {
            return Err(NetError::NonFinite { layer });
        }
        if *x < T::ZERO {
            *x = T::ZERO;
        }
    }
    Ok(())
}

/// Converts interleaved RGB bytes to planar [0, 1] values.
pub fn pixels_to_input<T: Real>(pixels: &[u8], plane: usize, out: &mut [T]) {
    let inv = 1.0 / 255.0;
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = T::from_f64(px[c] as f64 * inv);
        }
    }
}

#[derive(Clone, Copy)]
enum InputLayout {
    /// `[B][C][H][W]`
    BatchMajor,
    /// `[C][B][H][W]`
    ChannelMajor,
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    batch: usize,
}

impl ConvGeom {
    fn kk(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<T: Real>(src: &[T], g: &ConvGeom, layout: InputLayout) -> Vec<T> {
    let plane = g.h * g.w;
    let (cs, bs) = match layout {
        InputLayout::BatchMajor => (plane, g.cin * plane),
        InputLayout::ChannelMajor => (g.batch * plane, plane),
    };
    let pad = (g.k / 2) as isize;
    let n = g.batch * g.ho * g.wo;
    let mut col = vec![T::ZERO; g.kk() * n];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &mut col[r * n..(r + 1) * n];
                for b in 0..g.batch {
                    let base = c * cs + b * bs;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride) as isize + ky as isize - pad;
                        let dst = &mut row[(b * g.ho + oy) * g.wo..(b * g.ho + oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[base + iy as usize * g.w..base + (iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `im2col` for channel-major layout.
fn col2im<T: Real>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.h * g.w;
    let pad = (g.k / 2) as isize;
    let n = g.batch * g.ho * g.wo;
    let mut out = vec![T::ZERO; g.cin * g.batch * plane];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let row = &col[r * n..(r + 1) * n];
                for b in 0..g.batch {
                    let base = (c * g.batch + b) * plane;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &row[(b * g.ho + oy) * g.wo..(b * g.ho + oy + 1) * g.wo];
                        let dst = base + iy as usize * g.w;
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                out[dst + ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &NetParams<T>, config: AdamConfig) -> Self {
        let m: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::ZERO; t.len()]).collect();
        Self { config, t: 0, v: m.clone(), m }
    }

    pub fn update(&mut self, params: &mut NetParams<T>, grads: &NetParams<T>) {
        self.t += 1;
        let c = &self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::ONE;
        let lr_t = T::from_f64(c.lr * (1.0 - c.beta2.powi(self.t as i32)).sqrt() / (1.0 - c.beta1.powi(self.t as i32)));
        let eps = T::from_f64(c.eps);
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                p.data[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Images with stick targets, held in memory as raw RGB bytes.
#[derive(Clone, Debug, Default)]
pub struct MemoryDataset {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub targets: Vec<[f32; OUTPUTS]>,
}

impl MemoryDataset {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, ..Default::default() }
    }
    pub fn len(&self) -> usize {
        self.targets.len()
    }
    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
    pub fn push(&mut self, image: &Image, target: [f32; OUTPUTS]) {
        assert_eq!((image.width as usize, image.height as usize), (self.width, self.height));
        self.pixels.extend_from_slice(&image.pixels);
        self.targets.push(target);
    }
    pub fn sample(&self, i: usize) -> (&[u8], [f32; OUTPUTS]) {
        let n = self.width * self.height * 3;
        (&self.pixels[i * n..(i + 1) * n], self.targets[i])
    }
    pub fn extend(&mut self, other: &MemoryDataset) {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.pixels.extend_from_slice(&other.pixels);
        self.targets.extend_from_slice(&other.targets);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many updates, even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), batch_size: 64, epochs: 10, max_steps: None, seed: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    /// Mean training loss of each (possibly partial) epoch.
    pub epochs: Vec<f64>,
    pub steps: usize,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in self.epochs.iter().enumerate() {
            s.push_str(&format!("{},{:.9e}\n", i + 1, l));
        }
        s
    }
}

/// Mini-batch Adam training; bitwise reproducible for a given seed.
pub fn train(
    params: &mut NetParams<f32>,
    data: &MemoryDataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<LossCurve, NetError> {
    if data.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    if (data.width, data.height) != (params.config.width, params.config.height) {
        return Err(NetError::Resolution {
            got_w: data.width,
            got_h: data.height,
            want_w: params.config.width,
            want_h: params.config.height,
        });
    }
    let mut adam = AdamState::new(params, cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plane = data.width * data.height;
    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = LossCurve::default();
    let mut input = vec![0f32; batch * 3 * plane];
    let mut targets = vec![0f32; batch * OUTPUTS];
    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(batch) {
            if cfg.max_steps.is_some_and(|m| curve.steps >= m) {
                break;
            }
            let b = chunk.len();
            for (k, &i) in chunk.iter().enumerate() {
                let (px, t) = data.sample(i);
                pixels_to_input(px, plane, &mut input[k * 3 * plane..(k + 1) * 3 * plane]);
                targets[k * OUTPUTS..(k + 1) * OUTPUTS].copy_from_slice(&t);
            }
            let step_seed = cfg.seed ^ (curve.steps as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let (l, g) = params.loss_and_grad(
                &input[..b * 3 * plane],
                &targets[..b * OUTPUTS],
                b,
                Mode::Train,
                step_seed,
            )?;
            if !l.is_finite() {
                return Err(NetError::NonFiniteLoss { step: curve.steps, loss: l });
            }
            adam.update(params, &g);
            curve.steps += 1;
            sum += l * b as f64;
            count += b;
        }
        if count > 0 {
            let mean = sum / count as f64;
            curve.epochs.push(mean);
            progress(epoch, mean);
        }
        if cfg.max_steps.is_some_and(|m| curve.steps >= m) {
            break 'outer;
        }
    }
    Ok(curve)
}

/// Arithmetic used for the loss evaluations of the finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdArithmetic {
    /// Same type as the network.
    Native,
    /// The probed parameters exactly as stored, evaluated in f64.
    Wide,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Sampled entries per layer, weights and biases together.
    pub per_layer: usize,
    pub seed: u64,
    pub arithmetic: FdArithmetic,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-3, per_layer: 200, seed: 1, arithmetic: FdArithmetic::Native }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes whose ±eps step flipped some ReLU; finite differences are not
    /// a derivative there, so they are left out.
    pub kinked: usize,
    /// Compared entries per parameter tensor.
    pub per_tensor: Vec<usize>,
    /// (tensor index, element, analytic, numeric) of the worst entry.
    pub worst: (usize, usize, f64, f64),
}

/// Compares analytic gradients with central finite differences on a random
/// subsample of every layer. Dropout is disabled. The relative error is
/// |a - n| / max(|a| + |n|, 1e-8).
pub fn gradient_check<T: Real>(
    params: &NetParams<T>,
    input: &[T],
    targets: &[T],
    batch: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheck, NetError> {
    gradient_check_with(params, input, targets, batch, opts, |g| g)
}

/// As `gradient_check`, with a hook that may tamper with the analytic
/// gradients before comparison.
pub fn gradient_check_with<T: Real>(
    params: &NetParams<T>,
    input: &[T],
    targets: &[T],
    batch: usize,
    opts: &GradCheckOptions,
    tamper: impl FnOnce(NetParams<T>) -> NetParams<T>,
) -> Result<GradCheck, NetError> {
    let (_, grads) = params.loss_and_grad(input, targets, batch, Mode::Eval, 0)?;
    let grads = tamper(grads);
    match opts.arithmetic {
        FdArithmetic::Native => fd_compare(params, input, targets, batch, opts, &grads, |v: T| v),
        FdArithmetic::Wide => {
            let wide: NetParams<f64> = params.cast();
            let x: Vec<f64> = input.iter().map(|v| v.to_f64()).collect();
            let t: Vec<f64> = targets.iter().map(|v| v.to_f64()).collect();
            fd_compare(&wide, &x, &t, batch, opts, &grads, |v: f64| T::from_f64(v))
        }
    }
}

/// Finite differences on `params`; `narrow` rounds a probe value to the
/// precision of the network whose gradients are checked.
fn fd_compare<T: Real, G: Real>(
    params: &NetParams<T>,
    input: &[T],
    targets: &[T],
    batch: usize,
    opts: &GradCheckOptions,
    grads: &NetParams<G>,
    narrow: impl Fn(T) -> G,
) -> Result<GradCheck, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let eval = |p: &NetParams<T>| -> Result<(f64, Vec<bool>), NetError> {
        let (pred, cache) = p.forward_batch(input, batch, Mode::Eval, 0, true)?;
        let cache = cache.expect("cache requested");
        let pattern = cache.conv_out.iter().chain(&cache.fc_act).flatten().map(|v| *v > T::ZERO).collect();
        Ok((loss(&pred, targets)?, pattern))
    };
    let (_, base_pattern) = eval(params)?;
    let grad_tensors = grads.tensors();
    let n_tensors = grad_tensors.len();
    let mut result = GradCheck { max_rel_error: 0.0, checked: 0, kinked: 0, per_tensor: vec![0; n_tensors], worst: (0, 0, 0.0, 0.0) };
    for ti in 0..n_tensors {
        let len = grad_tensors[ti].len();
        // Tensors alternate weight, bias. Biases get up to a quarter of the
        // layer budget, weights the rest.
        let share = if ti % 2 == 1 {
            (opts.per_layer / 4).min(len)
        } else {
            opts.per_layer - (opts.per_layer / 4).min(grad_tensors[ti + 1].len())
        };
        let picks: Vec<usize> =
            if len <= share { (0..len).collect() } else { rand::seq::index::sample(&mut rng, len, share).into_vec() };
        for i in picks {
            let orig = probe.tensors()[ti].data[i];
            // Steps are taken in the checked precision.
            let hi = narrow(T::from_f64(orig.to_f64() + opts.eps)).to_f64();
            let lo = narrow(T::from_f64(orig.to_f64() - opts.eps)).to_f64();
            probe.tensors_mut()[ti].data[i] = T::from_f64(hi);
            let (up, up_pattern) = eval(&probe)?;
            probe.tensors_mut()[ti].data[i] = T::from_f64(lo);
            let (down, down_pattern) = eval(&probe)?;
            probe.tensors_mut()[ti].data[i] = orig;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                result.kinked += 1;
                continue;
            }
            let numeric = (up - down) / (hi - lo);
            let analytic = grad_tensors[ti].data[i].to_f64();
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            result.checked += 1;
            result.per_tensor[ti] += 1;
            if rel > result.max_rel_error {
                result.max_rel_error = rel;
                result.worst = (ti, i, analytic, numeric);
            }
        }
    }
    Ok(result)
}

/// 8-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

/// Activation maps of conv layer `layer` (1-based), one per channel,
/// min-max normalized to 0..=255.
pub fn export_feature_maps<T: Real>(params: &NetParams<T>, image: &Image, layer: usize) -> Result<Vec<GrayImage>, NetError> {
    if layer == 0 || layer > params.config.conv.len() {
        return Err(NetError::LayerIndex(layer));
    }
    let input = params.image_input(image)?;
    let (_, cache) = params.forward_batch(&input, 1, Mode::Eval, 0, true)?;
    let cache = cache.expect("cache kept");
    let (c, h, w) = params.config.conv_shapes()[layer];
    let act = &cache.conv_out[layer - 1];
    let plane = h * w;
    Ok((0..c)
        .map(|ch| {
            let m = &act[ch * plane..(ch + 1) * plane];
            let lo = m.iter().map(|v| v.to_f64()).fold(f64::INFINITY, f64::min);
            let hi = m.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let pixels = m
                .iter()
                .map(|v| if hi > lo { ((v.to_f64() - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 })
                .collect();
            GrayImage { width: w as u32, height: h as u32, pixels }
        })
        .collect())
}

pub fn save_weights<W: Write>(params: &NetParams<f32>, mut w: W) -> Result<(), NetError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&params.config.hash().to_le_bytes());
    buf.extend_from_slice(&params.seed.to_le_bytes());
    let tensors = params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_weights<R: Read>(config: &NetConfig, mut r: R) -> Result<NetParams<f32>, NetError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let fmt = |m: &str| NetError::Format(m.to_string());
    if buf.len() < 4 + 2 + 8 + 8 + 4 + 4 {
        return Err(fmt("truncated"));
    }
    if &buf[..4] != WEIGHTS_MAGIC {
        return Err(fmt("bad magic"));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(NetError::Checksum);
    }
    let mut cur = Cursor { data: body, pos: 4 };
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(fmt("unsupported version"));
    }
    let hash = cur.u64()?;
    if hash != config.hash() {
        return Err(NetError::HashMismatch { file: hash, expected: config.hash() });
    }
    let seed = cur.u64()?;
    let mut params = NetParams::<f32>::init(config, seed)?;
    let count = cur.u32()? as usize;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(fmt("tensor count mismatch"));
    }
    for t in tensors.iter_mut() {
        let ndims = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(cur.u32()? as usize);
        }
        if shape != t.shape {
            return Err(fmt("tensor shape mismatch"));
        }
        let bytes = cur.take(t.data.len() * 4)?;
        for (v, b) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    if cur.pos != body.len() {
        return Err(fmt("trailing bytes"));
    }
    Ok(params)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.data.len() {
            return Err(NetError::Format("truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            width: 16,
            height: 9,
            conv: vec![ConvSpec::new(4, 5, 2), ConvSpec::new(6, 3, 2)],
            fc: vec![10, OUTPUTS],
            dropout: 0.5,
        }
    }

    fn random_input<T: Real>(n: usize, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| T::from_f64(rng.gen::<f64>())).collect()
    }

    #[test]
    fn reduced_shapes() {
        let c = NetConfig::reduced();
        let s = c.conv_shapes();
        let hw: Vec<(usize, usize)> = s.iter().map(|x| (x.2, x.1)).collect();
        assert_eq!(hw, vec![(64, 36), (32, 18), (16, 9), (8, 5), (4, 3), (2, 2)]);
        assert_eq!(c.flatten_dim(), 128);
        let p = NetConfig::full_size();
        assert_eq!(p.conv.len() + p.fc.len(), 8);
        assert_eq!(*p.fc.last().unwrap(), 4);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut p = NetParams::<f32>::init(&NetConfig::reduced(), 3).unwrap();
        for t in p.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let img = Image::filled(64, 36, [120, 40, 200]);
        assert_eq!(p.forward(&img, Mode::Eval, 0).unwrap(), [0.0; 4]);
    }

    #[test]
    fn resolution_mismatch_is_error() {
        let p = NetParams::<f32>::init(&NetConfig::reduced(), 3).unwrap();
        assert!(matches!(p.forward(&Image::new(32, 18), Mode::Eval, 0), Err(NetError::Resolution { .. })));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[1f32, 0.0, 0.0, 0.0], &[0.0; 4]).unwrap(), 0.25);
        let p = [0.3f32, -0.2, 0.5, 0.1];
        let t = [0.0f32, 0.1, 0.2, -0.4];
        let single = loss(&p, &t).unwrap();
        let pp: Vec<f32> = p.iter().chain(&p).copied().collect();
        let tt: Vec<f32> = t.iter().chain(&t).copied().collect();
        assert!((loss(&pp, &tt).unwrap() - single).abs() < 1e-15);
        assert!(loss(&p, &t[..3]).is_err());
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = ConvGeom { cin: 2, h: 5, w: 7, ho: 3, wo: 4, k: 3, stride: 2, batch: 2 };
        let x: Vec<f64> = random_input(2 * 2 * 35, 1);
        let y: Vec<f64> = random_input(g.kk() * 2 * 12, 2);
        let col = im2col(&x, &g, InputLayout::ChannelMajor);
        let back = col2im(&y, &g);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gradient_check_f64_tiny() {
        let p = NetParams::<f64>::init(&tiny(), 5).unwrap();
        let x: Vec<f64> = random_input(2 * 3 * 144, 9);
        let t: Vec<f64> = random_input(8, 10);
        let opts = GradCheckOptions { eps: 1e-6, ..Default::default() };
        let r = gradient_check(&p, &x, &t, 2, &opts).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn corrupted_bias_gradient_is_flagged() {
        let p = NetParams::<f64>::init(&tiny(), 5).unwrap();
        let x: Vec<f64> = random_input(2 * 3 * 144, 9);
        let t: Vec<f64> = random_input(8, 10);
        let opts = GradCheckOptions { eps: 1e-6, ..Default::default() };
        let r = gradient_check_with(&p, &x, &t, 2, &opts, |mut g| {
            g.fc[1].bias.data.iter_mut().for_each(|v| *v = -*v * 3.0 + 0.5);
            g
        })
        .unwrap();
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn zero_input_gradients() {
        let p = NetParams::<f64>::init(&tiny(), 5).unwrap();
        let x = vec![0f64; 3 * 144];
        let (_, g) = p.loss_and_grad(&x, &[1.0, -1.0, 0.5, 0.2], 1, Mode::Eval, 0).unwrap();
        assert!(g.conv[0].weight.data.iter().all(|v| *v == 0.0));
        assert!(g.conv[0].bias.data.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_loss_zero_gradient() {
        let p = NetParams::<f64>::init(&tiny(), 5).unwrap();
        let x: Vec<f64> = random_input(3 * 144, 3);
        let (pred, _) = p.forward_batch(&x, 1, Mode::Eval, 0, false).unwrap();
        let (l, g) = p.loss_and_grad(&x, &pred, 1, Mode::Eval, 0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.tensors().iter().all(|t| t.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn lr_zero_leaves_params() {
        let cfg = tiny();
        let mut p = NetParams::<f32>::init(&cfg, 2).unwrap();
        let before = p.clone();
        let mut data = MemoryDataset::new(16, 9);
        for i in 0..5u8 {
            data.push(&Image::filled(16, 9, [i * 40, 10, 90]), [0.1, 0.2, 0.3, 0.4]);
        }
        let tc = TrainConfig { adam: AdamConfig { lr: 0.0, ..Default::default() }, epochs: 3, batch_size: 2, ..Default::default() };
        train(&mut p, &data, &tc, |_, _| {}).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn weights_round_trip_and_hash_check() {
        let p = NetParams::<f32>::init(&NetConfig::reduced(), 11).unwrap();
        let mut buf = Vec::new();
        save_weights(&p, &mut buf).unwrap();
        let q = load_weights(&NetConfig::reduced(), &buf[..]).unwrap();
        assert_eq!(p, q);
        assert!(matches!(load_weights(&tiny(), &buf[..]), Err(NetError::HashMismatch { .. })));
        let mut bad = buf.clone();
        bad[40] ^= 1;
        assert!(matches!(load_weights(&NetConfig::reduced(), &bad[..]), Err(NetError::Checksum)));
        assert!(load_weights(&NetConfig::reduced(), &buf[..10]).is_err());
    }

    #[test]
    fn feature_maps() {
        let cfg = NetConfig::reduced();
        let p = NetParams::<f32>::init(&cfg, 4).unwrap();
        let img = Image::filled(64, 36, [200, 30, 30]);
        let maps = export_feature_maps(&p, &img, 1).unwrap();
        assert_eq!(maps.len(), 12);
        for m in &maps {
            assert_eq!((m.width, m.height), (32, 18));
            // Away from a 1-pixel border the response to a constant image is constant.
            let inner: Vec<u8> = (1..17).flat_map(|y| (1..31).map(move |x| (x, y))).map(|(x, y)| m.pixels[y * 32 + x]).collect();
            assert!(inner.iter().all(|v| *v == inner[0]));
        }
        let textured = Image { width: 64, height: 36, pixels: (0..64 * 36 * 3).map(|i| (i * 37 % 251) as u8).collect() };
        let maps = export_feature_maps(&p, &textured, 2).unwrap();
        assert!(maps.iter().any(|m| m.pixels.contains(&255)));
        assert!(matches!(export_feature_maps(&p, &img, 6), Err(NetError::LayerIndex(6))));
    }
}
