//! Layer kernels and their vector-Jacobian products.
//!
//! Feature maps are `N×C×H×W` (batch-leading); most kernels also accept a
//! rank-3 `C×H×W` map, treated as a batch of one.

use crate::error::{Error, Result};
use crate::tensor::{Point2D, Scalar, Tensor};

/// Boundary rule for convolutions and finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PaddingMode {
    #[default]
    Zero,
    Replicate,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;
/// sqrt(2/pi), the constant of the tanh GELU approximation.
pub const GELU_COEFF: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

/// View a rank-3 or rank-4 map as `(n, c, h, w)`.
pub(crate) fn as_nchw<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        &[c, h, w] => Ok((1, c, h, w)),
        &[n, c, h, w] => Ok((n, c, h, w)),
        s => Err(Error::shape(format!("expected C×H×W or N×C×H×W, got {s:?}"))),
    }
}

fn with_batch_shape<T: Scalar>(like: &Tensor<T>, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if like.rank() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    mode: PaddingMode,
}

impl ConvGeom {
    fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, mode: PaddingMode) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::shape(format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        let pad = (k - 1) / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!("input {h}×{w} smaller than kernel {k}")));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out,
            w_out,
            mode,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source pixel for output (oy, ox) and kernel tap (ky, kx), or `None`
    /// when the tap falls in zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        let inside = iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w;
        match (inside, self.mode) {
            (true, _) => Some((iy as usize, ix as usize)),
            (false, PaddingMode::Zero) => None,
            (false, PaddingMode::Replicate) => Some((
                iy.clamp(0, self.h as isize - 1) as usize,
                ix.clamp(0, self.w as isize - 1) as usize,
            )),
        }
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let out_len = self.out_len();
        let k = self.k;
        for c in 0..self.c_in {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * out_len..][..out_len];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            row[oy * self.w_out + ox] = match self.source(oy, ox, ky, kx) {
                                Some((iy, ix)) => plane[iy * self.w + ix],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let out_len = self.out_len();
        let k = self.k;
        for c in 0..self.c_in {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * out_len..][..out_len];
                    for oy in 0..self.h_out {
                        for ox in 0..self.w_out {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                plane[iy * self.w + ix] += row[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_setup<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: PaddingMode,
) -> Result<(usize, usize, ConvGeom)> {
    let (n, c_in, h, w) = as_nchw(input)?;
    let (c_out, kc, kh, kw) = kernel.dims4()?;
    if kc != c_in {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {c_in} channels, kernel expects {kc}"
        )));
    }
    if kh != kw {
        return Err(Error::shape(format!("kernel must be square, got {kh}×{kw}")));
    }
    Ok((n, c_out, ConvGeom::new(c_in, h, w, kh, stride, padding)?))
}

/// Cross-correlation with "same"-style padding of `(k-1)/2`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: PaddingMode,
) -> Result<Tensor<T>> {
    let (n, c_out, g) = conv_setup(input, kernel, stride, padding)?;
    bias.expect_shape(&[c_out])?;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.out_len();
    let mut out = vec![T::zero(); n * c_out * out_len];
    let mut cols = vec![T::zero(); g.patch_len() * out_len];
    for b in 0..n {
        let dst = &mut out[b * c_out * out_len..(b + 1) * c_out * out_len];
        for (co, row) in dst.chunks_mut(out_len).enumerate() {
            row.fill(bias.data()[co]);
        }
        g.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        T::gemm(c_out, g.patch_len(), out_len, kernel.data(), false, &cols, false, dst, true);
    }
    Ok(Tensor::from_parts(
        with_batch_shape(input, n, c_out, g.h_out, g.w_out),
        out,
    ))
}

/// Gradients of [`conv2d`] given the upstream gradient of its output.
/// Returns `(d_input, d_kernel, d_bias)`; `d_input` only when requested.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: PaddingMode,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (n, c_out, g) = conv_setup(input, kernel, stride, padding)?;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.out_len();
    let plen = g.patch_len();
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); c_out];
    let mut gx = need_input.then(|| vec![T::zero(); input.len()]);
    let mut cols = vec![T::zero(); plen * out_len];
    for b in 0..n {
        let gy = &grad_out.data()[b * c_out * out_len..(b + 1) * c_out * out_len];
        for (co, row) in gy.chunks(out_len).enumerate() {
            gb[co] += row.iter().copied().sum::<T>();
        }
        g.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        // gk += gy · colsᵀ
        T::gemm(c_out, out_len, plen, gy, false, &cols, true, &mut gk, true);
        if let Some(gx) = gx.as_mut() {
            // gcols = kernelᵀ · gy
            T::gemm(plen, c_out, out_len, kernel.data(), true, gy, false, &mut cols, false);
            g.col2im(&cols, &mut gx[b * in_len..(b + 1) * in_len]);
        }
    }
    Ok((
        gx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
        Tensor::from_parts(vec![c_out], gb),
    ))
}

// ---------------------------------------------------------------------------
// batch norm

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    /// Momentum update from batch statistics; the variance update uses the
    /// unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats<T>) {
        let m = T::of(BN_MOMENTUM);
        let count = T::of(batch.count as f64);
        let unbias = if batch.count > 1 {
            count / (count - T::one())
        } else {
            T::one()
        };
        for c in 0..self.mean.len() {
            let rm = &mut self.mean.data_mut()[c];
            *rm = (T::one() - m) * *rm + m * batch.mean[c];
            let rv = &mut self.var.data_mut()[c];
            *rv = (T::one() - m) * *rv + m * batch.var[c] * unbias;
        }
    }
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

/// Saved forward quantities for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub invstd: Vec<T>,
    pub training: bool,
}

fn bn_layout<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = as_nchw(x)?;
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    Ok((n, c, h * w))
}

/// Per-channel normalization. In training mode batch statistics are used and
/// `stats` receives the momentum update; in eval mode `stats` is read-only.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    training: bool,
) -> Result<Tensor<T>> {
    if training {
        let (y, _, batch) = batch_norm_train_forward(input, gamma, beta)?;
        stats.update(&batch);
        Ok(y)
    } else {
        Ok(batch_norm_eval_forward(input, gamma, beta, stats)?.0)
    }
}

pub(crate) fn batch_norm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>, BatchStats<T>)> {
    let (n, c, s) = bn_layout(x, gamma, beta)?;
    let count = n * s;
    let inv_count = T::one() / T::of(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let d = x.data();
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            acc += d[(b * c + ch) * s..][..s].iter().copied().sum::<T>();
        }
        let mu = acc * inv_count;
        let mut sq = T::zero();
        for b in 0..n {
            for &v in &d[(b * c + ch) * s..][..s] {
                sq += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = sq * inv_count;
    }
    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let xh = (d[i] - mean[ch]) * invstd[ch];
                xhat[i] = xh;
                y[i] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        BatchNormCache {
            xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
            invstd,
            training: true,
        },
        BatchStats { mean, var, count },
    ))
}

pub(crate) fn batch_norm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, s) = bn_layout(x, gamma, beta)?;
    stats.mean.expect_shape(&[c])?;
    let invstd: Vec<T> = stats
        .var
        .data()
        .iter()
        .map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt())
        .collect();
    let d = x.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let xh = (d[i] - stats.mean.data()[ch]) * invstd[ch];
                xhat[i] = xh;
                y[i] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        BatchNormCache {
            xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
            invstd,
            training: false,
        },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`. Eval mode treats the running
/// statistics as constants.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = as_nchw(grad_out)?;
    let s = h * w;
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let mut gx = vec![T::zero(); gy.len()];
    let mut gg = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                sum_g += gy[i];
                sum_gx += gy[i] * xh[i];
            }
        }
        gg[ch] = sum_gx;
        gbeta[ch] = sum_g;
        let scale = gamma.data()[ch] * cache.invstd[ch];
        let count = T::of((n * s) as f64);
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                gx[i] = if cache.training {
                    scale * (gy[i] - sum_g / count - xh[i] * sum_gx / count)
                } else {
                    scale * gy[i]
                };
            }
        }
    }
    Ok((
        Tensor::from_parts(grad_out.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], gg),
        Tensor::from_parts(vec![c], gbeta),
    ))
}

// ---------------------------------------------------------------------------
// layer norm over channels

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub invstd: Vec<T>,
}

/// Normalizes across the channel axis independently at every pixel.
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (n, c, s) = bn_layout(x, gamma, beta)?;
    let d = x.data();
    let mut xhat = vec![T::zero(); d.len()];
    let mut y = vec![T::zero(); d.len()];
    let mut invstd = vec![T::zero(); n * s];
    let inv_c = T::one() / T::of(c as f64);
    for b in 0..n {
        let base = b * c * s;
        for p in 0..s {
            let mut mu = T::zero();
            for ch in 0..c {
                mu += d[base + ch * s + p];
            }
            mu *= inv_c;
            let mut var = T::zero();
            for ch in 0..c {
                let v = d[base + ch * s + p] - mu;
                var += v * v;
            }
            let is = T::one() / (var * inv_c + T::of(LN_EPS)).sqrt();
            invstd[b * s + p] = is;
            for ch in 0..c {
                let i = base + ch * s + p;
                let xh = (d[i] - mu) * is;
                xhat[i] = xh;
                y[i] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        LayerNormCache {
            xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
            invstd,
        },
    ))
}

pub fn layer_norm_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &LayerNormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = as_nchw(grad_out)?;
    let s = h * w;
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let g = gamma.data();
    let mut gx = vec![T::zero(); gy.len()];
    let mut gg = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let cf = T::of(c as f64);
    for b in 0..n {
        let base = b * c * s;
        for p in 0..s {
            let (mut sum, mut sum_x) = (T::zero(), T::zero());
            for ch in 0..c {
                let i = base + ch * s + p;
                let gxh = gy[i] * g[ch];
                sum += gxh;
                sum_x += gxh * xh[i];
                gg[ch] += gy[i] * xh[i];
                gbeta[ch] += gy[i];
            }
            let is = cache.invstd[b * s + p];
            for ch in 0..c {
                let i = base + ch * s + p;
                let gxh = gy[i] * g[ch];
                gx[i] = is * (gxh - sum / cf - xh[i] * sum_x / cf);
            }
        }
    }
    Ok((
        Tensor::from_parts(grad_out.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], gg),
        Tensor::from_parts(vec![c], gbeta),
    ))
}

// ---------------------------------------------------------------------------
// activations

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_COEFF);
    let inner = k * (x + T::of(GELU_CUBIC) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_COEFF);
    let c = T::of(GELU_CUBIC);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

// ---------------------------------------------------------------------------
// bilinear resampling

/// Source taps `(i0, i1, frac)` along one axis, align-corners=false.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("upsample target size must be at least 1×1"));
    }
    let (n, c, h, w) = as_nchw(x)?;
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let d = x.data();
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &d[plane * h * w..][..h * w];
        let dst = &mut out[plane * out_h * out_w..][..out_h * out_w];
        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                let lx = T::of(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * out_w + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    Ok(Tensor::from_parts(with_batch_shape(x, n, c, out_h, out_w), out))
}

pub fn bilinear_upsample_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("upsample backward needs rank 3 or 4")),
    };
    let (_, _, out_h, out_w) = as_nchw(grad_out)?;
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &g[plane * out_h * out_w..][..out_h * out_w];
        let dst = &mut gx[plane * h * w..][..h * w];
        for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                let lx = T::of(lx);
                let v = src[oy * out_w + ox];
                dst[y0 * w + x0] += v * (T::one() - ly) * (T::one() - lx);
                dst[y0 * w + x1] += v * (T::one() - ly) * lx;
                dst[y1 * w + x0] += v * ly * (T::one() - lx);
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), gx))
}

/// Four flat spatial indices and weights interpolating an `h×w` grid at `p`,
/// after clamping `p` into `[0, w-1]×[0, h-1]`.
pub fn bilinear_taps<T: Scalar>(p: Point2D, h: usize, w: usize) -> [(usize, T); 4] {
    let x = p.x.clamp(0.0, (w - 1) as f64);
    let y = p.y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = T::of(x - x0 as f64);
    let ay = T::of(y - y0 as f64);
    let one = T::one();
    [
        (y0 * w + x0, (one - ay) * (one - ax)),
        (y0 * w + x1, (one - ay) * ax),
        (y1 * w + x0, ay * (one - ax)),
        (y1 * w + x1, ay * ax),
    ]
}

/// Channel vector of a `C×H×W` map at a continuous position.
pub fn bilinear_sample<T: Scalar>(feature: &Tensor<T>, p: Point2D) -> Result<Tensor<T>> {
    let (c, h, w) = feature.dims3()?;
    let taps = bilinear_taps::<T>(p, h, w);
    let d = feature.data();
    let out = (0..c)
        .map(|ch| {
            let plane = &d[ch * h * w..];
            taps.iter().map(|&(i, wt)| plane[i] * wt).sum()
        })
        .collect();
    Ok(Tensor::from_parts(vec![c], out))
}
