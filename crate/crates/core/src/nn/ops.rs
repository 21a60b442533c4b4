//! Forward and backward kernels on plain tensors.
//!
//! All feature maps are NCHW. Convolutions are cross-correlations with
//! explicit zero padding; dense convolutions lower to a GEMM through im2col.
//! Every reduction runs in a fixed order so results are reproducible bit for
//! bit.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// ε added to the variance inside the square root of batch normalization.
pub const BN_EPS: f64 = 1e-5;

pub type Pair = (usize, usize);

/// `C = A·B + beta·C` for an `m×k` by `k×n` product with strided operands and a
/// contiguous row-major `C`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): Pair,
    b: &[f64],
    (rsb, csb): Pair,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad).saturating_sub(k) / stride + 1
}

/// Range of output positions whose receptive tap `kk` lands inside `[0, len)`.
fn valid_range(len: usize, kk: usize, stride: usize, pad: usize, out: usize) -> (usize, usize) {
    // input index = o * stride + kk - pad
    let lo = if pad > kk {
        (pad - kk).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > kk {
        ((len - 1 + pad - kk) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: Pair,
    pad: Pair,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let cols = g.cols();
    col.fill(0.0);
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, ky, sh, ph, g.ho);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, kx, sw, pw, g.wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in oy0..oy1 {
                    let iy = oy * sh + ky - ph;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if sw == 1 {
                        let ix0 = ox0 + kx - pw;
                        out[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            out[ox] = src[ox * sw + kx - pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    let cols = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, ky, sh, ph, g.ho);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, kx, sw, pw, g.wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in oy0..oy1 {
                    let iy = oy * sh + ky - ph;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox0..ox1 {
                        dst[ox * sw + kx - pw] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: Pair, pad: Pair) -> Result<(usize, usize, ConvGeom)> {
    let (n, cin, h, wd) = x.dims4()?;
    let [cout, wcin, kh, kw] = w.shape()[..] else {
        return Err(Error::shape(format!(
            "conv weight must be 4-D, got {:?}",
            w.shape()
        )));
    };
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if stride.0 == 0 || stride.1 == 0 || h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
        return Err(Error::shape(format!(
            "conv input {:?} too small for weight {:?} with padding {pad:?}",
            x.shape(),
            w.shape()
        )));
    }
    let g = ConvGeom {
        cin,
        h,
        w: wd,
        kh,
        kw,
        ho: conv_out(h, kh, stride.0, pad.0),
        wo: conv_out(wd, kw, stride.1, pad.1),
        stride,
        pad,
    };
    Ok((n, cout, g))
}

/// Dense 2-D cross-correlation. `w` is `Cout×Cin×kh×kw`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: Pair, pad: Pair) -> Result<Tensor> {
    let (n, cout, g) = conv_geom(x, w, stride, pad)?;
    let (rows, cols) = (g.rows(), g.cols());
    let mut y = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    let in_len = g.cin * g.h * g.w;
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * cols]
    };
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let yb = &mut y.data_mut()[b * cout * cols..(b + 1) * cout * cols];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        gemm(cout, rows, cols, w.data(), (rows, 1), src, (cols, 1), 0.0, yb);
    }
    Ok(y)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: Pair,
    pad: Pair,
) -> Result<(Tensor, Tensor)> {
    let (n, cout, g) = conv_geom(x, w, stride, pad)?;
    let (rows, cols) = (g.rows(), g.cols());
    if dy.shape() != [n, cout, g.ho, g.wo] {
        return Err(Error::shape(format!(
            "conv output gradient {:?} does not match expected {:?}",
            dy.shape(),
            [n, cout, g.ho, g.wo]
        )));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let in_len = g.cin * g.h * g.w;
    let pointwise = g.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0; rows * cols]
    };
    let mut dcol = if pointwise {
        Vec::new()
    } else {
        vec![0.0; rows * cols]
    };
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let dyb = &dy.data()[b * cout * cols..(b + 1) * cout * cols];
        let src: &[f64] = if pointwise {
            xb
        } else {
            im2col(xb, &g, &mut col);
            &col
        };
        // dW += dY · colᵀ
        gemm(cout, cols, rows, dyb, (cols, 1), src, (1, cols), 1.0, dw.data_mut());
        // dcol = Wᵀ · dY
        let dxb = &mut dx.data_mut()[b * in_len..(b + 1) * in_len];
        if pointwise {
            gemm(rows, cout, cols, w.data(), (1, rows), dyb, (cols, 1), 0.0, dxb);
        } else {
            gemm(rows, cout, cols, w.data(), (1, rows), dyb, (cols, 1), 0.0, &mut dcol);
            col2im(&dcol, &g, dxb);
        }
    }
    Ok((dx, dw))
}

fn depthwise_geom(x: &Tensor, w: &Tensor, stride: Pair, pad: Pair) -> Result<(usize, ConvGeom)> {
    let (n, c, h, wd) = x.dims4()?;
    let [wc, one, kh, kw] = w.shape()[..] else {
        return Err(Error::shape(format!(
            "depthwise weight must be C×1×kh×kw, got {:?}",
            w.shape()
        )));
    };
    if wc != c || one != 1 {
        return Err(Error::shape(format!(
            "depthwise input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if stride.0 == 0 || stride.1 == 0 || h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
        return Err(Error::shape(format!(
            "depthwise input {:?} too small for weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    Ok((
        n,
        ConvGeom {
            cin: c,
            h,
            w: wd,
            kh,
            kw,
            ho: conv_out(h, kh, stride.0, pad.0),
            wo: conv_out(wd, kw, stride.1, pad.1),
            stride,
            pad,
        },
    ))
}

/// Per-channel 2-D cross-correlation. `w` is `C×1×kh×kw`.
pub fn depthwise_conv2d(x: &Tensor, w: &Tensor, stride: Pair, pad: Pair) -> Result<Tensor> {
    let (n, g) = depthwise_geom(x, w, stride, pad)?;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let c = g.cin;
    let mut y = Tensor::zeros(&[n, c, g.ho, g.wo]);
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    for b in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(b * c + ch) * ip..(b * c + ch + 1) * ip];
            let filt = &w.data()[ch * g.kh * g.kw..(ch + 1) * g.kh * g.kw];
            let out = &mut y.data_mut()[(b * c + ch) * op..(b * c + ch + 1) * op];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.h, ky, sh, ph, g.ho);
                for kx in 0..g.kw {
                    let wv = filt[ky * g.kw + kx];
                    let (ox0, ox1) = valid_range(g.w, kx, sw, pw, g.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * sh + ky - ph;
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                        if sw == 1 {
                            let src = &src[ox0 + kx - pw..ox1 + kx - pw];
                            for (d, &s) in dst[ox0..ox1].iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] += wv * src[ox * sw + kx - pw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn depthwise_conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: Pair,
    pad: Pair,
) -> Result<(Tensor, Tensor)> {
    let (n, g) = depthwise_geom(x, w, stride, pad)?;
    let c = g.cin;
    if dy.shape() != [n, c, g.ho, g.wo] {
        return Err(Error::shape(format!(
            "depthwise output gradient {:?} does not match {:?}",
            dy.shape(),
            [n, c, g.ho, g.wo]
        )));
    }
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let (ip, op) = (g.h * g.w, g.ho * g.wo);
    let taps = g.kh * g.kw;
    for b in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(b * c + ch) * ip..(b * c + ch + 1) * ip];
            let grad = &dy.data()[(b * c + ch) * op..(b * c + ch + 1) * op];
            let filt = &w.data()[ch * taps..(ch + 1) * taps];
            let dplane = &mut dx.data_mut()[(b * c + ch) * ip..(b * c + ch + 1) * ip];
            let mut dfilt = vec![0.0; taps];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.h, ky, sh, ph, g.ho);
                for kx in 0..g.kw {
                    let wv = filt[ky * g.kw + kx];
                    let (ox0, ox1) = valid_range(g.w, kx, sw, pw, g.wo);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * sh + ky - ph;
                        let row = iy * g.w;
                        let go = &grad[oy * g.wo + ox0..oy * g.wo + ox1];
                        for (ox, &gv) in (ox0..ox1).zip(go) {
                            let ix = row + ox * sw + kx - pw;
                            acc += gv * plane[ix];
                            dplane[ix] += wv * gv;
                        }
                    }
                    dfilt[ky * g.kw + kx] = acc;
                }
            }
            for (d, v) in dw.data_mut()[ch * taps..(ch + 1) * taps].iter_mut().zip(dfilt) {
                *d += v;
            }
        }
    }
    Ok((dx, dw))
}

/// Cached intermediates of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Whether batch statistics (train mode) produced `xhat`.
    pub batch_stats: bool,
}

/// Per-channel statistics observed on one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel the statistics were computed from.
    pub count: usize,
}

fn check_bn_params(x: &Tensor, scale: &[f64], shift: &[f64]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(format!(
            "batch norm over {c} channels got {} scales and {} shifts",
            scale.len(),
            shift.len()
        )));
    }
    Ok((n, c, h * w))
}

/// Training-mode batch normalization using the statistics of `x` itself.
pub fn batch_norm_train(
    x: &Tensor,
    scale: &[f64],
    shift: &[f64],
) -> Result<(Tensor, BnCache, BatchStats)> {
    let (n, c, plane) = check_bn_params(x, scale, shift)?;
    let count = n * plane;
    if count == 0 {
        return Err(Error::shape("batch norm over an empty batch"));
    }
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += d[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for b in 0..n {
            for &e in &d[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                v += (e - m) * (e - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (y, xhat) = affine_normalize(x, &mean, &inv_std, scale, shift, n, c, plane);
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: true,
        },
        BatchStats { mean, var, count },
    ))
}

/// Inference-mode batch normalization with fixed running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    scale: &[f64],
    shift: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<(Tensor, BnCache)> {
    let (n, c, plane) = check_bn_params(x, scale, shift)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("running statistics length mismatch"));
    }
    let inv_std: Vec<f64> = running_var
        .iter()
        .map(|v| 1.0 / (v + BN_EPS).sqrt())
        .collect();
    let (y, xhat) = affine_normalize(x, running_mean, &inv_std, scale, shift, n, c, plane);
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: false,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn affine_normalize(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    shift: &[f64],
    n: usize,
    c: usize,
    plane: usize,
) -> (Tensor, Tensor) {
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let d = x.data();
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let (m, is, g, s) = (mean[ch], inv_std[ch], scale[ch], shift[ch]);
            for ((yv, hv), &xv) in y.data_mut()[r.clone()]
                .iter_mut()
                .zip(&mut xhat.data_mut()[r.clone()])
                .zip(&d[r])
            {
                let h = (xv - m) * is;
                *hv = h;
                *yv = g * h + s;
            }
        }
    }
    (y, xhat)
}

/// Returns `(dx, dscale, dshift)`.
pub fn batch_norm_backward(
    dy: &Tensor,
    cache: &BnCache,
    scale: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = dy.dims4()?;
    if cache.xhat.shape() != dy.shape() {
        return Err(Error::shape("batch norm gradient shape mismatch"));
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let g = dy.data();
    let xh = cache.xhat.data();
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for b in 0..n {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for (&gv, &hv) in g[r.clone()].iter().zip(&xh[r]) {
                sg += gv;
                sgx += gv * hv;
            }
        }
        dshift[ch] = sg;
        dscale[ch] = sgx;
    }
    let mut dx = Tensor::zeros(dy.shape());
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            let k = scale[ch] * cache.inv_std[ch];
            let out = &mut dx.data_mut()[r.clone()];
            if cache.batch_stats {
                let (mg, mgx) = (dshift[ch] / count, dscale[ch] / count);
                for ((o, &gv), &hv) in out.iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                    *o = k * (gv - mg - hv * mgx);
                }
            } else {
                for (o, &gv) in out.iter_mut().zip(&g[r]) {
                    *o = k * gv;
                }
            }
        }
    }
    Ok((dx, dscale, dshift))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_bias(x: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if bias.len() != c {
        return Err(Error::shape(format!(
            "bias of length {} for {c} channels",
            bias.len()
        )));
    }
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_exact_mut(h * w).enumerate() {
        let bv = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
    Ok(y)
}

/// Per-channel sum of a gradient, the backward of [`add_bias`].
pub fn channel_sums(dy: &Tensor) -> Result<Vec<f64>> {
    let (n, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let mut s = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            *acc += dy.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
    Ok(s)
}

/// Mean over non-overlapping `window` cells.
pub fn avg_pool(x: &Tensor, window: Pair) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (kh, kw) = window;
    if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
        return Err(Error::shape(format!(
            "average pool window {window:?} does not divide {h}×{w}"
        )));
    }
    if window == (1, 1) {
        return Ok(x.clone());
    }
    let (ho, wo) = (h / kh, w / kw);
    let inv = 1.0 / (kh * kw) as f64;
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = y.data_mut();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..kh {
                    let row = (p * h + oy * kh + dy) * w + ox * kw;
                    s += src[row..row + kw].iter().sum::<f64>();
                }
                dst[(p * ho + oy) * wo + ox] = s * inv;
            }
        }
    }
    Ok(y)
}

pub fn avg_pool_backward(dy: &Tensor, window: Pair, input_shape: &[usize]) -> Result<Tensor> {
    let (n, c, ho, wo) = dy.dims4()?;
    let (kh, kw) = window;
    if input_shape != [n, c, ho * kh, wo * kw] {
        return Err(Error::shape("average pool gradient shape mismatch"));
    }
    if window == (1, 1) {
        return Ok(dy.clone());
    }
    let (h, w) = (ho * kh, wo * kw);
    let inv = 1.0 / (kh * kw) as f64;
    let mut dx = Tensor::zeros(input_shape);
    let g = dy.data();
    let out = dx.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                out[(p * h + y) * w + x] = g[(p * ho + y / kh) * wo + x / kw] * inv;
            }
        }
    }
    Ok(dx)
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_nearest(x: &Tensor, scale: Pair) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (sh, sw) = scale;
    if sh == 0 || sw == 0 {
        return Err(Error::shape("upsample factor must be positive"));
    }
    if scale == (1, 1) {
        return Ok(x.clone());
    }
    let (ho, wo) = (h * sh, w * sw);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let src = x.data();
    let dst = y.data_mut();
    for p in 0..n * c {
        for oy in 0..ho {
            let srow = &src[(p * h + oy / sh) * w..(p * h + oy / sh + 1) * w];
            let drow = &mut dst[(p * ho + oy) * wo..(p * ho + oy + 1) * wo];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / sw];
            }
        }
    }
    Ok(y)
}

pub fn upsample_nearest_backward(dy: &Tensor, scale: Pair) -> Result<Tensor> {
    let (n, c, ho, wo) = dy.dims4()?;
    let (sh, sw) = scale;
    if ho % sh != 0 || wo % sw != 0 {
        return Err(Error::shape("upsample gradient shape mismatch"));
    }
    if scale == (1, 1) {
        return Ok(dy.clone());
    }
    let (h, w) = (ho / sh, wo / sw);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let g = dy.data();
    let out = dx.data_mut();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                out[(p * h + oy / sh) * w + ox / sw] += g[(p * ho + oy) * wo + ox];
            }
        }
    }
    Ok(dx)
}

/// Concatenation along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat shape mismatch: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (p, &pc) in parts.iter().zip(&channels) {
            data.extend_from_slice(&p.data()[b * pc * plane..(b + 1) * pc * plane]);
        }
    }
    Tensor::from_vec(&[n, total, h, w], data)
}

/// Channels `[start, start + len)` of `x`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if start + len > c {
        return Err(Error::shape(format!(
            "channel slice {start}..{} out of range for {c} channels",
            start + len
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        data.extend_from_slice(&x.data()[(b * c + start) * plane..(b * c + start + len) * plane]);
    }
    Tensor::from_vec(&[n, len, h, w], data)
}
