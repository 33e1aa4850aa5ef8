//! Direct 2-D convolution, activations, the classifier head and the
//! classification loss, each with a hand-derived backward pass.
//!
//! "Convolution" here is cross-correlation (no kernel flip), the usual
//! deep-learning convention.

use rayon::prelude::*;

use crate::error::{dim_err, Result, ScanError};
use crate::tensor::{DenseArray, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by `kernel - 1` in each spatial axis.
    Valid,
    /// Zero padding of `(kernel - 1) / 2`; output keeps the input's extent.
    Same,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], mode: Padding) -> Result<Self> {
        let &[n, c_in, h, w] = input else {
            return Err(dim_err!("conv2d input must be rank 4, got {input:?}"));
        };
        let &[c_out, k_in, kh, kw] = kernel else {
            return Err(dim_err!("conv2d kernel must be rank 4, got {kernel:?}"));
        };
        if k_in != c_in {
            return Err(dim_err!(
                "kernel expects {k_in} input channels but input has {c_in}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(dim_err!("kernel extents must be odd, got {kh}x{kw}"));
        }
        let (oh, ow, ph, pw) = match mode {
            Padding::Same => (h, w, (kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(dim_err!(
                        "valid conv needs input {h}x{w} at least as large as kernel {kh}x{kw}"
                    ));
                }
                (h - kh + 1, w - kw + 1, 0, 0)
            }
        };
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            ph,
            pw,
        })
    }

    /// Output index range `[lo, hi)` along one axis for which the input
    /// coordinate `out + tap - pad` lies inside `[0, extent)`.
    #[inline]
    fn out_range(tap: usize, pad: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(tap);
        let hi = (extent + pad).saturating_sub(tap).min(out_extent);
        (lo, hi.max(lo))
    }
}

/// 2-D cross-correlation of a `n × c_in × h × w` input with a
/// `c_out × c_in × kh × kw` kernel bank.
pub fn conv2d<T: Scalar>(
    input: &DenseArray<T>,
    kernel: &DenseArray<T>,
    mode: Padding,
) -> Result<DenseArray<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), mode)?;
    let plane = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.c_out * plane];
    if plane > 0 {
        let x = input.data();
        let k = kernel.data();
        out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
            let (b, o) = (idx / g.c_out, idx % g.c_out);
            for c in 0..g.c_in {
                let src = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                let taps = &k[(o * g.c_in + c) * g.kh * g.kw..][..g.kh * g.kw];
                for a in 0..g.kh {
                    let (y0, y1) = ConvGeometry::out_range(a, g.ph, g.h, g.oh);
                    for bb in 0..g.kw {
                        let wv = taps[a * g.kw + bb];
                        let (x0, x1) = ConvGeometry::out_range(bb, g.pw, g.w, g.ow);
                        for y in y0..y1 {
                            let iy = y + a - g.ph;
                            let row = &src[iy * g.w + x0 + bb - g.pw..][..x1 - x0];
                            let acc = &mut dst[y * g.ow + x0..y * g.ow + x1];
                            for (d, &s) in acc.iter_mut().zip(row) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        });
    }
    let out = DenseArray::from_vec(&[g.n, g.c_out, g.oh, g.ow], out)?;
    out.ensure_finite("conv2d output")?;
    Ok(out)
}

/// Gradient of `<upstream, conv2d(input, kernel)>` with respect to the kernel.
pub fn conv2d_grad_kernel(
    input: &DenseArray,
    kernel_shape: &[usize],
    upstream: &DenseArray,
    mode: Padding,
) -> Result<DenseArray> {
    let g = ConvGeometry::new(input.shape(), kernel_shape, mode)?;
    check_upstream(&g, upstream)?;
    let per_out = g.c_in * g.kh * g.kw;
    let mut grad = vec![0.0; g.c_out * per_out];
    let x = input.data();
    let up = upstream.data();
    grad.par_chunks_mut(per_out).enumerate().for_each(|(o, dst)| {
        for c in 0..g.c_in {
            for a in 0..g.kh {
                let (y0, y1) = ConvGeometry::out_range(a, g.ph, g.h, g.oh);
                for bb in 0..g.kw {
                    let (x0, x1) = ConvGeometry::out_range(bb, g.pw, g.w, g.ow);
                    let mut acc = 0.0;
                    for b in 0..g.n {
                        let src = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                        let u = &up[(b * g.c_out + o) * g.oh * g.ow..][..g.oh * g.ow];
                        for y in y0..y1 {
                            let iy = y + a - g.ph;
                            let row = &src[iy * g.w + x0 + bb - g.pw..][..x1 - x0];
                            let urow = &u[y * g.ow + x0..y * g.ow + x1];
                            acc += urow.iter().zip(row).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                    dst[(c * g.kh + a) * g.kw + bb] = acc;
                }
            }
        }
    });
    DenseArray::from_vec(kernel_shape, grad)
}

/// Gradient of `<upstream, conv2d(input, kernel)>` with respect to the input.
pub fn conv2d_grad_input(
    input_shape: &[usize],
    kernel: &DenseArray,
    upstream: &DenseArray,
    mode: Padding,
) -> Result<DenseArray> {
    let g = ConvGeometry::new(input_shape, kernel.shape(), mode)?;
    check_upstream(&g, upstream)?;
    let plane = g.h * g.w;
    let mut grad = vec![0.0; g.n * g.c_in * plane];
    let k = kernel.data();
    let up = upstream.data();
    grad.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (b, c) = (idx / g.c_in, idx % g.c_in);
        for o in 0..g.c_out {
            let u = &up[(b * g.c_out + o) * g.oh * g.ow..][..g.oh * g.ow];
            let taps = &k[(o * g.c_in + c) * g.kh * g.kw..][..g.kh * g.kw];
            for a in 0..g.kh {
                let (y0, y1) = ConvGeometry::out_range(a, g.ph, g.h, g.oh);
                for bb in 0..g.kw {
                    let wv = taps[a * g.kw + bb];
                    let (x0, x1) = ConvGeometry::out_range(bb, g.pw, g.w, g.ow);
                    for y in y0..y1 {
                        let iy = y + a - g.ph;
                        let urow = &u[y * g.ow + x0..y * g.ow + x1];
                        let drow = &mut dst[iy * g.w + x0 + bb - g.pw..][..x1 - x0];
                        for (d, &s) in drow.iter_mut().zip(urow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    });
    DenseArray::from_vec(input_shape, grad)
}

fn check_upstream(g: &ConvGeometry, upstream: &DenseArray) -> Result<()> {
    let expected = [g.n, g.c_out, g.oh, g.ow];
    if upstream.shape() != expected {
        return Err(dim_err!(
            "upstream gradient has shape {:?}, expected {expected:?}",
            upstream.shape()
        ));
    }
    Ok(())
}

pub fn relu<T: Scalar>(x: &DenseArray<T>) -> DenseArray<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Routes `upstream` through the ReLU evaluated at `pre`.
pub fn relu_backward(pre: &DenseArray, upstream: &DenseArray) -> Result<DenseArray> {
    pre.zip_map(upstream, |p, u| if p > 0.0 { u } else { 0.0 })
}

/// Global average pooling followed by an affine map to class logits.
///
/// `features` is `n × c × h × w`, `weights` is `classes × c`, `bias` has
/// `classes` entries. Returns `n × classes` logits.
pub fn gap_linear<T: Scalar>(
    features: &DenseArray<T>,
    weights: &DenseArray<T>,
    bias: &DenseArray<T>,
) -> Result<DenseArray<T>> {
    let (n, c, pooled) = global_average_pool(features)?;
    let classes = head_classes(weights, bias, c)?;
    let w = weights.data();
    let mut logits = Vec::with_capacity(n * classes);
    for b in 0..n {
        let p = &pooled[b * c..(b + 1) * c];
        for k in 0..classes {
            let mut acc = bias.data()[k];
            for (wv, pv) in w[k * c..(k + 1) * c].iter().zip(p) {
                acc += *wv * *pv;
            }
            logits.push(acc);
        }
    }
    DenseArray::from_vec(&[n, classes], logits)
}

pub struct GapLinearGrads {
    pub d_features: DenseArray,
    pub d_weights: DenseArray,
    pub d_bias: DenseArray,
}

pub fn gap_linear_backward(
    features: &DenseArray,
    weights: &DenseArray,
    bias: &DenseArray,
    d_logits: &DenseArray,
) -> Result<GapLinearGrads> {
    let [n, c, h, w] = features.dims4()?;
    let (_, _, pooled) = global_average_pool(features)?;
    let classes = head_classes(weights, bias, c)?;
    if d_logits.shape() != [n, classes] {
        return Err(dim_err!(
            "logit gradient has shape {:?}, expected [{n}, {classes}]",
            d_logits.shape()
        ));
    }
    let dl = d_logits.data();
    let wd = weights.data();
    let mut d_weights = vec![0.0; classes * c];
    let mut d_bias = vec![0.0; classes];
    let mut d_pooled = vec![0.0; n * c];
    for b in 0..n {
        for k in 0..classes {
            let g = dl[b * classes + k];
            d_bias[k] += g;
            for ch in 0..c {
                d_weights[k * c + ch] += g * pooled[b * c + ch];
                d_pooled[b * c + ch] += g * wd[k * c + ch];
            }
        }
    }
    let area = (h * w) as f64;
    let plane = h * w;
    let mut d_features = vec![0.0; n * c * plane];
    for (i, chunk) in d_features.chunks_mut(plane).enumerate() {
        chunk.fill(d_pooled[i] / area);
    }
    Ok(GapLinearGrads {
        d_features: DenseArray::from_vec(features.shape(), d_features)?,
        d_weights: DenseArray::from_vec(weights.shape(), d_weights)?,
        d_bias: DenseArray::from_vec(bias.shape(), d_bias)?,
    })
}

fn global_average_pool<T: Scalar>(features: &DenseArray<T>) -> Result<(usize, usize, Vec<T>)> {
    let [n, c, h, w] = features.dims4()?;
    let area = T::from_f64((h * w) as f64);
    let pooled = features
        .data()
        .chunks(h * w)
        .map(|plane| {
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            acc / area
        })
        .collect();
    Ok((n, c, pooled))
}

fn head_classes<T: Scalar>(weights: &DenseArray<T>, bias: &DenseArray<T>, channels: usize) -> Result<usize> {
    let &[classes, wc] = weights.shape() else {
        return Err(dim_err!("head weights must be rank 2, got {:?}", weights.shape()));
    };
    if wc != channels {
        return Err(dim_err!(
            "head weights expect {wc} channels but features have {channels}"
        ));
    }
    if bias.shape() != [classes] {
        return Err(dim_err!(
            "head bias has shape {:?}, expected [{classes}]",
            bias.shape()
        ));
    }
    Ok(classes)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &DenseArray, labels: &[usize]) -> Result<(f64, DenseArray)> {
    let &[n, classes] = logits.shape() else {
        return Err(dim_err!("logits must be rank 2, got {:?}", logits.shape()));
    };
    if labels.len() != n {
        return Err(dim_err!("{} labels for a batch of {n}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(ScanError::Domain(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * classes];
    let inv_n = 1.0 / n as f64;
    for (b, row) in logits.data().chunks(classes).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = m + denom.ln();
        loss += log_z - row[labels[b]];
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (k, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let p = (v - log_z).exp();
            *gv = (p - if k == labels[b] { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(ScanError::NonFinite(format!("cross-entropy loss is {loss}")));
    }
    Ok((loss, DenseArray::from_vec(&[n, classes], grad)?))
}
