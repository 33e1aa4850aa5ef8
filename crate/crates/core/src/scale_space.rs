//! Discrete Gaussian scale-space and the scale-selection oracles.
//!
//! The scale `t` is the Gaussian variance. Kernels are point samples of
//! `g(x; t) = (2πt)^(−D/2) exp(−|x|² / 2t)` on the integer grid, optionally
//! renormalized to unit sum.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{dim_err, Result, ScanError};
use crate::ops::{conv2d, Padding};
use crate::tensor::DenseArray;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub t: f64,
    pub dim: usize,
    pub radius: usize,
    /// Shape `[2r+1]` for 1-D kernels, `[2r+1, 2r+1]` for 2-D kernels.
    pub values: DenseArray,
    pub normalized: bool,
}

impl GaussianKernel {
    pub fn extent(&self) -> usize {
        2 * self.radius + 1
    }

    /// The kernel as a single-channel conv bank: `1 × 1 × 1 × (2r+1)` in 1-D,
    /// `1 × 1 × (2r+1) × (2r+1)` in 2-D.
    pub fn as_conv_kernel(&self) -> DenseArray {
        let e = self.extent();
        let shape = if self.dim == 1 { [1, 1, 1, e] } else { [1, 1, e, e] };
        DenseArray::from_vec(&shape, self.values.data().to_vec()).expect("kernel extent")
    }
}

/// Samples the Gaussian of variance `t` on `[−radius, radius]^dim`.
///
/// Values depend on the integer `|x|²` only, so mirror and axis symmetry are exact.
pub fn gaussian_kernel(t: f64, radius: usize, dim: usize, normalized: bool) -> Result<GaussianKernel> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(ScanError::Domain(format!("gaussian scale must be positive, got {t}")));
    }
    if radius == 0 {
        return Err(ScanError::Domain("gaussian radius must be at least 1".into()));
    }
    if dim != 1 && dim != 2 {
        return Err(ScanError::Domain(format!("gaussian dimension must be 1 or 2, got {dim}")));
    }
    let r = radius as i64;
    let e = 2 * radius + 1;
    let norm = (2.0 * PI * t).powf(dim as f64 / 2.0);
    let sample = |sq: i64| (-(sq as f64) / (2.0 * t)).exp() / norm;
    let mut values: Vec<f64> = if dim == 1 {
        (-r..=r).map(|x| sample(x * x)).collect()
    } else {
        (-r..=r)
            .flat_map(|y| (-r..=r).map(move |x| (x, y)))
            .map(|(x, y)| sample(x * x + y * y))
            .collect()
    };
    if normalized {
        let sum: f64 = values.iter().sum();
        for v in &mut values {
            *v /= sum;
        }
    }
    let shape: Vec<usize> = if dim == 1 { vec![e] } else { vec![e, e] };
    Ok(GaussianKernel {
        t,
        dim,
        radius,
        values: DenseArray::from_vec(&shape, values)?,
        normalized,
    })
}

/// `⌈4√t⌉`, at least 1, clamped to `max_radius`.
pub fn default_radius(t: f64, max_radius: usize) -> usize {
    ((4.0 * t.max(0.0).sqrt()).ceil() as usize).clamp(1, max_radius.max(1))
}

/// Scale-space representation `F(·; t) = g(·; t) ⊛ f` with a unit-sum kernel
/// and zero padding.
///
/// Rank-1 signals are smoothed along their single axis; rank-4 signals
/// (`n × c × h × w`) are smoothed per channel in 2-D. `t = 0` returns the
/// signal unchanged.
pub fn scale_space_rep(signal: &DenseArray, t: f64, radius: usize) -> Result<DenseArray> {
    if t < 0.0 || !t.is_finite() {
        return Err(ScanError::Domain(format!("scale must be non-negative, got {t}")));
    }
    if t == 0.0 {
        return Ok(signal.clone());
    }
    match signal.shape() {
        &[len] => {
            let g = gaussian_kernel(t, radius, 1, true)?;
            let x = signal.clone().reshape(&[1, 1, 1, len])?;
            conv2d(&x, &g.as_conv_kernel(), Padding::Same)?.reshape(&[len])
        }
        &[n, c, h, w] => {
            let g = gaussian_kernel(t, radius, 2, true)?;
            let x = signal.clone().reshape(&[n * c, 1, h, w])?;
            conv2d(&x, &g.as_conv_kernel(), Padding::Same)?.reshape(&[n, c, h, w])
        }
        other => Err(dim_err!("scale-space signals must be rank 1 or 4, got {other:?}")),
    }
}

/// Parameters of the sinusoid scale-selection experiment `f(x) = sin(ωx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOracleSpec {
    pub omega: f64,
    pub order: u32,
    pub gamma: f64,
    pub t_grid: Vec<f64>,
}

impl ScaleOracleSpec {
    pub fn new(omega: f64, order: u32, gamma: f64, t_grid: Vec<f64>) -> Result<Self> {
        if !(omega > 0.0) {
            return Err(ScanError::Domain(format!("omega must be positive, got {omega}")));
        }
        if t_grid.is_empty() || t_grid.iter().any(|&t| !(t > 0.0)) {
            return Err(ScanError::Domain("scale grid must be non-empty and positive".into()));
        }
        if t_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ScanError::Domain("scale grid must be strictly increasing".into()));
        }
        Ok(Self {
            omega,
            order,
            gamma,
            t_grid,
        })
    }

    /// Grid `t_min, t_min + step, …` up to and including `t_max` (within rounding).
    pub fn with_range(omega: f64, order: u32, gamma: f64, t_min: f64, t_max: f64, t_step: f64) -> Result<Self> {
        if !(t_step > 0.0) || !(t_max > t_min) {
            return Err(ScanError::Domain(format!(
                "invalid scale range {t_min}..{t_max} step {t_step}"
            )));
        }
        let count = ((t_max - t_min) / t_step + 1e-9).floor() as usize + 1;
        let grid = (0..count).map(|i| t_min + i as f64 * t_step).collect();
        Self::new(omega, order, gamma, grid)
    }

    /// Scale at which the normalized derivative amplitude peaks: `2mγ/ω²`.
    pub fn analytic_peak(&self) -> f64 {
        2.0 * self.order as f64 * self.gamma / (self.omega * self.omega)
    }
}

/// Closed-form amplitude `t^(mγ) ω^m exp(−ω²t/2)` of the m-th order
/// γ-normalized derivative of `F(x; t)` for `f = sin(ωx)`.
///
/// At `t = 0` with `mγ > 0` the limit value 0 is returned.
pub fn normalized_derivative_amplitude(spec: &ScaleOracleSpec, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(ScanError::Domain(format!("scale must be non-negative, got {t}")));
    }
    let mg = spec.order as f64 * spec.gamma;
    let scale_factor = if t == 0.0 {
        if mg > 0.0 {
            return Ok(0.0);
        }
        1.0
    } else {
        t.powf(mg)
    };
    Ok(scale_factor * spec.omega.powi(spec.order as i32) * (-spec.omega * spec.omega * t / 2.0).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalePeak {
    pub t_hat: f64,
    pub amplitude: f64,
}

/// Numerically measured normalized-derivative amplitude at every scale of
/// `spec.t_grid`.
///
/// `sin(ωx)` is sampled with spacing `dx`, smoothed with a sampled Gaussian of
/// variance `t/dx²` (in samples), differentiated `m` times with the central
/// difference `(f[j+1] − f[j−1]) / 2dx`, and multiplied by `t^(mγ)`. The
/// amplitude is the largest magnitude over the central half of the domain,
/// excluding a border of three Gaussian radii.
pub fn scale_response_curve(spec: &ScaleOracleSpec, dx: f64) -> Result<Vec<(f64, f64)>> {
    if !(dx > 0.0) {
        return Err(ScanError::Domain(format!("grid resolution must be positive, got {dx}")));
    }
    let t_max = *spec.t_grid.last().expect("validated non-empty");
    let m = spec.order as usize;
    let radius_of = |t: f64| ((4.0 * t.sqrt() / dx).ceil() as usize).max(1);
    let border = 3 * radius_of(t_max) + m;
    let wavelength = (2.0 * PI / spec.omega / dx).ceil() as usize;
    let n = (4 * border).max(2 * border + 2 * wavelength);
    let lo = (n / 4).max(border);
    let hi = (3 * n / 4).min(n - border);
    if hi <= lo {
        return Err(ScanError::Domain("scale grid leaves no interior to measure".into()));
    }
    let center = (n / 2) as f64;
    let signal: Vec<f64> = (0..n)
        .map(|j| (spec.omega * (j as f64 - center) * dx).sin())
        .collect();
    let signal = DenseArray::from_vec(&[n], signal)?;

    spec.t_grid
        .par_iter()
        .map(|&t| {
            let smoothed = scale_space_rep(&signal, t / (dx * dx), radius_of(t))?;
            let mut d = smoothed.into_vec();
            for _ in 0..m {
                d = central_difference(&d, dx);
            }
            let norm = t.powf(spec.order as f64 * spec.gamma);
            let amp = d[lo..hi].iter().fold(0.0_f64, |acc, v| acc.max(v.abs())) * norm;
            Ok((t, amp))
        })
        .collect()
}

fn central_difference(f: &[f64], dx: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    for j in 1..n.saturating_sub(1) {
        out[j] = (f[j + 1] - f[j - 1]) / (2.0 * dx);
    }
    out
}

/// Grid argmax of [`scale_response_curve`]. Fails when the maximum sits on
/// either end of the grid, since the grid then does not bracket the peak.
pub fn empirical_scale_peak(spec: &ScaleOracleSpec, dx: f64) -> Result<ScalePeak> {
    let curve = scale_response_curve(spec, dx)?;
    let (idx, &(t_hat, amplitude)) = curve
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty grid");
    if idx == 0 || idx + 1 == curve.len() {
        return Err(ScanError::Domain(format!(
            "response peaks at grid boundary t = {t_hat}; widen the scale grid"
        )));
    }
    Ok(ScalePeak { t_hat, amplitude })
}

/// Normalized residual of the diffusion equation `∂_t F = ½∇²F`.
///
/// Builds `F(·; t)` at every sample, estimates `∂_t F` by central differences
/// in `t` and `½∇²F` with the 5-point Laplacian, and returns the interior RMS
/// of their difference divided by the RMS of `½∇²F`. When both sides vanish
/// (to round-off) the residual is defined as 0.
///
/// `signal` must be `1 × 1 × h × w`; `t_samples` at least three equally
/// spaced, non-negative scales.
pub fn heat_equation_residual(signal: &DenseArray, t_samples: &[f64]) -> Result<f64> {
    let [n, c, h, w] = signal.dims4()?;
    if n != 1 || c != 1 {
        return Err(dim_err!("heat residual expects a single 1x1xHxW image, got {:?}", signal.shape()));
    }
    if t_samples.len() < 3 {
        return Err(ScanError::Domain(format!(
            "need at least 3 scale samples, got {}",
            t_samples.len()
        )));
    }
    let dt = t_samples[1] - t_samples[0];
    if !(dt > 0.0)
        || t_samples[0] < 0.0
        || t_samples
            .windows(2)
            .any(|p| ((p[1] - p[0]) - dt).abs() > 1e-9 * dt.max(1.0))
    {
        return Err(ScanError::Domain("scale samples must be increasing and equally spaced".into()));
    }
    let t_max = *t_samples.last().unwrap();
    let radius = default_radius(t_max, usize::MAX) + 1;
    let border = radius + 1;
    if h <= 2 * border || w <= 2 * border {
        return Err(dim_err!("image {h}x{w} too small for an interior at radius {radius}"));
    }
    let fields = t_samples
        .iter()
        .map(|&t| scale_space_rep(signal, t, radius).map(DenseArray::into_vec))
        .collect::<Result<Vec<_>>>()?;

    let (mut diff_sq, mut lap_sq, mut count, mut scale) = (0.0, 0.0, 0usize, 0.0_f64);
    for i in 1..fields.len() - 1 {
        let f = &fields[i];
        for y in border..h - border {
            for x in border..w - border {
                let at = |yy: usize, xx: usize| f[yy * w + xx];
                let d_t = (fields[i + 1][y * w + x] - fields[i - 1][y * w + x]) / (2.0 * dt);
                let lap = 0.5 * (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x));
                diff_sq += (d_t - lap).powi(2);
                lap_sq += lap * lap;
                scale = scale.max(at(y, x).abs());
                count += 1;
            }
        }
    }
    let diff_rms = (diff_sq / count as f64).sqrt();
    let lap_rms = (lap_sq / count as f64).sqrt();
    let floor = 1e-12 * scale.max(f64::MIN_POSITIVE);
    if lap_rms <= floor {
        if diff_rms <= floor {
            return Ok(0.0);
        }
        return Err(ScanError::NonFinite(
            "laplacian vanishes but the time derivative does not".into(),
        ));
    }
    Ok(diff_rms / lap_rms)
}
