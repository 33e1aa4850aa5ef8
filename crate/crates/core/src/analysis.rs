//! Diagnostics over trained networks: learnt-scale histograms, spectral
//! decomposition of SAC kernels, x-pass filter classification and
//! Gaussian-window truncation.

use std::fmt::Write as _;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{dim_err, Result, ScanError};
use crate::network::SacNetwork;
use crate::sac::{LayerGaussian, SacLayer, GAUSSIAN_EXTENT, GAUSSIAN_RADIUS, KERNEL_SIZE};
use crate::scale_space::gaussian_kernel;
use crate::tensor::DenseArray;

/// Side of the zero-padded transform grid.
pub const TRANSFORM_SIZE: usize = 16;
pub const DEFAULT_BIN_WIDTH: f64 = 0.1;
/// Gain ratio separating high/low-pass from mixed.
pub const PASS_RATIO: f64 = 1.2;
/// Relative band-gain spread still counted as flat.
pub const ALL_PASS_TOLERANCE: f64 = 0.05;
/// Relative Tikhonov weight: `ε = EPS_SCALE · max|F(k_i)|²`.
pub const EPS_SCALE: f64 = 1e-8;

fn require_sac(net: &SacNetwork) -> Result<Vec<&SacLayer>> {
    net.sac_layers().ok_or_else(|| {
        ScanError::Domain("model is in absorbed form: the learnt scales t were folded into the kernels".into())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleHistogram {
    pub layer: usize,
    pub bin_width: f64,
    /// `(bin center, density)`; bins `[i·w, (i+1)·w)` from the lowest to the highest occupied one.
    pub bins: Vec<(f64, f64)>,
}

impl ScaleHistogram {
    /// Center of the densest bin (lowest on ties).
    pub fn mode(&self) -> f64 {
        let mut best = self.bins[0];
        for &b in &self.bins {
            if b.1 > best.1 {
                best = b;
            }
        }
        best.0
    }

    pub fn integral(&self) -> f64 {
        self.bins.iter().map(|b| b.1).sum::<f64>() * self.bin_width
    }
}

/// Histogram of `t = exp(θ)` per layer, densities normalized to unit integral.
pub fn scale_histogram(net: &SacNetwork, bin_width: f64) -> Result<Vec<ScaleHistogram>> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(ScanError::Domain(format!("bin width must be positive, got {bin_width}")));
    }
    let layers = require_sac(net)?;
    Ok(layers
        .iter()
        .enumerate()
        .map(|(layer, l)| {
            let scales = l.scales();
            let idx: Vec<i64> = scales.iter().map(|t| (t / bin_width).floor() as i64).collect();
            let lo = *idx.iter().min().unwrap();
            let hi = *idx.iter().max().unwrap();
            let mut counts = vec![0usize; (hi - lo + 1) as usize];
            for i in &idx {
                counts[(i - lo) as usize] += 1;
            }
            let norm = scales.len() as f64 * bin_width;
            let bins = counts
                .iter()
                .enumerate()
                .map(|(j, &c)| ((lo + j as i64) as f64 * bin_width + bin_width / 2.0, c as f64 / norm))
                .collect();
            ScaleHistogram {
                layer,
                bin_width,
                bins,
            }
        })
        .collect())
}

pub fn histogram_csv(hists: &[ScaleHistogram]) -> String {
    let mut out = String::from("layer,bin_center,density\n");
    if let Some(h) = hists.first() {
        let _ = writeln!(out, "# bin_width={} densities integrate to 1 per layer", h.bin_width);
    }
    for h in hists {
        for (c, d) in &h.bins {
            let _ = writeln!(out, "{},{c:.6},{d:.6}", h.layer);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum XPassClass {
    HighPass,
    LowPass,
    Mixed,
    AllPass,
}

impl XPassClass {
    pub fn name(self) -> &'static str {
        match self {
            XPassClass::HighPass => "high-pass",
            XPassClass::LowPass => "low-pass",
            XPassClass::Mixed => "mixed",
            XPassClass::AllPass => "all-pass",
        }
    }

    /// Classifies from the DC gain and the mean outer-band gain; only their
    /// ratio matters.
    pub fn from_gains(dc: f64, outer: f64) -> Self {
        if dc > 0.0 && (outer - dc).abs() <= ALL_PASS_TOLERANCE * dc {
            XPassClass::AllPass
        } else if outer > PASS_RATIO * dc {
            XPassClass::HighPass
        } else if dc > PASS_RATIO * outer {
            XPassClass::LowPass
        } else {
            XPassClass::Mixed
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterAnalysis {
    /// Deconvolved kernel, center-cropped to 3×3.
    pub k_a: DenseArray,
    /// Full circular estimate on the transform grid, origin at `[0, 0]`.
    pub k_a_full: DenseArray,
    /// `‖k − k_a ⊛ k_i‖ / ‖k‖` (circular convolution on the transform grid).
    pub residual: f64,
    pub epsilon: f64,
    /// `min |F(k_i)| > 0.1 · max |F(k_i)|`.
    pub well_conditioned: bool,
    pub xpass: Option<XPass>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XPass {
    pub class: XPassClass,
    pub dc_gain: f64,
    /// Mean gain over frequencies with max-norm radius above π/2.
    pub high_gain: f64,
}

/// Grid of complex values, row-major, side [`TRANSFORM_SIZE`].
type Grid = Vec<Complex64>;

fn embed(kernel: &DenseArray) -> Result<Grid> {
    let &[h, w] = kernel.shape() else {
        return Err(dim_err!("expected a 2-D kernel, got shape {:?}", kernel.shape()));
    };
    if h % 2 == 0 || w % 2 == 0 || h > TRANSFORM_SIZE || w > TRANSFORM_SIZE {
        return Err(dim_err!("kernel must be odd-sized and at most {TRANSFORM_SIZE}, got {h}x{w}"));
    }
    let n = TRANSFORM_SIZE;
    let mut grid = vec![Complex64::new(0.0, 0.0); n * n];
    for y in 0..h {
        for x in 0..w {
            let gy = (y as isize - (h / 2) as isize).rem_euclid(n as isize) as usize;
            let gx = (x as isize - (w / 2) as isize).rem_euclid(n as isize) as usize;
            grid[gy * n + gx] = Complex64::new(kernel.data()[y * w + x], 0.0);
        }
    }
    Ok(grid)
}

fn fft2(grid: &mut Grid, inverse: bool) {
    let n = TRANSFORM_SIZE;
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    for row in grid.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = grid[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            grid[y * n + x] = col[y];
        }
    }
    if inverse {
        let s = 1.0 / (n * n) as f64;
        for v in grid.iter_mut() {
            *v *= s;
        }
    }
}

/// Signed frequency index on the transform grid.
fn signed(k: usize) -> isize {
    let n = TRANSFORM_SIZE as isize;
    let k = k as isize;
    if k > n / 2 {
        k - n
    } else {
        k
    }
}

/// `k_a = F⁻¹(F(k)·conj F(k_i) / (|F(k_i)|² + ε))`.
///
/// `epsilon = None` uses `EPS_SCALE · max|F(k_i)|²`.
pub fn filter_decomposition(k: &DenseArray, k_i: &DenseArray, epsilon: Option<f64>) -> Result<FilterAnalysis> {
    if k_i.max_abs() == 0.0 {
        return Err(ScanError::Domain("shortcut kernel is identically zero: deconvolution undefined".into()));
    }
    k.ensure_finite("kernel")?;
    k_i.ensure_finite("shortcut kernel")?;
    let mut fk = embed(k)?;
    let mut fi = embed(k_i)?;
    fft2(&mut fk, false);
    fft2(&mut fi, false);
    let power: Vec<f64> = fi.iter().map(|v| v.norm_sqr()).collect();
    let max_power = power.iter().copied().fold(0.0, f64::max);
    let min_power = power.iter().copied().fold(f64::INFINITY, f64::min);
    let eps = epsilon.unwrap_or(EPS_SCALE * max_power);
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(ScanError::Domain(format!("epsilon must be finite and >= 0, got {eps}")));
    }
    let mut ka: Grid = fk
        .iter()
        .zip(&fi)
        .zip(&power)
        .map(|((a, b), p)| {
            let d = p + eps;
            if d == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                a * b.conj() / d
            }
        })
        .collect();
    let spectrum_ka = ka.clone();
    fft2(&mut ka, true);
    let n = TRANSFORM_SIZE;
    let k_a_full = DenseArray::from_vec(&[n, n], ka.iter().map(|v| v.re).collect())?;

    // residual: compare F(k) with F(k_a)·F(k_i) (circular composition)
    let mut num = 0.0;
    let mut den = 0.0;
    for ((a, ka), ki) in fk.iter().zip(&spectrum_ka).zip(&fi) {
        num += (a - ka * ki).norm_sqr();
        den += a.norm_sqr();
    }
    let residual = if den == 0.0 { 0.0 } else { (num / den).sqrt() };

    let r = KERNEL_SIZE / 2;
    let mut crop = Vec::with_capacity(KERNEL_SIZE * KERNEL_SIZE);
    for dy in -(r as isize)..=r as isize {
        for dx in -(r as isize)..=r as isize {
            let y = dy.rem_euclid(n as isize) as usize;
            let x = dx.rem_euclid(n as isize) as usize;
            crop.push(k_a_full.data()[y * n + x]);
        }
    }
    Ok(FilterAnalysis {
        k_a: DenseArray::from_vec(&[KERNEL_SIZE, KERNEL_SIZE], crop)?,
        k_a_full,
        residual,
        epsilon: eps,
        well_conditioned: min_power.sqrt() > 0.1 * max_power.sqrt(),
        xpass: None,
    })
}

/// Frequency response gains of `t^γ · (g(·; t) ⊛ k_a) + 𝟙` with `g` the
/// layer's renormalized 5×5 window.
pub fn xpass_gains(k_a_full: &DenseArray, t: f64, gamma_m: f64) -> Result<XPass> {
    let n = TRANSFORM_SIZE;
    if k_a_full.shape() != [n, n] {
        return Err(dim_err!("expected a {n}x{n} circular kernel, got {:?}", k_a_full.shape()));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(ScanError::Domain(format!("scale t must be positive, got {t}")));
    }
    let g = DenseArray::from_vec(&[GAUSSIAN_EXTENT, GAUSSIAN_EXTENT], LayerGaussian::new(t).values.to_vec())?;
    let mut fg = embed(&g)?;
    fft2(&mut fg, false);
    let mut fa: Grid = k_a_full.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut fa, false);
    let w = t.powf(gamma_m);
    let mut dc = 0.0;
    let mut high = 0.0;
    let mut high_count = 0usize;
    for y in 0..n {
        for x in 0..n {
            let h = (fg[y * n + x] * fa[y * n + x] * w + 1.0).norm();
            if x == 0 && y == 0 {
                dc = h;
            }
            // ω = 2πk/n > π/2  ⇔  |k| > n/4
            if signed(y).abs().max(signed(x).abs()) > (n / 4) as isize {
                high += h;
                high_count += 1;
            }
        }
    }
    let high_gain = high / high_count as f64;
    Ok(XPass {
        class: XPassClass::from_gains(dc, high_gain),
        dc_gain: dc,
        high_gain,
    })
}

/// Decomposes `k = k_a ⊛ k_i` and classifies the resulting x-pass filter.
pub fn xpass_classification(
    k: &DenseArray,
    k_i: &DenseArray,
    t: f64,
    gamma_m: f64,
    epsilon: Option<f64>,
) -> Result<FilterAnalysis> {
    let mut analysis = filter_decomposition(k, k_i, epsilon)?;
    analysis.xpass = Some(xpass_gains(&analysis.k_a_full, t, gamma_m)?);
    Ok(analysis)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterRow {
    pub filter: usize,
    pub channel: usize,
    pub t: f64,
    pub analysis: FilterAnalysis,
}

/// Runs [`xpass_classification`] on every (filter, input channel) kernel pair of one layer.
pub fn analyze_layer(net: &SacNetwork, layer: usize) -> Result<Vec<FilterRow>> {
    let layers = require_sac(net)?;
    let l = layers
        .get(layer)
        .ok_or_else(|| ScanError::Domain(format!("layer {layer} does not exist; the model has {}", layers.len())))?;
    let taps = KERNEL_SIZE * KERNEL_SIZE;
    let mut rows = Vec::new();
    for (o, t) in l.scales().into_iter().enumerate() {
        for c in 0..l.in_channels() {
            let base = (o * l.in_channels() + c) * taps;
            let slice = |a: &DenseArray| DenseArray::from_vec(&[KERNEL_SIZE, KERNEL_SIZE], a.data()[base..base + taps].to_vec());
            let analysis = xpass_classification(&slice(l.k())?, &slice(l.k_i())?, t, l.gamma_m(), None)?;
            rows.push(FilterRow {
                filter: o,
                channel: c,
                t,
                analysis,
            });
        }
    }
    Ok(rows)
}

pub fn filters_csv(rows: &[FilterRow]) -> String {
    let mut out = String::from("filter,channel,t,class,dc_gain,high_gain,residual,well_conditioned,epsilon\n");
    let _ = writeln!(
        out,
        "# grid={TRANSFORM_SIZE}x{TRANSFORM_SIZE} outer band: max-norm frequency > pi/2; high-pass if high/dc > {PASS_RATIO}; \
         low-pass if dc/high > {PASS_RATIO}; all-pass if |high/dc - 1| <= {ALL_PASS_TOLERANCE}; epsilon = {EPS_SCALE:e} * max|F(k_i)|^2"
    );
    for r in rows {
        let x = r.analysis.xpass.expect("classified rows");
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{:.6},{:.6},{:.3e},{},{:.3e}",
            r.filter,
            r.channel,
            r.t,
            x.class.name(),
            x.dc_gain,
            x.high_gain,
            r.analysis.residual,
            r.analysis.well_conditioned,
            r.analysis.epsilon
        );
    }
    out
}

/// Gaussian mass the fixed 5×5 window loses at scale `t`:
/// `max(0, 1 − Σ unnormalized samples)`.
///
/// Below `t ≈ 0.3` point sampling over-counts the peak and the raw sum
/// exceeds 1; the clamp reports those scales as lossless.
pub fn truncation_mass(t: f64) -> Result<f64> {
    let g = gaussian_kernel(t, GAUSSIAN_RADIUS, 2, false)?;
    Ok((1.0 - g.values.sum()).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationRow {
    pub layer: usize,
    pub filter: usize,
    pub t: f64,
    pub mass: f64,
}

pub fn truncation_report(net: &SacNetwork) -> Result<Vec<TruncationRow>> {
    let layers = require_sac(net)?;
    let mut rows = Vec::new();
    for (layer, l) in layers.iter().enumerate() {
        for (filter, t) in l.scales().into_iter().enumerate() {
            rows.push(TruncationRow {
                layer,
                filter,
                t,
                mass: truncation_mass(t)?,
            });
        }
    }
    Ok(rows)
}

pub fn truncation_csv(rows: &[TruncationRow]) -> String {
    let mut out = String::from("layer,filter,t,truncated_mass\n");
    let _ = writeln!(
        out,
        "# window {GAUSSIAN_EXTENT}x{GAUSSIAN_EXTENT}; mass = max(0, 1 - sum of unnormalized samples); filters above 0.01 lose more than 1%"
    );
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6e}", r.layer, r.filter, r.t, r.mass);
    }
    out
}
