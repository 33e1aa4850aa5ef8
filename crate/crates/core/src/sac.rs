//! Scale-attention convolution layer.
//!
//! Per output filter `o` the layer holds a 3×3 kernel bank `k[o]`, a shortcut
//! bank `k_i[o]` and a log-scale `θ[o]` with `t = exp(θ)`. Its effective
//! kernel is
//!
//! ```text
//! k_u[o] = t^γ · valid(g(·; t), k[o]) + k_i[o]
//! ```
//!
//! where `g` is the unit-sum 5×5 sampled Gaussian, so the valid
//! cross-correlation of `g` with the 3×3 `k` is again 3×3. Every backward
//! pass here is derived by hand, including the dependence of the
//! renormalized Gaussian on `t`.

use rand::Rng;

use crate::error::{dim_err, Result, ScanError};
use crate::ops::{conv2d, conv2d_grad_input, conv2d_grad_kernel, relu, Padding};
use crate::tensor::{DenseArray, Scalar};

pub const KERNEL_SIZE: usize = 3;
pub const GAUSSIAN_RADIUS: usize = 2;
pub const GAUSSIAN_EXTENT: usize = 2 * GAUSSIAN_RADIUS + 1;
pub const DEFAULT_GAMMA_M: f64 = 1.0;

const TAPS: usize = KERNEL_SIZE * KERNEL_SIZE;
const G_TAPS: usize = GAUSSIAN_EXTENT * GAUSSIAN_EXTENT;

/// Unit-sum 5×5 Gaussian at scale `t`, with its derivative w.r.t. `θ = ln t`.
#[derive(Clone, Debug)]
pub struct LayerGaussian {
    pub values: [f64; G_TAPS],
    pub d_theta: [f64; G_TAPS],
}

impl LayerGaussian {
    pub fn new(t: f64) -> Self {
        let r = GAUSSIAN_RADIUS as i64;
        let mut values = [0.0; G_TAPS];
        let mut sq = [0.0; G_TAPS];
        for (i, (v, s)) in values.iter_mut().zip(sq.iter_mut()).enumerate() {
            let y = (i / GAUSSIAN_EXTENT) as i64 - r;
            let x = (i % GAUSSIAN_EXTENT) as i64 - r;
            *s = (x * x + y * y) as f64;
            // the (2πt)⁻¹ prefactor cancels in the renormalization
            *v = (-*s / (2.0 * t)).exp();
        }
        let total: f64 = values.iter().sum();
        for v in &mut values {
            *v /= total;
        }
        // d g_x / dθ = g_x (|x|² − E_g|x|²) / 2t  (quotient rule through the sum)
        let mean_sq: f64 = values.iter().zip(&sq).map(|(g, s)| g * s).sum();
        let mut d_theta = [0.0; G_TAPS];
        for ((d, g), s) in d_theta.iter_mut().zip(&values).zip(&sq) {
            *d = g * (s - mean_sq) / (2.0 * t);
        }
        Self { values, d_theta }
    }
}

/// `out[i][j] = Σ_ab g[i+a][j+b] · k[a][b]` for a 5×5 `g` and a 3×3 `k`.
#[inline]
fn valid_corr(g: &[f64; G_TAPS], k: &[f64]) -> [f64; TAPS] {
    let mut out = [0.0; TAPS];
    for i in 0..KERNEL_SIZE {
        for j in 0..KERNEL_SIZE {
            let mut acc = 0.0;
            for a in 0..KERNEL_SIZE {
                for b in 0..KERNEL_SIZE {
                    acc += g[(i + a) * GAUSSIAN_EXTENT + j + b] * k[a * KERNEL_SIZE + b];
                }
            }
            out[i * KERNEL_SIZE + j] = acc;
        }
    }
    out
}

/// One scale-attention filter, detached from its layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SacFilter {
    /// `in_channels × 3 × 3`
    pub k: DenseArray,
    /// `in_channels × 3 × 3`
    pub k_i: DenseArray,
    pub t: f64,
    pub gamma_m: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacLayer {
    k: DenseArray,
    k_i: DenseArray,
    theta: Vec<f64>,
    gamma_m: f64,
    relu: bool,
}

impl SacLayer {
    /// Fan-in scaled uniform init for `k` and (independently) `k_i`; `t = 1`.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let shape = [out_channels, in_channels, KERNEL_SIZE, KERNEL_SIZE];
        let bound = (6.0 / (in_channels * TAPS) as f64).sqrt();
        let k = DenseArray::random_uniform(&shape, -bound, bound, rng);
        let k_i = DenseArray::random_uniform(&shape, -bound, bound, rng);
        Self {
            k,
            k_i,
            theta: vec![0.0; out_channels],
            gamma_m: DEFAULT_GAMMA_M,
            relu: true,
        }
    }

    pub fn from_parts(k: DenseArray, k_i: DenseArray, theta: Vec<f64>, gamma_m: f64, relu: bool) -> Result<Self> {
        let [out, _, kh, kw] = k.dims4()?;
        if kh != KERNEL_SIZE || kw != KERNEL_SIZE {
            return Err(dim_err!("scale-attention kernels must be 3x3, got {kh}x{kw}"));
        }
        if k_i.shape() != k.shape() {
            return Err(dim_err!(
                "shortcut bank shape {:?} differs from kernel bank {:?}",
                k_i.shape(),
                k.shape()
            ));
        }
        if theta.len() != out {
            return Err(dim_err!("{} scales for {out} filters", theta.len()));
        }
        k.ensure_finite("kernel bank")?;
        k_i.ensure_finite("shortcut bank")?;
        if theta.iter().any(|v| !v.is_finite()) || !gamma_m.is_finite() {
            return Err(ScanError::NonFinite("log-scale or gamma".into()));
        }
        Ok(Self {
            k,
            k_i,
            theta,
            gamma_m,
            relu,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.k.shape()[0]
    }

    pub fn k(&self) -> &DenseArray {
        &self.k
    }

    pub fn k_i(&self) -> &DenseArray {
        &self.k_i
    }

    /// Log-scales `θ`, one per filter.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn scales(&self) -> Vec<f64> {
        self.theta.iter().map(|th| th.exp()).collect()
    }

    pub fn gamma_m(&self) -> f64 {
        self.gamma_m
    }

    pub fn relu(&self) -> bool {
        self.relu
    }

    pub fn with_relu(mut self, relu: bool) -> Self {
        self.relu = relu;
        self
    }

    pub fn filter(&self, o: usize) -> SacFilter {
        let c = self.in_channels();
        let per = c * TAPS;
        let slice = |bank: &DenseArray| {
            DenseArray::from_vec(&[c, KERNEL_SIZE, KERNEL_SIZE], bank.data()[o * per..(o + 1) * per].to_vec())
                .expect("filter slice")
        };
        SacFilter {
            k: slice(&self.k),
            k_i: slice(&self.k_i),
            t: self.theta[o].exp(),
            gamma_m: self.gamma_m,
        }
    }

    pub fn filters(&self) -> Vec<SacFilter> {
        (0..self.out_channels()).map(|o| self.filter(o)).collect()
    }

    /// Trainable parameter count: both kernel banks plus one scale per filter.
    pub fn param_count(&self) -> usize {
        self.k.len() + self.k_i.len() + self.theta.len()
    }

    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (self.k.data_mut(), self.k_i.data_mut(), &mut self.theta)
    }

    /// `k_s = t^γ · valid(g(·; t), k)` for every filter.
    pub fn scale_kernels(&self) -> DenseArray {
        let c = self.in_channels();
        let mut out = DenseArray::zeros(self.k.shape());
        for o in 0..self.out_channels() {
            let t = self.theta[o].exp();
            let g = LayerGaussian::new(t);
            let weight = t.powf(self.gamma_m);
            for ch in 0..c {
                let base = (o * c + ch) * TAPS;
                let ks = valid_corr(&g.values, &self.k.data()[base..base + TAPS]);
                for (dst, v) in out.data_mut()[base..base + TAPS].iter_mut().zip(ks) {
                    *dst = weight * v;
                }
            }
        }
        out
    }
}

/// Kernels of a layer folded for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsorbedKernel {
    pub k_s: DenseArray,
    /// `k_s + k_i`; same shape as a plain 3×3 conv bank.
    pub k_u: DenseArray,
}

pub fn absorb(layer: &SacLayer) -> AbsorbedKernel {
    let k_s = layer.scale_kernels();
    let k_u = k_s.add(&layer.k_i).expect("matching bank shapes");
    AbsorbedKernel { k_s, k_u }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SacPath {
    /// Scale-attention branch and shortcut branch as two convolutions.
    Train,
    /// One convolution with the absorbed kernel `k_u`.
    Absorbed,
}

#[derive(Clone, Debug)]
pub struct SacOutput<T: Scalar = f64> {
    pub pre_activation: DenseArray<T>,
    pub output: DenseArray<T>,
}

pub fn sac_forward<T: Scalar>(input: &DenseArray<T>, layer: &SacLayer, path: SacPath) -> Result<SacOutput<T>> {
    let [_, c, h, w] = input.dims4()?;
    if c != layer.in_channels() {
        return Err(dim_err!(
            "input has {c} channels, layer expects {}",
            layer.in_channels()
        ));
    }
    if h < GAUSSIAN_EXTENT || w < GAUSSIAN_EXTENT {
        return Err(dim_err!("input {h}x{w} smaller than the {GAUSSIAN_EXTENT}x{GAUSSIAN_EXTENT} window"));
    }
    let pre_activation = match path {
        SacPath::Train => {
            let scaled = conv2d(input, &layer.scale_kernels().cast(), Padding::Same)?;
            let shortcut = conv2d(input, &layer.k_i.cast(), Padding::Same)?;
            scaled.add(&shortcut)?
        }
        SacPath::Absorbed => conv2d(input, &absorb(layer).k_u.cast(), Padding::Same)?,
    };
    let output = if layer.relu {
        relu(&pre_activation)
    } else {
        pre_activation.clone()
    };
    Ok(SacOutput {
        pre_activation,
        output,
    })
}

#[derive(Clone, Debug)]
pub struct SacGrads {
    pub d_k: DenseArray,
    pub d_k_i: DenseArray,
    /// Gradient w.r.t. the stored log-scales `θ`.
    pub d_theta: Vec<f64>,
    /// Gradient w.r.t. `t` itself (`d_theta / t`).
    pub d_t: Vec<f64>,
    pub d_input: DenseArray,
}

/// Gradients of `<upstream, pre_activation(input)>` for every parameter and the input.
pub fn sac_backward(input: &DenseArray, layer: &SacLayer, upstream: &DenseArray) -> Result<SacGrads> {
    let d_ku = conv2d_grad_kernel(input, layer.k.shape(), upstream, Padding::Same)?;
    let (d_k, d_k_i, d_theta) = kernel_grad_to_params(layer, &d_ku);
    let d_input = conv2d_grad_input(input.shape(), &absorb(layer).k_u, upstream, Padding::Same)?;
    let d_t = d_theta
        .iter()
        .zip(&layer.theta)
        .map(|(d, th)| d / th.exp())
        .collect();
    Ok(SacGrads {
        d_k,
        d_k_i,
        d_theta,
        d_t,
        d_input,
    })
}

/// Chains a gradient w.r.t. the effective kernel `k_u` back to `(k, k_i, θ)`.
pub fn kernel_grad_to_params(layer: &SacLayer, d_ku: &DenseArray) -> (DenseArray, DenseArray, Vec<f64>) {
    let c = layer.in_channels();
    let mut d_k = DenseArray::zeros(layer.k.shape());
    let mut d_theta = vec![0.0; layer.out_channels()];
    for (o, d_th) in d_theta.iter_mut().enumerate() {
        let t = layer.theta[o].exp();
        let weight = t.powf(layer.gamma_m);
        let g = LayerGaussian::new(t);
        for ch in 0..c {
            let base = (o * c + ch) * TAPS;
            let up = &d_ku.data()[base..base + TAPS];
            let k = &layer.k.data()[base..base + TAPS];
            // k_s = w(θ) · corr(g(θ), k):  ∂/∂θ = γ k_s + w · corr(∂g/∂θ, k)
            let shape_term = valid_corr(&g.d_theta, k);
            let ks = valid_corr(&g.values, k);
            for idx in 0..TAPS {
                *d_th += up[idx] * weight * (layer.gamma_m * ks[idx] + shape_term[idx]);
            }
            let dk = &mut d_k.data_mut()[base..base + TAPS];
            for a in 0..KERNEL_SIZE {
                for b in 0..KERNEL_SIZE {
                    let mut acc = 0.0;
                    for i in 0..KERNEL_SIZE {
                        for j in 0..KERNEL_SIZE {
                            acc += up[i * KERNEL_SIZE + j] * g.values[(i + a) * GAUSSIAN_EXTENT + j + b];
                        }
                    }
                    dk[a * KERNEL_SIZE + b] = weight * acc;
                }
            }
        }
    }
    (d_k, d_ku.clone(), d_theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_gradcheck;
    use crate::scale_space::gaussian_kernel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> SacLayer {
        let mut layer = SacLayer::new(c_in, c_out, rng);
        for th in &mut layer.theta {
            *th = rng.random_range(-1.0..1.0);
        }
        layer
    }

    fn interior_diff(a: &DenseArray, b: &DenseArray, border: usize) -> f64 {
        let [n, c, h, w] = a.dims4().unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..c {
                for y in border..h - border {
                    for x in border..w - border {
                        worst = worst.max((a.at4(i, j, y, x) - b.at4(i, j, y, x)).abs());
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn gaussian_matches_sampler() {
        for t in [0.3, 1.0, 4.0] {
            let g = LayerGaussian::new(t);
            let reference = gaussian_kernel(t, GAUSSIAN_RADIUS, 2, true).unwrap();
            for (a, b) in g.values.iter().zip(reference.values.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gaussian_theta_derivative_matches_differences() {
        let th: f64 = 0.3;
        let eps = 1e-6;
        let g = LayerGaussian::new(th.exp());
        let plus = LayerGaussian::new((th + eps).exp());
        let minus = LayerGaussian::new((th - eps).exp());
        for i in 0..G_TAPS {
            let numeric = (plus.values[i] - minus.values[i]) / (2.0 * eps);
            assert!((numeric - g.d_theta[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = random_layer(&mut rng, 2, 3);
        let x = DenseArray::<f64>::zeros(&[1, 2, 6, 6]);
        for path in [SacPath::Train, SacPath::Absorbed] {
            let out = sac_forward(&x, &layer, path).unwrap();
            assert!(out.output.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_base_kernel_reduces_to_shortcut() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = random_layer(&mut rng, 2, 3).with_relu(false);
        layer.k = DenseArray::zeros(layer.k.shape());
        let x = DenseArray::random_uniform(&[2, 2, 7, 7], -1.0, 1.0, &mut rng);
        let plain = conv2d(&x, &layer.k_i, Padding::Same).unwrap();
        for path in [SacPath::Train, SacPath::Absorbed] {
            let out = sac_forward(&x, &layer, path).unwrap();
            assert!(out.pre_activation.max_abs_diff(&plain).unwrap() < 1e-15);
        }
        assert_eq!(absorb(&layer).k_u, layer.k_i);
    }

    #[test]
    fn train_and_absorbed_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(&mut rng, 3, 4);
        let x = DenseArray::random_uniform(&[2, 3, 12, 12], -1.0, 1.0, &mut rng);
        let a = sac_forward(&x, &layer, SacPath::Train).unwrap();
        let b = sac_forward(&x, &layer, SacPath::Absorbed).unwrap();
        assert!(interior_diff(&a.pre_activation, &b.pre_activation, 4) < 1e-10);
    }

    #[test]
    fn absorb_at_unit_scale_is_plain_valid_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = random_layer(&mut rng, 1, 1);
        layer.theta[0] = 0.0;
        let g = gaussian_kernel(1.0, 2, 2, true).unwrap();
        let g_img = DenseArray::from_vec(&[1, 1, 5, 5], g.values.data().to_vec()).unwrap();
        let expected = conv2d(&g_img, layer.k(), Padding::Valid).unwrap();
        let k_s = absorb(&layer).k_s;
        assert!(k_s.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn dirac_kernel_absorbs_to_gaussian_window() {
        for t in [0.5, 1.0, 2.5] {
            let mut k = DenseArray::zeros(&[1, 1, 3, 3]);
            k.data_mut()[4] = 1.0;
            let layer = SacLayer::from_parts(k, DenseArray::zeros(&[1, 1, 3, 3]), vec![f64::ln(t)], 1.0, true)
                .unwrap();
            let g = gaussian_kernel(t, 2, 2, true).unwrap();
            let k_s = absorb(&layer).k_s;
            for i in 0..3 {
                for j in 0..3 {
                    let expected = t * g.values.data()[(i + 1) * 5 + j + 1];
                    assert!((k_s.data()[i * 3 + j] - expected).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn absorb_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = random_layer(&mut rng, 2, 2);
        let before = layer.clone();
        let a = absorb(&layer);
        let b = absorb(&layer);
        assert_eq!(a.k_u.data(), b.k_u.data());
        assert_eq!(layer, before);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = random_layer(&mut rng, 2, 2);
        let x = DenseArray::<f64>::zeros(&[1, 3, 6, 6]);
        assert!(matches!(sac_forward(&x, &layer, SacPath::Train), Err(ScanError::Dimension(_))));
        let up = DenseArray::zeros(&[1, 2, 5, 6]);
        let x = DenseArray::zeros(&[1, 2, 6, 6]);
        assert!(sac_backward(&x, &layer, &up).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = random_layer(&mut rng, 2, 3);
        let x = DenseArray::random_uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let g = sac_backward(&x, &layer, &DenseArray::zeros(&[1, 3, 6, 6])).unwrap();
        assert_eq!(g.d_k.max_abs(), 0.0);
        assert_eq!(g.d_k_i.max_abs(), 0.0);
        assert!(g.d_theta.iter().all(|&v| v == 0.0));
        assert_eq!(g.d_input.max_abs(), 0.0);
    }

    #[test]
    fn null_network_has_zero_scale_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = [2, 2, 3, 3];
        let layer = SacLayer::from_parts(
            DenseArray::zeros(&shape),
            DenseArray::zeros(&shape),
            vec![0.4, -0.2],
            1.0,
            false,
        )
        .unwrap();
        let x = DenseArray::random_uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let up = DenseArray::random_uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let g = sac_backward(&x, &layer, &up).unwrap();
        assert!(g.d_t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_layer_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = random_layer(&mut rng, 2, 3).with_relu(false);
        let x = DenseArray::random_uniform(&[2, 2, 7, 7], -1.0, 1.0, &mut rng);
        let up = DenseArray::random_uniform(&[2, 3, 7, 7], -1.0, 1.0, &mut rng);
        let theta = DenseArray::from_vec(&[3], layer.theta.clone()).unwrap();
        let params = vec![layer.k.clone(), layer.k_i.clone(), theta, x.clone()];
        let report = finite_difference_gradcheck(
            |ps| {
                let l = SacLayer::from_parts(ps[0].clone(), ps[1].clone(), ps[2].data().to_vec(), 1.0, false)?;
                let out = sac_forward(&ps[3], &l, SacPath::Train)?;
                let loss: f64 = out.pre_activation.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
                let g = sac_backward(&ps[3], &l, &up)?;
                Ok((
                    loss,
                    vec![g.d_k, g.d_k_i, DenseArray::from_vec(&[3], g.d_theta)?, g.d_input],
                ))
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
