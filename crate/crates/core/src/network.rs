//! Stacked convolution layers with a global-average-pool classifier head.
//!
//! A network exists in one of two forms: `Sac`, whose layers are
//! [`SacLayer`]s, or `Absorbed`, whose layers are plain 3×3 convolutions
//! (either the folded kernels of a trained SAC network, or a plain-conv
//! baseline trained directly).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result, ScanError};
use crate::ops::{conv2d, gap_linear, relu, Padding};
use crate::sac::{absorb, sac_forward, SacLayer, SacPath, KERNEL_SIZE};
use crate::tensor::{DenseArray, FloatWidth, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkForm {
    Sac = 0,
    Absorbed = 1,
}

impl NetworkForm {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainLayer {
    kernel: DenseArray,
    relu: bool,
}

impl PlainLayer {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_channels * KERNEL_SIZE * KERNEL_SIZE) as f64).sqrt();
        Self {
            kernel: DenseArray::random_uniform(
                &[out_channels, in_channels, KERNEL_SIZE, KERNEL_SIZE],
                -bound,
                bound,
                rng,
            ),
            relu: true,
        }
    }

    pub fn from_kernel(kernel: DenseArray, relu: bool) -> Result<Self> {
        let [_, _, kh, kw] = kernel.dims4()?;
        if kh != KERNEL_SIZE || kw != KERNEL_SIZE {
            return Err(dim_err!("plain layers use 3x3 kernels, got {kh}x{kw}"));
        }
        kernel.ensure_finite("plain kernel")?;
        Ok(Self { kernel, relu })
    }

    pub fn kernel(&self) -> &DenseArray {
        &self.kernel
    }

    pub fn relu(&self) -> bool {
        self.relu
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub(crate) fn kernel_mut(&mut self) -> &mut [f64] {
        self.kernel.data_mut()
    }

    pub fn forward<T: Scalar>(&self, input: &DenseArray<T>) -> Result<(DenseArray<T>, DenseArray<T>)> {
        let pre = conv2d(input, &self.kernel.cast(), Padding::Same)?;
        let post = if self.relu { relu(&pre) } else { pre.clone() };
        Ok((pre, post))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Sac(SacLayer),
    Plain(PlainLayer),
}

impl Layer {
    pub fn in_channels(&self) -> usize {
        match self {
            Layer::Sac(l) => l.in_channels(),
            Layer::Plain(l) => l.in_channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Layer::Sac(l) => l.out_channels(),
            Layer::Plain(l) => l.out_channels(),
        }
    }

    pub fn relu(&self) -> bool {
        match self {
            Layer::Sac(l) => l.relu(),
            Layer::Plain(l) => l.relu(),
        }
    }

    /// The single 3×3 kernel bank this layer currently convolves with.
    pub fn effective_kernel(&self) -> DenseArray {
        match self {
            Layer::Sac(l) => absorb(l).k_u,
            Layer::Plain(l) => l.kernel.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Sac(l) => l.param_count(),
            Layer::Plain(l) => l.kernel.len(),
        }
    }
}

/// Classifier head: global average pooling then an affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weights: DenseArray,
    pub bias: DenseArray,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Self {
        let bound = (1.0 / channels as f64).sqrt();
        Self {
            weights: DenseArray::random_uniform(&[classes, channels], -bound, bound, rng),
            bias: DenseArray::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Bookkeeping that travels with a network in memory (not serialized).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NetworkMeta {
    pub float_width: FloatWidth,
    pub seed: u64,
    pub config_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacNetwork {
    layers: Vec<Layer>,
    head: Head,
    pub meta: NetworkMeta,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input of every layer (`inputs[0]` is the image batch).
    pub inputs: Vec<DenseArray>,
    /// Pre-activation output of every layer.
    pub pre_activations: Vec<DenseArray>,
    /// Kernel each layer convolved with.
    pub kernels: Vec<DenseArray>,
    /// Output of the last layer, fed to the head.
    pub features: DenseArray,
    pub logits: DenseArray,
}

impl SacNetwork {
    pub fn new(layers: Vec<Layer>, head: Head) -> Result<Self> {
        if layers.is_empty() {
            return Err(dim_err!("a network needs at least one conv layer"));
        }
        let sac = matches!(layers[0], Layer::Sac(_));
        if layers.iter().any(|l| matches!(l, Layer::Sac(_)) != sac) {
            return Err(dim_err!("a network cannot mix scale-attention and plain layers"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(dim_err!(
                    "layer {i} emits {} channels but layer {} expects {}",
                    pair[0].out_channels(),
                    i + 1,
                    pair[1].in_channels()
                ));
            }
        }
        let last = layers.last().unwrap().out_channels();
        if head.channels() != last || head.bias.shape() != [head.classes()] {
            return Err(dim_err!(
                "head expects {} channels but the last layer emits {last}",
                head.channels()
            ));
        }
        Ok(Self {
            layers,
            head,
            meta: NetworkMeta::default(),
        })
    }

    /// Freshly initialized network; `widths` lists the output channels of each conv layer.
    pub fn init(form: NetworkForm, in_channels: usize, widths: &[usize], classes: usize, seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || classes < 2 || in_channels == 0 {
            return Err(ScanError::Config(format!(
                "invalid architecture: {in_channels} input channels, widths {widths:?}, {classes} classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = in_channels;
        let mut layers = Vec::with_capacity(widths.len());
        for &w in widths {
            layers.push(match form {
                NetworkForm::Sac => Layer::Sac(SacLayer::new(c, w, &mut rng)),
                NetworkForm::Absorbed => Layer::Plain(PlainLayer::new(c, w, &mut rng)),
            });
            c = w;
        }
        let head = Head::new(c, classes, &mut rng);
        let mut net = Self::new(layers, head)?;
        net.meta.seed = seed;
        Ok(net)
    }

    pub fn form(&self) -> NetworkForm {
        match self.layers[0] {
            Layer::Sac(_) => NetworkForm::Sac,
            Layer::Plain(_) => NetworkForm::Absorbed,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::out_channels).collect()
    }

    /// Scale-attention layers, or `None` for an absorbed network.
    pub fn sac_layers(&self) -> Option<Vec<&SacLayer>> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Sac(s) => Some(s),
                Layer::Plain(_) => None,
            })
            .collect()
    }

    /// Folds every scale-attention layer into a plain 3×3 kernel.
    pub fn absorbed(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Sac(s) => Layer::Plain(PlainLayer {
                    kernel: absorb(s).k_u,
                    relu: s.relu(),
                }),
                Layer::Plain(p) => Layer::Plain(p.clone()),
            })
            .collect();
        Self {
            layers,
            head: self.head.clone(),
            meta: self.meta,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum::<usize>() + self.head.param_count()
    }

    /// Multiplications per output pixel position in the conv stack, counting
    /// both branches of a scale-attention layer in its training form.
    pub fn conv_multiplies_per_pixel(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let per = l.out_channels() * l.in_channels() * KERNEL_SIZE * KERNEL_SIZE;
                match l {
                    Layer::Sac(_) => 2 * per,
                    Layer::Plain(_) => per,
                }
            })
            .sum()
    }

    /// Inference in any float width. Scale-attention layers run their
    /// two-branch training path, absorbed layers a single convolution.
    pub fn logits<T: Scalar>(&self, images: &DenseArray<T>) -> Result<DenseArray<T>> {
        self.check_input(images.shape())?;
        let mut x = images.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Sac(s) => sac_forward(&x, s, SacPath::Train)?.output,
                Layer::Plain(p) => p.forward(&x)?.1,
            };
        }
        gap_linear(&x, &self.head.weights.cast(), &self.head.bias.cast())
    }

    pub fn predict(&self, images: &DenseArray) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(argmax_rows(&logits))
    }

    /// Forward pass that keeps what the backward pass needs.
    ///
    /// Each layer convolves once with its effective kernel (for a
    /// scale-attention layer the kernel is re-synthesized from the live
    /// parameters).
    pub fn forward_trace(&self, images: &DenseArray) -> Result<ForwardTrace> {
        self.check_input(images.shape())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n);
        let mut kernels = Vec::with_capacity(n);
        let mut x = images.clone();
        for layer in &self.layers {
            let kernel = layer.effective_kernel();
            let pre = conv2d(&x, &kernel, Padding::Same)?;
            let post = if layer.relu() { relu(&pre) } else { pre.clone() };
            inputs.push(std::mem::replace(&mut x, post));
            pre_activations.push(pre);
            kernels.push(kernel);
        }
        let logits = gap_linear(&x, &self.head.weights, &self.head.bias)?;
        Ok(ForwardTrace {
            inputs,
            pre_activations,
            kernels,
            features: x,
            logits,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            &[_, c, h, w] if c == self.in_channels() && h >= 5 && w >= 5 => Ok(()),
            other => Err(dim_err!(
                "network expects n x {} x h x w images (h, w >= 5), got {other:?}",
                self.in_channels()
            )),
        }
    }

    /// Every trainable array as a mutable slice, in a fixed order:
    /// per layer `k, k_i, θ` (or the plain kernel), then head weights and bias.
    pub(crate) fn param_slices_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for layer in &mut self.layers {
            match layer {
                Layer::Sac(s) => {
                    let (k, k_i, theta) = s.params_mut();
                    out.push((ParamKind::Kernel, k));
                    out.push((ParamKind::Shortcut, k_i));
                    out.push((ParamKind::LogScale, theta));
                }
                Layer::Plain(p) => out.push((ParamKind::Kernel, p.kernel_mut())),
            }
        }
        out.push((ParamKind::HeadWeight, self.head.weights.data_mut()));
        out.push((ParamKind::HeadBias, self.head.bias.data_mut()));
        out
    }

    /// Copies of every trainable array, in the order of [`NetworkGrads::arrays`].
    pub fn param_arrays(&self) -> Vec<DenseArray> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Sac(s) => {
                    out.push(s.k().clone());
                    out.push(s.k_i().clone());
                    out.push(DenseArray::from_vec(&[s.theta().len()], s.theta().to_vec()).expect("rank-1 theta"));
                }
                Layer::Plain(p) => out.push(p.kernel.clone()),
            }
        }
        out.push(self.head.weights.clone());
        out.push(self.head.bias.clone());
        out
    }

    /// Same architecture with the trainable arrays replaced.
    pub fn with_param_arrays(&self, arrays: &[DenseArray]) -> Result<Self> {
        let mut net = self.clone();
        let mut slices = net.param_slices_mut();
        if slices.len() != arrays.len() {
            return Err(dim_err!("expected {} parameter arrays, got {}", slices.len(), arrays.len()));
        }
        for ((_, dst), src) in slices.iter_mut().zip(arrays) {
            if dst.len() != src.len() {
                return Err(dim_err!("parameter array has {} values, expected {}", src.len(), dst.len()));
            }
            dst.copy_from_slice(src.data());
        }
        Ok(net)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Kernel,
    Shortcut,
    LogScale,
    HeadWeight,
    HeadBias,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads {
    Sac {
        d_k: DenseArray,
        d_k_i: DenseArray,
        d_theta: Vec<f64>,
    },
    Plain {
        d_kernel: DenseArray,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
    pub d_head_weights: DenseArray,
    pub d_head_bias: DenseArray,
}

impl NetworkGrads {
    /// Gradient slices in the order of the network's parameter slices.
    pub fn slices(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerGrads::Sac { d_k, d_k_i, d_theta } => {
                    out.push((ParamKind::Kernel, d_k.data()));
                    out.push((ParamKind::Shortcut, d_k_i.data()));
                    out.push((ParamKind::LogScale, d_theta.as_slice()));
                }
                LayerGrads::Plain { d_kernel } => out.push((ParamKind::Kernel, d_kernel.data())),
            }
        }
        out.push((ParamKind::HeadWeight, self.d_head_weights.data()));
        out.push((ParamKind::HeadBias, self.d_head_bias.data()));
        out
    }

    pub fn arrays(&self) -> Vec<DenseArray> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerGrads::Sac { d_k, d_k_i, d_theta } => {
                    out.push(d_k.clone());
                    out.push(d_k_i.clone());
                    out.push(DenseArray::from_vec(&[d_theta.len()], d_theta.clone()).expect("rank-1 theta"));
                }
                LayerGrads::Plain { d_kernel } => out.push(d_kernel.clone()),
            }
        }
        out.push(self.d_head_weights.clone());
        out.push(self.d_head_bias.clone());
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|(_, s)| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn argmax_rows<T: Scalar>(logits: &DenseArray<T>) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
