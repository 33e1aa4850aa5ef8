//! Gradients of the combined objective, the SGD training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split};
use crate::error::{dim_err, Result, ScanError};
use crate::loss::{rmo_loss_grad, total_loss, LossBreakdown, RmoConfig};
use crate::network::{argmax_rows, Layer, LayerGrads, NetworkForm, NetworkGrads, SacNetwork};
use crate::ops::{conv2d_grad_input, conv2d_grad_kernel, gap_linear_backward, relu_backward, softmax_cross_entropy, Padding};
use crate::optim::{Sgd, SgdConfig};
use crate::sac::kernel_grad_to_params;
use crate::tensor::{DenseArray, FloatWidth};

/// Which terms enter the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub include_rec: bool,
    pub rmo: RmoConfig,
    /// Stop each layer's response term at that layer's input, so it only
    /// reaches the layer's own parameters.
    pub detach_rmo_input: bool,
    /// Restrict the response term to a single layer.
    pub rmo_only_layer: Option<usize>,
}

impl Objective {
    pub fn new(rmo: RmoConfig) -> Self {
        Self {
            include_rec: true,
            rmo,
            detach_rmo_input: true,
            rmo_only_layer: None,
        }
    }
}

/// Loss breakdown and gradients of one batch.
pub fn compute_gradients(
    net: &SacNetwork,
    images: &DenseArray,
    labels: &[usize],
    objective: &Objective,
) -> Result<(LossBreakdown, NetworkGrads, DenseArray)> {
    let trace = net.forward_trace(images)?;
    let (rec, d_logits) = if objective.include_rec {
        softmax_cross_entropy(&trace.logits, labels)?
    } else {
        if labels.len() != images.shape()[0] {
            return Err(dim_err!("{} labels for a batch of {}", labels.len(), images.shape()[0]));
        }
        (0.0, DenseArray::zeros(trace.logits.shape()))
    };
    let head = gap_linear_backward(&trace.features, &net.head().weights, &net.head().bias, &d_logits)?;

    let layers = net.layers();
    let rmo_weight = objective.rmo.layer_weight(layers.len());
    let mut scale_terms = vec![0.0; layers.len()];
    let mut layer_grads = Vec::with_capacity(layers.len());
    let mut d_post = head.d_features;
    for (l, layer) in layers.iter().enumerate().rev() {
        let pre = &trace.pre_activations[l];
        let mut d_pre = if layer.relu() {
            relu_backward(pre, &d_post)?
        } else {
            d_post
        };
        let (scale, d_scale) = rmo_loss_grad(pre, objective.rmo.lambda)?;
        scale_terms[l] = scale;
        let mut d_kernel_up = d_pre.clone();
        if objective.rmo.enabled && objective.rmo_only_layer.is_none_or(|only| only == l) {
            let d_scale = d_scale.scale(rmo_weight);
            d_kernel_up.add_assign(&d_scale)?;
            if !objective.detach_rmo_input {
                d_pre.add_assign(&d_scale)?;
            }
        }
        let input = &trace.inputs[l];
        let kernel = &trace.kernels[l];
        let d_ku = conv2d_grad_kernel(input, kernel.shape(), &d_kernel_up, Padding::Same)?;
        layer_grads.push(match layer {
            Layer::Sac(s) => {
                let (d_k, d_k_i, d_theta) = kernel_grad_to_params(s, &d_ku);
                LayerGrads::Sac { d_k, d_k_i, d_theta }
            }
            Layer::Plain(_) => LayerGrads::Plain { d_kernel: d_ku },
        });
        d_post = conv2d_grad_input(input.shape(), kernel, &d_pre, Padding::Same)?;
    }
    layer_grads.reverse();
    let mut breakdown = total_loss(rec, &scale_terms, &objective.rmo);
    if let (Some(only), true) = (objective.rmo_only_layer, objective.rmo.enabled) {
        breakdown.total = rec + rmo_weight * scale_terms.get(only).copied().unwrap_or(0.0);
    }
    let grads = NetworkGrads {
        layers: layer_grads,
        d_head_weights: head.d_weights,
        d_head_bias: head.d_bias,
    };
    Ok((breakdown, grads, trace.logits))
}

/// Rebuilds a [`NetworkGrads`] from arrays ordered like [`SacNetwork::param_arrays`].
pub fn grads_from_arrays(net: &SacNetwork, arrays: &[DenseArray]) -> Result<NetworkGrads> {
    let mut it = arrays.iter();
    let mut next = |shape: &[usize]| -> Result<DenseArray> {
        let a = it.next().ok_or_else(|| dim_err!("too few gradient arrays"))?;
        if a.shape() != shape {
            return Err(dim_err!("gradient array has shape {:?}, expected {shape:?}", a.shape()));
        }
        Ok(a.clone())
    };
    let mut layers = Vec::new();
    for layer in net.layers() {
        layers.push(match layer {
            Layer::Sac(s) => LayerGrads::Sac {
                d_k: next(s.k().shape())?,
                d_k_i: next(s.k_i().shape())?,
                d_theta: next(&[s.theta().len()])?.into_vec(),
            },
            Layer::Plain(p) => LayerGrads::Plain {
                d_kernel: next(p.kernel().shape())?,
            },
        });
    }
    let d_head_weights = next(net.head().weights.shape())?;
    let d_head_bias = next(net.head().bias.shape())?;
    Ok(NetworkGrads {
        layers,
        d_head_weights,
        d_head_bias,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub form: NetworkForm,
    /// Output channels of each conv layer.
    pub widths: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            form: NetworkForm::Sac,
            widths: vec![8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the epochs after which the learning rate drops.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    pub sgd: SgdConfig,
    pub rmo: RmoConfig,
    /// Local shortcut connection; when off, shortcut kernels are zero and frozen.
    pub lsc: bool,
    pub float_width: FloatWidth,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            lr_drop_at: 0.7,
            lr_drop_factor: 0.1,
            sgd: SgdConfig::default(),
            rmo: RmoConfig::default(),
            lsc: true,
            float_width: FloatWidth::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScanError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) || !(self.lr_drop_factor > 0.0) {
            return bad("invalid learning-rate drop schedule".into());
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || self.sgd.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight decay >= 0".into());
        }
        self.rmo.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drop_epoch = (self.lr_drop_at * self.epochs as f64).round() as usize;
        if epoch >= drop_epoch && self.lr_drop_at < 1.0 {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    pub fn objective(&self) -> Objective {
        Objective::new(self.rmo)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean losses over the epoch.
    pub loss: LossBreakdown,
    /// Accuracy of the training batches as they were seen.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

/// One optimizer update; returns the batch loss and logits.
pub fn train_step(
    net: &mut SacNetwork,
    opt: &mut Sgd,
    images: &DenseArray,
    labels: &[usize],
    objective: &Objective,
    lr: f64,
) -> Result<(LossBreakdown, DenseArray)> {
    let (loss, grads, logits) = match compute_gradients(net, images, labels, objective) {
        Err(ScanError::NonFinite(what)) => {
            return Err(ScanError::NonFinite(format!("{what}; {}", diagnostic(net, &LossBreakdown::default()))))
        }
        other => other?,
    };
    if !loss.total.is_finite() || !grads.max_abs().is_finite() {
        return Err(ScanError::NonFinite(diagnostic(net, &loss)));
    }
    opt.step(net, &grads, lr)?;
    Ok((loss, logits))
}

fn diagnostic(net: &SacNetwork, loss: &LossBreakdown) -> String {
    let mut msg = format!(
        "training diverged: rec {} scale {:?} total {}",
        loss.rec, loss.scale_per_layer, loss.total
    );
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Sac(s) => msg.push_str(&format!(
                "; layer {i}: |k| {:.4e} |k_i| {:.4e} t {:?}",
                s.k().norm_l2(),
                s.k_i().norm_l2(),
                s.scales()
            )),
            Layer::Plain(p) => msg.push_str(&format!("; layer {i}: |kernel| {:.4e}", p.kernel().norm_l2())),
        }
    }
    msg
}

/// Builds a network from `net_config` and trains it on `dataset.train`.
pub fn train(net_config: &NetConfig, dataset: &Dataset, config: &TrainConfig) -> Result<(SacNetwork, History)> {
    train_with(net_config, &dataset.train, dataset.classes, config, |_| {})
}

pub fn train_with(
    net_config: &NetConfig,
    train: &Split,
    classes: usize,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(SacNetwork, History)> {
    config.validate()?;
    let channels = train.images.dims4()?[1];
    let mut net = SacNetwork::init(net_config.form, channels, &net_config.widths, classes, config.seed)?;
    net.meta.float_width = config.float_width;
    if !config.lsc {
        for (kind, p) in net.param_slices_mut() {
            if kind == crate::network::ParamKind::Shortcut {
                p.fill(0.0);
            }
        }
    }
    let history = train_network(&mut net, train, config, on_epoch)?;
    Ok((net, history))
}

/// Trains an existing network in place.
pub fn train_network(
    net: &mut SacNetwork,
    train: &Split,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<History> {
    config.validate()?;
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= net.classes()) {
        return Err(ScanError::Dataset(format!(
            "label {bad} outside the network's {} classes",
            net.classes()
        )));
    }
    let channels = train.images.dims4()?[1];
    if channels != net.in_channels() {
        return Err(ScanError::Dataset(format!(
            "dataset has {channels} channels, network expects {}",
            net.in_channels()
        )));
    }
    let objective = config.objective();
    let mut opt = Sgd::new(SgdConfig {
        freeze_shortcut: config.sgd.freeze_shortcut || !config.lsc,
        ..config.sgd
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown {
            scale_per_layer: vec![0.0; net.layers().len()],
            ..LossBreakdown::default()
        };
        let mut correct = 0usize;
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let images = train.images.gather(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (loss, logits) = train_step(net, &mut opt, &images, &labels, &objective, lr)?;
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
            sum.rec += loss.rec;
            sum.total += loss.total;
            for (s, v) in sum.scale_per_layer.iter_mut().zip(&loss.scale_per_layer) {
                *s += v;
            }
            batches += 1;
        }
        let b = batches as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: LossBreakdown {
                rec: sum.rec / b,
                scale_per_layer: sum.scale_per_layer.iter().map(|v| v / b).collect(),
                total: sum.total / b,
            },
            train_accuracy: correct as f64 / train.len() as f64,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok(history)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassStats {
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<ClassStats>,
    pub predictions: Vec<usize>,
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy, computed in the requested float width.
pub fn evaluate(net: &SacNetwork, split: &Split, width: FloatWidth) -> Result<Evaluation> {
    let n = split.len();
    let mut predictions = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let count = EVAL_CHUNK.min(n - start);
        let batch = split.images.batch_slice(start, count)?;
        let preds = match width {
            FloatWidth::F64 => argmax_rows(&net.logits(&batch)?),
            FloatWidth::F32 => argmax_rows(&net.logits(&batch.cast::<f32>())?),
        };
        predictions.extend(preds);
        start += count;
    }
    let mut per_class = vec![ClassStats { correct: 0, total: 0 }; net.classes()];
    for (&p, &l) in predictions.iter().zip(&split.labels) {
        let entry = per_class
            .get_mut(l)
            .ok_or_else(|| ScanError::Dataset(format!("label {l} outside the network's classes")))?;
        entry.total += 1;
        if p == l {
            entry.correct += 1;
        }
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    Ok(Evaluation {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        per_class,
        predictions,
    })
}
