//! Response-maximization objective and the combined training loss.

use crate::error::{Result, ScanError};
use crate::tensor::DenseArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmoConfig {
    pub lambda: f64,
    pub enabled: bool,
    pub aggregation: Aggregation,
}

impl Default for RmoConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            enabled: true,
            aggregation: Aggregation::Sum,
        }
    }
}

impl RmoConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ScanError::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Weight each layer's term carries in the total.
    pub fn layer_weight(&self, layers: usize) -> f64 {
        match self.aggregation {
            Aggregation::Sum => 1.0,
            Aggregation::Mean => 1.0 / layers.max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LossBreakdown {
    pub rec: f64,
    pub scale_per_layer: Vec<f64>,
    pub total: f64,
}

/// `exp(−λ‖f‖₂/(H·W))` per sample, averaged over the batch.
pub fn rmo_loss(f_out: &DenseArray, lambda: f64) -> Result<f64> {
    let [n, _, h, w] = f_out.dims4()?;
    let area = (h * w) as f64;
    let per = f_out.len() / n.max(1);
    let total: f64 = f_out
        .data()
        .chunks(per.max(1))
        .map(|s| (-lambda * l2(s) / area).exp())
        .sum();
    Ok(total / n as f64)
}

/// Loss and its gradient w.r.t. `f_out`. The gradient of a sample with a
/// zero response is taken as zero (the norm is not differentiable there).
pub fn rmo_loss_grad(f_out: &DenseArray, lambda: f64) -> Result<(f64, DenseArray)> {
    let [n, _, h, w] = f_out.dims4()?;
    let area = (h * w) as f64;
    let per = f_out.len() / n.max(1);
    let mut grad = DenseArray::zeros(f_out.shape());
    let mut total = 0.0;
    for (s, g) in f_out.data().chunks(per).zip(grad.data_mut().chunks_mut(per)) {
        let norm = l2(s);
        let value = (-lambda * norm / area).exp();
        total += value;
        if norm > 0.0 {
            let coef = -lambda * value / (area * norm * n as f64);
            for (gv, &sv) in g.iter_mut().zip(s) {
                *gv = coef * sv;
            }
        }
    }
    Ok((total / n as f64, grad))
}

pub fn total_loss(rec: f64, scale_terms: &[f64], config: &RmoConfig) -> LossBreakdown {
    let total = if config.enabled {
        let w = config.layer_weight(scale_terms.len());
        rec + w * scale_terms.iter().sum::<f64>()
    } else {
        rec
    };
    LossBreakdown {
        rec,
        scale_per_layer: scale_terms.to_vec(),
        total,
    }
}

fn l2(s: &[f64]) -> f64 {
    s.iter().map(|v| v * v).sum::<f64>().sqrt()
}
