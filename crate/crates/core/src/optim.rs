//! SGD with momentum and decoupled parameter-group rules.

use crate::error::{dim_err, Result};
use crate::network::{NetworkGrads, ParamKind, SacNetwork};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    /// L2 penalty on conv kernels and head weights; log-scales and biases are exempt.
    pub weight_decay: f64,
    /// Keep shortcut kernels fixed (used when the local shortcut is disabled).
    pub freeze_shortcut: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            freeze_shortcut: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    fn decays(&self, kind: ParamKind) -> bool {
        matches!(kind, ParamKind::Kernel | ParamKind::Shortcut | ParamKind::HeadWeight)
    }

    /// `v ← μv + g + wd·p;  p ← p − lr·v`.
    pub fn step(&mut self, net: &mut SacNetwork, grads: &NetworkGrads, lr: f64) -> Result<()> {
        let grad_slices = grads.slices();
        let mut params = net.param_slices_mut();
        if grad_slices.len() != params.len() {
            return Err(dim_err!(
                "{} gradient groups for {} parameter groups",
                grad_slices.len(),
                params.len()
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        let cfg = self.config;
        for (i, ((kind, p), (gkind, g))) in params.iter_mut().zip(&grad_slices).enumerate() {
            if *kind != *gkind || p.len() != g.len() || self.velocity[i].len() != p.len() {
                return Err(dim_err!("gradient group {i} does not match its parameters"));
            }
            if cfg.freeze_shortcut && *kind == ParamKind::Shortcut {
                continue;
            }
            let wd = if self.decays(*kind) { cfg.weight_decay } else { 0.0 };
            for ((pv, &gv), vv) in p.iter_mut().zip(g.iter()).zip(self.velocity[i].iter_mut()) {
                *vv = cfg.momentum * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
