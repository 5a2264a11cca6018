use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Heavy-ball SGD with L2 weight decay folded into the gradient.
    Sgd { momentum: f64 },
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

/// Everything that determines a training run besides model and data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainRecipe {
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainRecipe {
    /// The 2D-points recipe: SGD 0.9, lr 0.1 → 0.005 cosine, wd 2e-4, batch 32, 30 epochs.
    pub fn moons(seed: u64) -> Self {
        Self {
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            base_lr: 0.1,
            min_lr: 0.005,
            warmup_epochs: 0,
            weight_decay: 2e-4,
            batch_size: 32,
            epochs: 30,
            seed,
        }
    }

    /// The StarNet recipe's optimizer and schedule (AdamW 3e-3, wd 0.025, 5 warmup epochs).
    pub fn starnet(seed: u64) -> Self {
        Self {
            optimizer: OptimizerKind::AdamW {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            base_lr: 3e-3,
            min_lr: 1e-5,
            warmup_epochs: 5,
            weight_decay: 0.025,
            batch_size: 2048,
            epochs: 300,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(invalid("recipe needs 0 ≤ min_lr ≤ base_lr"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("weight decay must be ≥ 0"));
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` to `min_lr` after a linear warmup from 0.
///
/// The last step (`total_steps − 1`) returns exactly `min_lr`; with a single
/// post-warmup step there is nothing to decay and `base_lr` is returned.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64, warmup_steps: usize) -> Result<f64> {
    if total_steps <= warmup_steps {
        return Err(invalid(format!(
            "cosine schedule needs total steps ({total_steps}) > warmup steps ({warmup_steps})"
        )));
    }
    if step >= total_steps {
        return Err(invalid(format!("step {step} outside schedule of {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let span = total_steps - 1 - warmup_steps;
    if span == 0 {
        return Ok(base_lr);
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    Ok(min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Optimizer state (momentum buffers or Adam moments), one slot per parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        let second = match kind {
            OptimizerKind::AdamW { .. } => zeros.clone(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            weight_decay,
            first: zeros,
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for p in store.iter_mut() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        name: p.name.clone(),
                        step: self.steps,
                    });
                }
            }
        }
        self.steps += 1;
        let t = self.steps as f64;
        let wd = self.weight_decay;
        for (k, p) in store.iter_mut().enumerate() {
            let grad = p.grad.as_ref().map(|g| g.data());
            let theta = p.tensor.data_mut();
            let m = &mut self.first[k];
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for i in 0..theta.len() {
                        let gi = grad.map_or(0.0, |g| g[i]) + wd * theta[i];
                        m[i] = if t == 1.0 { gi } else { momentum * m[i] + gi };
                        theta[i] -= lr * m[i];
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let v = &mut self.second[k];
                    let (c1, c2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                    for i in 0..theta.len() {
                        let gi = grad.map_or(0.0, |g| g[i]);
                        theta[i] *= 1.0 - lr * wd;
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        theta[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One SGD-with-momentum update on fresh state.
pub fn sgd_momentum_step(store: &mut ParamStore, opt: &mut Optimizer, lr: f64) -> Result<()> {
    debug_assert!(matches!(opt.kind, OptimizerKind::Sgd { .. }));
    opt.step(store, lr)
}

/// One AdamW update.
pub fn adamw_step(store: &mut ParamStore, opt: &mut Optimizer, lr: f64) -> Result<()> {
    debug_assert!(matches!(opt.kind, OptimizerKind::AdamW { .. }));
    opt.step(store, lr)
}
