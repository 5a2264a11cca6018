use serde::Serialize;

use super::data::MoonsDataset;
use super::optim::{cosine_lr, Optimizer, TrainRecipe};
use crate::arch::Model;
use crate::error::{shape_err, Error, Result};
use crate::fmt::fmt9;
use crate::nn::ForwardCtx;
use crate::rng::{self, streams};
use crate::tensor::{Graph, Tensor};

/// Rows per forward pass when evaluating without gradients.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    /// Mean mini-batch loss over the epoch.
    pub train_loss: f64,
    /// Fraction of the epoch's training samples classified correctly by the
    /// train-mode forward pass that produced their gradient step.
    pub train_acc: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_acc,eval_acc\n");
        for r in &self.records {
            s += &format!(
                "{},{},{},{},{}\n",
                r.epoch,
                fmt9(r.lr),
                fmt9(r.train_loss),
                fmt9(r.train_acc),
                fmt9(r.eval_acc)
            );
        }
        s
    }
}

/// Logits for every row of `points`, computed in eval mode.
pub fn logits<M: Model + ?Sized>(model: &mut M, points: &Tensor) -> Result<Tensor> {
    if points.rank() != 2 {
        return Err(shape_err("logits", format!("points {:?}", points.shape())));
    }
    let d = points.shape()[1];
    let mut out = Vec::new();
    let mut k = 0;
    for chunk in points.data().chunks(EVAL_CHUNK * d) {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![chunk.len() / d, d], chunk.to_vec())?);
        let y = model.forward(&mut g, x, &mut ForwardCtx::eval())?;
        k = g.value(y).shape()[1];
        out.extend_from_slice(g.value(y).data());
    }
    Tensor::new(vec![points.shape()[0], k], out)
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy<M: Model + ?Sized>(model: &mut M, data: &MoonsDataset) -> Result<f64> {
    let pred = argmax_rows(&logits(model, &data.points)?);
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Keeps glibc from returning freed heap pages to the kernel after every
/// step; without this, per-step tensors are re-faulted each time.
fn retain_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        });
    }
}

/// Mini-batch training with softmax cross-entropy.
///
/// Everything random (batch order per epoch, drop path) is drawn from
/// `recipe.seed`, so a rerun reproduces the history bit for bit. Zero epochs
/// return an empty history and leave the model untouched.
pub fn train<M: Model + ?Sized>(
    model: &mut M,
    data: &MoonsDataset,
    eval: &MoonsDataset,
    recipe: &TrainRecipe,
) -> Result<History> {
    recipe.validate()?;
    retain_heap();
    if data.is_empty() {
        return Err(shape_err("train", "empty training set"));
    }
    let mut history = History::default();
    if recipe.epochs == 0 {
        return Ok(history);
    }
    let n = data.len();
    let per_epoch = n.div_ceil(recipe.batch_size);
    let total = per_epoch * recipe.epochs;
    let warmup = per_epoch * recipe.warmup_epochs;
    let mut opt = Optimizer::new(recipe.optimizer, recipe.weight_decay, model.params());
    let mut ctx = ForwardCtx::train(recipe.seed);
    model.params_mut().zero_grad();
    let mut step = 0;
    for epoch in 0..recipe.epochs {
        let order = rng::permutation(
            &mut rng::stream(recipe.seed, streams::EPOCH_SHUFFLE_BASE + epoch as u64),
            n,
        );
        let first_lr = cosine_lr(step, total, recipe.base_lr, recipe.min_lr, warmup)?;
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for idx in order.chunks(recipe.batch_size) {
            let lr = cosine_lr(step, total, recipe.base_lr, recipe.min_lr, warmup)?;
            let (x, y) = data.batch(idx);
            let mut g = Graph::new();
            let xv = g.input(x);
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
                other => other,
            };
            let out = model.forward(&mut g, xv, &mut ctx).map_err(diverged)?;
            let loss = g.cross_entropy(out, &y).map_err(diverged)?;
            let l = g.value(loss).item()?;
            if !l.is_finite() {
                return Err(Error::Diverged { step, loss: l });
            }
            loss_sum += l;
            hits += argmax_rows(g.value(out)).iter().zip(&y).filter(|(p, t)| p == t).count();
            g.backward(loss, model.params_mut())?;
            opt.step(model.params_mut(), lr)?;
            model.params_mut().zero_grad();
            step += 1;
        }
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            lr: first_lr,
            train_loss: loss_sum / per_epoch as f64,
            train_acc: hits as f64 / n as f64,
            eval_acc: accuracy(model, eval)?,
        });
    }
    Ok(history)
}
