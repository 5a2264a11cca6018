use std::cell::Cell;

use super::kernels::{self, Activation, BnStats, ConvGeom, ConvSpec, Layout};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Op families, used to name ops in diagnostics and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Mul,
    Add,
    AddBias,
    Scale,
    Conv2d,
    LayerNorm,
    BatchNorm,
    Activation,
    MeanPool,
    Permute,
    Reshape,
    Slice,
    Sum,
    CrossEntropy,
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of `kind` sign-flipped on its first input,
/// on the current thread only. Used to prove that gradient checks catch a
/// broken rule.
pub fn with_backward_fault<R>(kind: OpKind, f: impl FnOnce() -> R) -> R {
    struct Reset(Option<OpKind>);
    impl Drop for Reset {
        fn drop(&mut self) {
            BACKWARD_FAULT.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(BACKWARD_FAULT.with(|c| c.replace(Some(kind))));
    f()
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Mul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        inner: usize,
        train: bool,
    },
    Act(Var, Activation),
    MeanPool(Var, Layout),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf | Op::Param(_) => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Mul(..) => OpKind::Mul,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Act(..) => OpKind::Activation,
            Op::MeanPool(..) => OpKind::MeanPool,
            Op::Permute(..) => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum(..) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Mul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Scale(x, _)
            | Op::Act(x, _)
            | Op::MeanPool(x, _)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::Sum(x) => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass. Nodes are appended in execution order, so
/// every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name(op.kind()),
            });
        }
        let needs_grad = match &op {
            Op::Param(_) => true,
            Op::Leaf => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is tracked and reported in [`Gradients`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies parameter `id` onto the graph; backward accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// Element-wise product: the star operation.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.rank() != 1 || tb.len() != n || n == 0 {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let shape = tx.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias))
    }

    /// Multiplies by a constant tensor of the same shape (no gradient to it).
    pub fn scale(&mut self, x: Var, factor: Tensor) -> Result<Var> {
        let tx = self.value(x);
        same_shape("scale", tx, &factor)?;
        let out: Vec<f64> = tx.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let shape = tx.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(x, factor.into_data()))
    }

    /// `x · w + b` over the last axis of `x`, with `w` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let tw = self.value(w);
        if shape.is_empty() || tw.rank() != 2 || tw.shape()[0] != shape[shape.len() - 1] {
            return Err(shape_err(
                "linear",
                format!("input {:?}, weight {:?}", shape, tw.shape()),
            ));
        }
        let (fan_in, fan_out) = (tw.shape()[0], tw.shape()[1]);
        let rows = shape.iter().product::<usize>() / fan_in.max(1);
        let flat = if shape.len() == 2 {
            x
        } else {
            self.reshape(x, &[rows, fan_in])?
        };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = fan_out;
        self.reshape(y, &out_shape)
    }

    /// Grouped 2D cross-correlation of `x: [N,C,H,W]` with `w: [O, C/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let [n, c, h, wd] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let [o, cg, kh, kw] = [tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]];
        let g = spec.groups;
        if g == 0 || c % g != 0 || o % g != 0 {
            return Err(invalid(format!(
                "conv2d: channels in {c} / out {o} not divisible by groups {g}"
            )));
        }
        if cg != c / g {
            return Err(shape_err(
                "conv2d",
                format!("weight expects {cg} channels per group, input has {}", c / g),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.value(b).shape())));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho: spec.out_extent(h, kh)?,
            wo: spec.out_extent(wd, kw)?,
            spec,
        };
        let out = kernels::conv2d_forward(
            tx.data(),
            tw.data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(vec![n, o, geom.ho, geom.wo], out)?;
        self.push(t, Op::Conv2d { x, w, b, geom })
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&0);
        if d == 0 || self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    tx.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let rows = tx.len() / d;
        let (mean, var) = kernels::channel_moments(tx.data(), rows, d);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = tx.data().to_vec();
        for (r, row) in xhat.chunks_exact_mut(d).enumerate() {
            row.iter_mut().for_each(|v| *v = (*v - mean[r]) * rstd[r]);
        }
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(d) {
            for ((v, g), b) in row.iter_mut().zip(gm).zip(bt) {
                *v = *v * g + b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Per-channel normalization with the channel on axis 1. In training mode
    /// the batch statistics are used and `stats` is updated with momentum;
    /// in eval mode the running statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        train: bool,
    ) -> Result<Var> {
        if !(stats.eps > 0.0) {
            return Err(invalid(format!("batch_norm eps must be positive, got {}", stats.eps)));
        }
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(shape_err("batch_norm", format!("input {:?}", tx.shape())));
        }
        let c = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        if self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
            || stats.running_mean.len() != c
            || stats.running_var.len() != c
        {
            return Err(shape_err(
                "batch_norm",
                format!("input {:?} vs affine/statistics of other length", tx.shape()),
            ));
        }
        let (mean, var) = if train {
            let (mean, var) = kernels::channel_moments(tx.data(), c, inner);
            let m = (tx.len() / c) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                stats.running_mean[ch] =
                    (1.0 - stats.momentum) * stats.running_mean[ch] + stats.momentum * mean[ch];
                stats.running_var[ch] = (1.0 - stats.momentum) * stats.running_var[ch]
                    + stats.momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (stats.running_mean.clone(), stats.running_var.clone())
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = tx.data().to_vec();
        let mut out = vec![0.0; tx.len()];
        for (blk, (xh, o)) in xhat
            .chunks_exact_mut(inner)
            .zip(out.chunks_exact_mut(inner))
            .enumerate()
        {
            let ch = blk % c;
            for (v, y) in xh.iter_mut().zip(o.iter_mut()) {
                *v = (*v - mean[ch]) * rstd[ch];
                *y = *v * gm[ch] + bt[ch];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                inner,
                train,
            },
        )
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        if act == Activation::Identity {
            return Ok(x);
        }
        let tx = self.value(x);
        let out: Vec<f64> = tx.data().iter().map(|&v| act.apply(v)).collect();
        let shape = tx.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Act(x, act))
    }

    /// Mean over the two spatial axes of a rank-4 map, giving `[N, C]`.
    pub fn mean_pool_spatial(&mut self, x: Var, layout: Layout) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(shape_err("mean_pool_spatial", format!("input {:?}", tx.shape())));
        }
        let s = tx.shape();
        let (n, c, hw) = match layout {
            Layout::ChannelsFirst => (s[0], s[1], s[2] * s[3]),
            Layout::ChannelsLast => (s[0], s[3], s[1] * s[2]),
        };
        let mut out = vec![0.0; n * c];
        let d = tx.data();
        match layout {
            Layout::ChannelsFirst => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = d[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
                }
            }
            Layout::ChannelsLast => {
                for b in 0..n {
                    for p in 0..hw {
                        let row = &d[(b * hw + p) * c..(b * hw + p + 1) * c];
                        for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= hw as f64);
            }
        }
        self.push(Tensor::new(vec![n, c], out)?, Op::MeanPool(x, layout))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut seen = vec![false; tx.rank()];
        if perm.len() != tx.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(
                "permute",
                format!("{:?} is not a permutation of rank {}", perm, tx.rank()),
            ));
        }
        let (out, shape) = kernels::permute(tx.data(), tx.shape(), perm);
        self.push(Tensor::new(shape, out)?, Op::Permute(x, perm.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&0);
        if len == 0 || start + len > d {
            return Err(shape_err(
                "slice_last",
                format!("{start}..{} out of last axis {d}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(tx.len() / d * len);
        for row in tx.data().chunks_exact(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(Tensor::new(shape, out)?, Op::Slice { x, start, len })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ x ⊙ weights` with constant `weights`.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let y = self.scale(x, weights)?;
        self.sum(y)
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() || t.shape()[0] == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?}, {} labels", t.shape(), labels.len()),
            ));
        }
        let k = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; t.len()];
        let mut loss = 0.0;
        for ((row, p), &label) in t.data().chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (pi, v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        loss /= labels.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Parameter gradients are *added* to whatever `params` already holds, so
    /// calling this twice without [`ParamStore::zero_grad`] doubles them.
    pub fn backward(&self, loss: Var, params: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let fault = BACKWARD_FAULT.with(|c| c.get());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let flip = fault == Some(node.op.kind());
            let mut contribs = self.local_backward(node, &gout);
            if flip {
                if let Some((_, g)) = contribs.first_mut() {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (v, g) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
            grads[id] = Some(gout);
        }
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(pid), Some(g)) = (&node.op, g) {
                params.accumulate_grad(*pid, g)?;
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient contributions of one node to its inputs. Inputs that do not
    /// need a gradient may be skipped.
    fn local_backward(&self, node: &Node, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut out = Vec::new();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gout, false, tb.data(), true, 0.0, &mut da);
                    out.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, gout, false, 0.0, &mut db);
                    out.push((*b, db));
                }
                out
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, gout.iter().zip(tb).map(|(g, y)| g * y).collect()),
                    (*b, gout.iter().zip(ta).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                let mut db = vec![0.0; n];
                for row in gout.chunks_exact(n) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                vec![(*x, gout.to_vec()), (*b, db)]
            }
            Op::Scale(x, f) => vec![(*x, gout.iter().zip(f).map(|(g, s)| g * s).collect())],
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gout,
                    geom,
                    needs(*x),
                );
                let mut out = Vec::with_capacity(3);
                if needs(*x) {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.value(*gamma).data();
                let d = gm.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; d];
                let mut dbt = vec![0.0; d];
                for (r, ((go, xh), dxr)) in gout
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = go[j] * gm[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        dg[j] += go[j] * xh[j];
                        dbt[j] += go[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        dxr[j] = rstd[r] * (go[j] * gm[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, dbt)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                inner,
                train,
            } => {
                let gm = self.value(*gamma).data();
                let c = gm.len();
                let inner = *inner;
                let mut dg = vec![0.0; c];
                let mut dbt = vec![0.0; c];
                let mut sum_dxh = vec![0.0; c];
                let mut sum_dxh_xh = vec![0.0; c];
                for (blk, (go, xh)) in gout.chunks_exact(inner).zip(xhat.chunks_exact(inner)).enumerate() {
                    let ch = blk % c;
                    for (g, h) in go.iter().zip(xh) {
                        dg[ch] += g * h;
                        dbt[ch] += g;
                        sum_dxh[ch] += g * gm[ch];
                        sum_dxh_xh[ch] += g * gm[ch] * h;
                    }
                }
                let m = (xhat.len() / c) as f64;
                let mut dx = vec![0.0; xhat.len()];
                for (blk, ((go, xh), d)) in gout
                    .chunks_exact(inner)
                    .zip(xhat.chunks_exact(inner))
                    .zip(dx.chunks_exact_mut(inner))
                    .enumerate()
                {
                    let ch = blk % c;
                    for ((g, h), o) in go.iter().zip(xh).zip(d.iter_mut()) {
                        *o = if *train {
                            rstd[ch] * (g * gm[ch] - sum_dxh[ch] / m - h * sum_dxh_xh[ch] / m)
                        } else {
                            g * gm[ch] * rstd[ch]
                        };
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, dbt)]
            }
            Op::Act(x, act) => {
                let tx = self.value(*x).data();
                vec![(*x, gout.iter().zip(tx).map(|(g, v)| g * act.derivative(*v)).collect())]
            }
            Op::MeanPool(x, layout) => {
                let s = self.value(*x).shape();
                let (n, c, hw) = match layout {
                    Layout::ChannelsFirst => (s[0], s[1], s[2] * s[3]),
                    Layout::ChannelsLast => (s[0], s[3], s[1] * s[2]),
                };
                let scale = 1.0 / hw as f64;
                let mut dx = vec![0.0; n * c * hw];
                match layout {
                    Layout::ChannelsFirst => {
                        for (i, g) in gout.iter().enumerate() {
                            dx[i * hw..(i + 1) * hw].iter_mut().for_each(|v| *v = g * scale);
                        }
                    }
                    Layout::ChannelsLast => {
                        for b in 0..n {
                            for p in 0..hw {
                                let row = &mut dx[(b * hw + p) * c..(b * hw + p + 1) * c];
                                for (v, g) in row.iter_mut().zip(&gout[b * c..(b + 1) * c]) {
                                    *v = g * scale;
                                }
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (dx, _) = kernels::permute(gout, node.value.shape(), &inv);
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, gout.to_vec())],
            Op::Slice { x, start, len } => {
                let d = *self.value(*x).shape().last().unwrap();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (row, g) in dx.chunks_exact_mut(d).zip(gout.chunks_exact(*len)) {
                    row[*start..start + len].copy_from_slice(g);
                }
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![gout[0]; self.value(*x).len()])],
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = probs.len() / labels.len();
                let scale = gout[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &l) in d.chunks_exact_mut(k).zip(labels) {
                    row[l] -= scale;
                }
                vec![(*logits, d)]
            }
        }
    }
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::MatMul => "matmul",
        OpKind::Mul => "mul",
        OpKind::Add => "add",
        OpKind::AddBias => "add_bias",
        OpKind::Scale => "scale",
        OpKind::Conv2d => "conv2d",
        OpKind::LayerNorm => "layer_norm",
        OpKind::BatchNorm => "batch_norm",
        OpKind::Activation => "activation",
        OpKind::MeanPool => "mean_pool_spatial",
        OpKind::Permute => "permute",
        OpKind::Reshape => "reshape",
        OpKind::Slice => "slice_last",
        OpKind::Sum => "sum",
        OpKind::CrossEntropy => "cross_entropy",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.input(t(&[1, 2], &[1.0, 2.0]));
        let b = g.input(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
        assert!(matches!(g.matmul(a, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let z = g.input(Tensor::from_vec(vec![0.0; 3]));
        let o = g.input(Tensor::from_vec(vec![1.0; 3]));
        let y = g.mul(a, z).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        let y = g.mul(a, o).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        let p = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let q = g.input(Tensor::from_vec(vec![0.0, 0.0]));
        let r = g.input(Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.add(p, q).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        let y = g.add(p, r).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0]);
        assert!(g.mul(a, p).is_err());
        assert!(g.add(a, p).is_err());
    }

    #[test]
    fn conv2d_pointwise_and_box_sum() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let w = g.input(t(&[1, 1, 1, 1], &[2.0]));
        let y = g.conv2d(x, w, None, ConvSpec::new(1, 0, 1)).unwrap();
        let expect: Vec<f64> = (0..9).map(|i| 2.0 * i as f64).collect();
        assert_eq!(g.value(y).data(), expect.as_slice());

        let x = g.input(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, w, None, ConvSpec::new(2, 0, 1)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0; 4]);
    }

    #[test]
    fn conv2d_rejects_bad_groups_and_extent() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.input(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(g.conv2d(x, w, None, ConvSpec::new(1, 0, 2)).is_err());
        let w = g.input(Tensor::zeros(&[3, 3, 5, 5]));
        assert!(g.conv2d(x, w, None, ConvSpec::new(1, 0, 1)).is_err());
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut r = rng::stream(3, 0);
        let x = Tensor::randn(&[2, 4, 5, 6], &mut r);
        let w = Tensor::randn(&[6, 2, 3, 2], &mut r);
        let b = Tensor::randn(&[6], &mut r);
        let (stride, pad, groups) = (2, 1, 2);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), ConvSpec::new(stride, pad, groups)).unwrap();
        let out = g.value(y);
        let (ho, wo) = (out.shape()[2], out.shape()[3]);
        assert_eq!((ho, wo), (3, 4));
        for n in 0..2 {
            for o in 0..6 {
                let grp = o / 3;
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b.data()[o];
                        for cc in 0..2 {
                            let c = grp * 2 + cc;
                            for ki in 0..3 {
                                for kj in 0..2 {
                                    let ii = (i * stride + ki) as isize - pad as isize;
                                    let jj = (j * stride + kj) as isize - pad as isize;
                                    if ii < 0 || jj < 0 || ii >= 5 || jj >= 6 {
                                        continue;
                                    }
                                    acc += x.data()[((n * 4 + c) * 5 + ii as usize) * 6 + jj as usize]
                                        * w.data()[((o * 2 + cc) * 3 + ki) * 2 + kj];
                                }
                            }
                        }
                        let got = out.data()[((n * 6 + o) * ho + i) * wo + j];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_of_constant_is_beta() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 4], 3.5));
        let gamma = g.input(Tensor::full(&[4], 2.0));
        let beta = g.input(Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);
        assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut r = rng::stream(11, 0);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[5, 16], &mut r));
        let gamma = g.input(Tensor::full(&[16], 1.0));
        let beta = g.input(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let mut r = rng::stream(12, 0);
        let data = Tensor::randn(&[2, 3, 2, 2], &mut r);
        let mut g = Graph::new();
        let x = g.input(data.clone());
        let gamma = g.input(Tensor::full(&[3], 1.0));
        let beta = g.input(Tensor::zeros(&[3]));
        let mut stats = BnStats::new(3);
        stats.eps = 1e-300;
        let y = g.batch_norm(x, gamma, beta, &mut stats, false).unwrap();
        assert!(g.value(y).max_abs_diff(&data).unwrap() < 1e-15);
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut g = Graph::new();
        // channel 0: values 1,3 ; channel 1: values 2,6
        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 6.0]));
        let gamma = g.input(Tensor::full(&[2], 1.0));
        let beta = g.input(Tensor::zeros(&[2]));
        let mut stats = BnStats::new(2);
        g.batch_norm(x, gamma, beta, &mut stats, true).unwrap();
        assert!((stats.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((stats.running_mean[1] - 0.4).abs() < 1e-15);
        // unbiased var of {1,3} = 2, of {2,6} = 8
        assert!((stats.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
        assert!((stats.running_var[1] - (0.9 + 0.8)).abs() < 1e-15);
    }

    #[test]
    fn mean_pool_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 2, 3, 3], 4.25));
        let y = g.mean_pool_spatial(x, Layout::ChannelsFirst).unwrap();
        assert_eq!(g.value(y).data(), &[4.25, 4.25]);

        let checker = Tensor::from_fn(&[1, 4, 4, 1], |i| if (i / 4 + i % 4) % 2 == 0 { 0.0 } else { 2.0 });
        let x = g.input(checker);
        let y = g.mean_pool_spatial(x, Layout::ChannelsLast).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);

        let flat = g.input(Tensor::zeros(&[2, 3]));
        assert!(g.mean_pool_spatial(flat, Layout::ChannelsFirst).is_err());
    }

    #[test]
    fn mean_pool_matches_scalar_loop() {
        let mut r = rng::stream(13, 0);
        let data = Tensor::randn(&[2, 3, 4, 5], &mut r);
        let mut g = Graph::new();
        let x = g.input(data.clone());
        let y = g.mean_pool_spatial(x, Layout::ChannelsLast).unwrap();
        for n in 0..2 {
            for c in 0..5 {
                let mut s = 0.0;
                for h in 0..3 {
                    for w in 0..4 {
                        s += data.data()[((n * 3 + h) * 4 + w) * 5 + c];
                    }
                }
                assert!((g.value(y).data()[n * 5 + c] - s / 12.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_linear_case() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![0.5, -1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let x = g.input(Tensor::from_vec(vec![3.0, 4.0, 5.0]));
        let p = g.mul(wv, x).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_ref().unwrap().data(), &[3.0, 4.0, 5.0]);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_ref().unwrap().data(), &[6.0, 8.0, 10.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::zeros(&[2]));
        assert!(g.backward(x, &mut ParamStore::new()).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(vec![f64::MAX]));
        assert!(matches!(g.add(a, a), Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn fault_injection_flips_sign_on_this_thread_only() {
        let run = || {
            let mut g = Graph::new();
            let x = g.input_with_grad(Tensor::from_vec(vec![2.0]));
            let y = g.mul(x, x).unwrap();
            let l = g.sum(y).unwrap();
            g.backward(l, &mut ParamStore::new()).unwrap().wrt(x).unwrap()[0]
        };
        assert_eq!(run(), 4.0);
        // only the first input's contribution is flipped: 2 - 2 = 0
        assert_eq!(with_backward_fault(OpKind::Mul, run), 0.0);
        assert_eq!(run(), 4.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[3, 4]));
        let loss = g.cross_entropy(l, &[0, 1, 3]).unwrap();
        assert!((g.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(g.cross_entropy(l, &[0, 1, 4]).is_err());
    }
}
