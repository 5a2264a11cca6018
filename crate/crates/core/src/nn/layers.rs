use crate::arch::CostReport;
use crate::error::{invalid, Result};
use crate::rng::{self, Rng};
use crate::tensor::{channel_moments, BnStats, ConvSpec, Graph, ParamId, ParamStore, Tensor, Var};

use super::{ForwardCtx, Mode};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal at `±2σ`; bias zero.
    TruncNormal(f64),
    /// Normal with `std = √(2 / fan_out)`, `fan_out = kh·kw·out / groups`; bias zero.
    KaimingFanOut,
    /// Uniform `±1/√fan_in` for weight and bias alike.
    UniformFanIn,
    Zeros,
}

impl Init {
    pub const POINTWISE: Init = Init::TruncNormal(0.02);

    fn weight(self, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
        match self {
            Init::TruncNormal(std) => Tensor::from_fn(shape, |_| rng::truncated_normal(rng, std)),
            Init::KaimingFanOut => {
                let std = (2.0 / fan_out as f64).sqrt();
                Tensor::from_fn(shape, |_| std * rng::normal(rng))
            }
            Init::UniformFanIn => {
                let b = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(shape, -b, b, rng)
            }
            Init::Zeros => Tensor::zeros(shape),
        }
    }

    fn bias(self, n: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
        match self {
            Init::UniformFanIn => {
                let b = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(&[n], -b, b, rng)
            }
            _ => Tensor::zeros(&[n]),
        }
    }
}

/// Fully connected layer over the last axis; weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(invalid(format!("{name}: linear extents must be positive")));
        }
        let weight = store.add(
            format!("{name}.weight"),
            init.weight(&[in_dim, out_dim], in_dim, out_dim, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), init.bias(out_dim, in_dim, rng))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    /// Records this layer on `input` (any rank, features last) and returns the output shape.
    pub fn cost(&self, name: &str, input: &[usize], report: &mut CostReport) -> Vec<usize> {
        let rows: usize = input[..input.len() - 1].iter().product();
        let mut out = input.to_vec();
        *out.last_mut().unwrap() = self.out_dim;
        report.push(
            name,
            "linear",
            self.num_params(),
            rows * self.in_dim * self.out_dim,
            rows * self.out_dim,
        );
        out
    }
}

/// Grouped 2D convolution over `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let groups = spec.groups;
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 || kernel == 0 {
            return Err(invalid(format!(
                "{name}: channels {in_ch}→{out_ch} incompatible with {groups} groups"
            )));
        }
        let shape = [out_ch, in_ch / groups, kernel, kernel];
        let fan_in = in_ch / groups * kernel * kernel;
        let fan_out = out_ch / groups * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), init.weight(&shape, fan_in, fan_out, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), init.bias(out_ch, fan_in, rng))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            spec,
        })
    }

    /// `k×k`, stride 1, same padding, one group per channel.
    pub fn depthwise(store: &mut ParamStore, name: &str, ch: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        let spec = ConvSpec::new(1, kernel / 2, ch);
        Self::new(store, name, ch, ch, kernel, spec, true, Init::KaimingFanOut, rng)
    }

    /// `1×1` convolution, equivalent to a linear layer over channels.
    pub fn pointwise(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut Rng) -> Result<Self> {
        let spec = ConvSpec::new(1, 0, 1);
        Self::new(store, name, in_ch, out_ch, 1, spec, true, Init::POINTWISE, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.spec)
    }

    pub fn num_params(&self) -> usize {
        let w = self.out_ch * self.in_ch / self.spec.groups * self.kernel * self.kernel;
        w + if self.bias.is_some() { self.out_ch } else { 0 }
    }

    pub fn cost(&self, name: &str, input: &[usize], report: &mut CostReport) -> Result<Vec<usize>> {
        let ho = self.spec.out_extent(input[2], self.kernel)?;
        let wo = self.spec.out_extent(input[3], self.kernel)?;
        let out = vec![input[0], self.out_ch, ho, wo];
        let elems: usize = out.iter().product();
        let per_out = self.in_ch / self.spec.groups * self.kernel * self.kernel;
        let kind = if self.spec.groups == self.in_ch && self.in_ch > 1 {
            "dwconv"
        } else {
            "conv"
        };
        report.push(name, kind, self.num_params(), elems * per_out, elems);
        Ok(out)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
            dim,
            eps: Self::EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn cost(&self, name: &str, input: &[usize], report: &mut CostReport) -> Vec<usize> {
        report.push(name, "layernorm", 2 * self.dim, 0, input.iter().product());
        input.to_vec()
    }
}

/// Batch normalization over axis 1 with owned running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BnStats,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[ch], 1.0))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[ch]))?,
            stats: BnStats::new(ch),
        })
    }

    pub fn channels(&self) -> usize {
        self.stats.running_mean.len()
    }

    pub fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &ForwardCtx) -> Result<Var> {
        if ctx.mode == Mode::Calibrate {
            let t = g.value(x);
            let c = self.channels();
            let inner: usize = t.shape().get(2..).map_or(1, |s| s.iter().product());
            let (mean, var) = channel_moments(t.data(), c, inner);
            self.stats.set_from_batch(mean, var);
        }
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(x, gamma, beta, &mut self.stats, ctx.mode == Mode::Train)
    }

    /// Per-channel `(scale, shift)` of the eval-mode affine map.
    pub fn eval_affine(&self, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
        let gm = store.value(self.gamma).data();
        let bt = store.value(self.beta).data();
        let s = &self.stats;
        let scale: Vec<f64> = (0..self.channels())
            .map(|c| gm[c] / (s.running_var[c] + s.eps).sqrt())
            .collect();
        let shift = (0..self.channels())
            .map(|c| bt[c] - s.running_mean[c] * scale[c])
            .collect();
        (scale, shift)
    }

    pub fn cost(&self, name: &str, input: &[usize], report: &mut CostReport) -> Vec<usize> {
        report.push(name, "batchnorm", 2 * self.channels(), 0, input.iter().product());
        input.to_vec()
    }
}

/// Folds an eval-mode batch norm into the preceding convolution, which must
/// have a bias. Afterwards `conv` alone computes `bn(conv(x))`.
pub fn fold_batch_norm(conv: &Conv2d, bn: &BatchNorm, store: &mut ParamStore) -> Result<()> {
    let bias = conv
        .bias
        .ok_or_else(|| invalid("batch-norm folding needs a convolution bias"))?;
    if bn.channels() != conv.out_ch {
        return Err(invalid("batch norm and convolution disagree on channels"));
    }
    let (scale, shift) = bn.eval_affine(store);
    let per_out = store.value(conv.weight).len() / conv.out_ch;
    for (o, row) in store
        .value_mut(conv.weight)
        .data_mut()
        .chunks_exact_mut(per_out)
        .enumerate()
    {
        row.iter_mut().for_each(|w| *w *= scale[o]);
    }
    for (o, b) in store.value_mut(bias).data_mut().iter_mut().enumerate() {
        *b = *b * scale[o] + shift[o];
    }
    Ok(())
}
