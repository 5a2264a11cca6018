use serde::{Deserialize, Serialize};

use crate::arch::CostReport;
use crate::error::{invalid, shape_err, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Activation, Graph, ParamStore, Tensor, Var};

use super::layers::{fold_batch_norm, BatchNorm, Conv2d, Init, LayerNorm, Linear};
use super::{ForwardCtx, Mode};

/// How the two branches of a block are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Element-wise product.
    Star,
    /// Element-wise sum.
    Sum,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Star => "star",
            FusionMode::Sum => "sum",
        }
    }
}

/// Where the nonlinearity sits around the fusion of `x1` and `x2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActPlacement {
    /// `x1 ∘ x2`
    None,
    /// `act(x1) ∘ act(x2)`
    Both,
    /// `act(x1 ∘ x2)`
    Post,
    /// `act(x1) ∘ x2`
    One,
}

impl ActPlacement {
    pub const ALL: [ActPlacement; 4] = [
        ActPlacement::None,
        ActPlacement::Both,
        ActPlacement::Post,
        ActPlacement::One,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActPlacement::None => "none",
            ActPlacement::Both => "both",
            ActPlacement::Post => "post",
            ActPlacement::One => "one",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub fusion: FusionMode,
    pub placement: ActPlacement,
    pub activation: Activation,
    /// Spatial depthwise convolution in demo blocks.
    pub use_conv: bool,
    /// Branch width as a multiple of `dim`.
    pub expansion: f64,
}

impl BlockConfig {
    /// Image demo block: GELU on one branch, two branches of `3·dim`.
    pub fn demo(dim: usize, fusion: FusionMode) -> Self {
        Self {
            dim,
            fusion,
            placement: ActPlacement::One,
            activation: Activation::GELU,
            use_conv: true,
            expansion: 3.0,
        }
    }

    /// Point-cloud demo block: no convolution, ReLU.
    pub fn demo_2d(dim: usize, fusion: FusionMode) -> Self {
        Self {
            activation: Activation::ReLU,
            use_conv: false,
            ..Self::demo(dim, fusion)
        }
    }

    /// StarNet block with ReLU6 on one branch.
    pub fn star(dim: usize, expansion: f64) -> Self {
        Self {
            dim,
            fusion: FusionMode::Star,
            placement: ActPlacement::One,
            activation: Activation::ReLU6,
            use_conv: true,
            expansion,
        }
    }

    /// `expansion · dim`, which must be a positive integer.
    pub fn hidden(&self) -> Result<usize> {
        let h = self.expansion * self.dim as f64;
        if self.dim == 0 || !(h >= 1.0) || h.fract() != 0.0 {
            return Err(invalid(format!(
                "expansion {} × dim {} is not a positive integer",
                self.expansion, self.dim
            )));
        }
        Ok(h as usize)
    }
}

/// Merges two branches according to `fusion` and `placement`.
pub fn fuse(
    g: &mut Graph,
    x1: Var,
    x2: Var,
    fusion: FusionMode,
    placement: ActPlacement,
    act: Activation,
) -> Result<Var> {
    let combine = |g: &mut Graph, a, b| match fusion {
        FusionMode::Star => g.mul(a, b),
        FusionMode::Sum => g.add(a, b),
    };
    match placement {
        ActPlacement::None => combine(g, x1, x2),
        ActPlacement::Both => {
            let a = g.activation(x1, act)?;
            let b = g.activation(x2, act)?;
            combine(g, a, b)
        }
        ActPlacement::Post => {
            let y = combine(g, x1, x2)?;
            g.activation(y, act)
        }
        ActPlacement::One => {
            let a = g.activation(x1, act)?;
            combine(g, a, x2)
        }
    }
}

/// `x ⊙ x`.
pub fn square_fusion(g: &mut Graph, x: Var) -> Result<Var> {
    g.mul(x, x)
}

fn fusion_cost(name: &str, cfg: &BlockConfig, elems: usize, report: &mut CostReport) {
    let acts = match cfg.placement {
        ActPlacement::None => 0,
        ActPlacement::Both => 2,
        ActPlacement::Post | ActPlacement::One => 1,
    };
    if acts > 0 {
        report.push(&format!("{name}.act"), cfg.activation.name(), 0, 0, acts * elems);
    }
    report.push(&format!("{name}.fuse"), cfg.fusion.name(), 0, 0, elems);
}

/// The isotropic demo block, channel-last.
///
/// `x → LN → [dwconv 7×7] → linear dim→2h → split → fuse → linear h→dim → + x`
#[derive(Clone, Debug)]
pub struct DemoBlock {
    pub cfg: BlockConfig,
    pub norm: LayerNorm,
    pub dwconv: Option<Conv2d>,
    pub f: Linear,
    pub g: Linear,
}

impl DemoBlock {
    pub const KERNEL: usize = 7;

    pub fn new(store: &mut ParamStore, name: &str, cfg: BlockConfig, init: Init, rng: &mut Rng) -> Result<Self> {
        let h = cfg.hidden()?;
        let d = cfg.dim;
        Ok(Self {
            cfg,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            dwconv: if cfg.use_conv {
                Some(Conv2d::depthwise(store, &format!("{name}.dwconv"), d, Self::KERNEL, rng)?)
            } else {
                None
            },
            f: Linear::new(store, &format!("{name}.f"), d, 2 * h, true, init, rng)?,
            g: Linear::new(store, &format!("{name}.g"), h, d, true, init, rng)?,
        })
    }

    /// `x: [N, H, W, dim]` with a convolution, `[N, dim]` (or any rank) without.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut y = self.norm.forward(g, store, x)?;
        if let Some(dw) = &self.dwconv {
            if g.value(y).rank() != 4 {
                return Err(shape_err("demo_block", format!("conv block needs [N,H,W,C], got {:?}", g.value(y).shape())));
            }
            y = g.permute(y, &[0, 3, 1, 2])?;
            y = dw.forward(g, store, y)?;
            y = g.permute(y, &[0, 2, 3, 1])?;
        }
        let y = self.f.forward(g, store, y)?;
        let h = self.g.in_dim;
        let x1 = g.slice_last(y, 0, h)?;
        let x2 = g.slice_last(y, h, h)?;
        let z = fuse(g, x1, x2, self.cfg.fusion, self.cfg.placement, self.cfg.activation)?;
        let z = self.g.forward(g, store, z)?;
        g.add(x, z)
    }

    pub fn num_params(&self) -> usize {
        2 * self.cfg.dim + self.dwconv.as_ref().map_or(0, Conv2d::num_params) + self.f.num_params() + self.g.num_params()
    }

    pub fn cost(&self, name: &str, input: &[usize], report: &mut CostReport) -> Result<Vec<usize>> {
        self.norm.cost(&format!("{name}.norm"), input, report);
        if let Some(dw) = &self.dwconv {
            let cf = [input[0], input[3], input[1], input[2]];
            dw.cost(&format!("{name}.dwconv"), &cf, report)?;
        }
        let y = self.f.cost(&format!("{name}.f"), input, report);
        fusion_cost(name, &self.cfg, y.iter().product::<usize>() / 2, report);
        let mut half = y;
        *half.last_mut().unwrap() = self.g.in_dim;
        let out = self.g.cost(&format!("{name}.g"), &half, report);
        report.push(&format!("{name}.residual"), "add", 0, 0, out.iter().product());
        Ok(out)
    }
}

fn drop_path(g: &mut Graph, x: Var, rate: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    if ctx.mode != Mode::Train || rate <= 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let per_sample = shape[1..].iter().product::<usize>();
    let keep = 1.0 - rate;
    let mut mask = Vec::with_capacity(shape.iter().product());
    for _ in 0..shape[0] {
        let m = if rng::uniform(&mut ctx.rng, 0.0, 1.0) < keep { 1.0 / keep } else { 0.0 };
        mask.extend(std::iter::repeat_n(m, per_sample));
    }
    g.scale(x, Tensor::new(shape, mask)?)
}

/// StarNet block, channel-first.
///
/// `x → dwconv → BN → (act(f1) ∘ f2) → g → dwconv → BN → drop path → + x`
#[derive(Clone, Debug)]
pub struct StarBlock {
    pub cfg: BlockConfig,
    pub dwconv: Conv2d,
    pub bn: BatchNorm,
    pub f1: Conv2d,
    pub f2: Conv2d,
    pub g: Conv2d,
    pub dwconv2: Conv2d,
    pub bn2: BatchNorm,
    pub drop_path: f64,
    folded: bool,
}

impl StarBlock {
    pub const KERNEL: usize = 7;

    pub fn new(store: &mut ParamStore, name: &str, cfg: BlockConfig, drop_path: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_path) {
            return Err(invalid(format!("drop path rate {drop_path} outside [0, 1)")));
        }
        let (d, h) = (cfg.dim, cfg.hidden()?);
        Ok(Self {
            cfg,
            dwconv: Conv2d::depthwise(store, &format!("{name}.dwconv"), d, Self::KERNEL, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), d)?,
            f1: Conv2d::pointwise(store, &format!("{name}.f1"), d, h, rng)?,
            f2: Conv2d::pointwise(store, &format!("{name}.f2"), d, h, rng)?,
            g: Conv2d::pointwise(store, &format!("{name}.g"), h, d, rng)?,
            dwconv2: Conv2d::depthwise(store, &format!("{name}.dwconv2"), d, Self::KERNEL, rng)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), d)?,
            drop_path,
            folded: false,
        })
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    /// Absorbs both batch norms into their depthwise convolutions. Only valid
    /// for evaluation; training a folded block is an error.
    pub fn fold_bn(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.folded {
            return Err(invalid("block is already folded"));
        }
        fold_batch_norm(&self.dwconv, &self.bn, store)?;
        fold_batch_norm(&self.dwconv2, &self.bn2, store)?;
        self.folded = true;
        Ok(())
    }

    fn norm(bn: &mut BatchNorm, folded: bool, g: &mut Graph, store: &ParamStore, x: Var, ctx: &ForwardCtx) -> Result<Var> {
        if folded {
            if ctx.mode != Mode::Eval {
                return Err(invalid("folded block can only run in eval mode"));
            }
            return Ok(x);
        }
        bn.forward(g, store, x, ctx)
    }

    /// `x: [N, dim, H, W]`.
    pub fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let y = self.dwconv.forward(g, store, x)?;
        let y = Self::norm(&mut self.bn, self.folded, g, store, y, ctx)?;
        let a = self.f1.forward(g, store, y)?;
        let b = self.f2.forward(g, store, y)?;
        let z = fuse(g, a, b, self.cfg.fusion, self.cfg.placement, self.cfg.activation)?;
        let z = self.g.forward(g, store, z)?;
        let z = self.dwconv2.forward(g, store, z)?;
        let z = Self::norm(&mut self.bn2, self.folded, g, store, z, ctx)?;
        let z = drop_path(g, z, self.drop_path, ctx)?;
        g.add(x, z)
    }

    pub fn num_params(&self) -> usize {
        let bn = 2 * self.cfg.dim;
        [&self.dwconv, &self.f1, &self.f2, &self.g, &self.dwconv2]
            .iter()
            .map(|c| c.num_params())
            .sum::<usize>()
            + 2 * bn
    }

    pub fn cost(&self, name: &str, input: &[usize], report: &mut CostReport) -> Result<Vec<usize>> {
        let y = self.dwconv.cost(&format!("{name}.dwconv"), input, report)?;
        self.bn.cost(&format!("{name}.bn"), &y, report);
        let a = self.f1.cost(&format!("{name}.f1"), &y, report)?;
        self.f2.cost(&format!("{name}.f2"), &y, report)?;
        fusion_cost(name, &self.cfg, a.iter().product(), report);
        let z = self.g.cost(&format!("{name}.g"), &a, report)?;
        let z = self.dwconv2.cost(&format!("{name}.dwconv2"), &z, report)?;
        self.bn2.cost(&format!("{name}.bn2"), &z, report);
        report.push(&format!("{name}.residual"), "add", 0, 0, z.iter().product());
        Ok(z)
    }
}

/// Width of the expanded branch in [`OneBranchStar`] that matches the
/// pointwise cost of a two-branch block with expansion `r`:
/// `2·d·d' = 3·r·d²`.
pub fn one_branch_hidden(dim: usize, expansion: f64) -> Result<usize> {
    let h = 1.5 * expansion * dim as f64;
    if dim == 0 || !(h >= 1.0) {
        return Err(invalid("one-branch width must be positive"));
    }
    Ok(h.round() as usize)
}

/// `(W2ᵀ act(W1ᵀ x)) ⊙ x`: only one factor is transformed.
#[derive(Clone, Debug)]
pub struct OneBranchStar {
    pub w1: Conv2d,
    pub w2: Conv2d,
    pub activation: Activation,
}

impl OneBranchStar {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            w1: Conv2d::pointwise(store, &format!("{name}.w1"), dim, hidden, rng)?,
            w2: Conv2d::pointwise(store, &format!("{name}.w2"), hidden, dim, rng)?,
            activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.w1.forward(g, store, x)?;
        let y = g.activation(y, self.activation)?;
        let y = self.w2.forward(g, store, y)?;
        g.mul(y, x)
    }
}

/// A StarNet block whose star operation is replaced by [`OneBranchStar`].
#[derive(Clone, Debug)]
pub struct OneBranchBlock {
    pub dim: usize,
    pub dwconv: Conv2d,
    pub bn: BatchNorm,
    pub star: OneBranchStar,
    pub dwconv2: Conv2d,
    pub bn2: BatchNorm,
}

impl OneBranchBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, activation: Activation, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            dim,
            dwconv: Conv2d::depthwise(store, &format!("{name}.dwconv"), dim, StarBlock::KERNEL, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), dim)?,
            star: OneBranchStar::new(store, name, dim, hidden, activation, rng)?,
            dwconv2: Conv2d::depthwise(store, &format!("{name}.dwconv2"), dim, StarBlock::KERNEL, rng)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), dim)?,
        })
    }

    pub fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let y = self.dwconv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, ctx)?;
        let z = self.star.forward(g, store, y)?;
        let z = self.dwconv2.forward(g, store, z)?;
        let z = self.bn2.forward(g, store, z, ctx)?;
        g.add(x, z)
    }

    pub fn cost(&self, name: &str, input: &[usize], report: &mut CostReport) -> Result<Vec<usize>> {
        let y = self.dwconv.cost(&format!("{name}.dwconv"), input, report)?;
        self.bn.cost(&format!("{name}.bn"), &y, report);
        let h = self.star.w1.cost(&format!("{name}.w1"), &y, report)?;
        report.push(&format!("{name}.act"), self.star.activation.name(), 0, 0, h.iter().product());
        let z = self.star.w2.cost(&format!("{name}.w2"), &h, report)?;
        report.push(&format!("{name}.fuse"), "star", 0, 0, z.iter().product());
        let z = self.dwconv2.cost(&format!("{name}.dwconv2"), &z, report)?;
        self.bn2.cost(&format!("{name}.bn2"), &z, report);
        report.push(&format!("{name}.residual"), "add", 0, 0, z.iter().product());
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut rng::stream(seed, rng::streams::PROBE))
    }

    #[test]
    fn hidden_must_be_integral() {
        assert_eq!(BlockConfig::star(24, 4.0).hidden().unwrap(), 96);
        assert!(BlockConfig::star(5, 0.5).hidden().is_err());
        assert!(BlockConfig::star(0, 4.0).hidden().is_err());
    }

    #[test]
    fn demo_block_with_zero_branches_is_identity() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(1, 0);
        let b = DemoBlock::new(&mut s, "b", BlockConfig::demo(8, FusionMode::Star), Init::POINTWISE, &mut r).unwrap();
        s.zero_prefix("b.f.");
        s.zero_prefix("b.g.");
        let x = randn(&[2, 3, 3, 8], 5);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = b.forward(&mut g, &s, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn demo_block_zero_input_passes_through() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(2, 0);
        let b = DemoBlock::new(&mut s, "b", BlockConfig::demo(4, FusionMode::Star), Init::POINTWISE, &mut r).unwrap();
        let x = Tensor::zeros(&[1, 3, 3, 4]);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = b.forward(&mut g, &s, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn star_and_sum_differ() {
        let mut r = rng::stream(3, 0);
        let mut s = ParamStore::new();
        let mut star = DemoBlock::new(&mut s, "b", BlockConfig::demo_2d(8, FusionMode::Star), Init::UniformFanIn, &mut r).unwrap();
        let x = randn(&[4, 8], 9);
        let mut g = Graph::new();
        let xv = g.input(x);
        let a = star.forward(&mut g, &s, xv).unwrap();
        star.cfg.fusion = FusionMode::Sum;
        let b = star.forward(&mut g, &s, xv).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)).unwrap() > 1e-6);
    }

    #[test]
    fn star_block_with_zero_branches_is_identity() {
        let mut s = ParamStore::new();
        let mut r = rng::stream(4, 0);
        let mut b = StarBlock::new(&mut s, "b", BlockConfig::star(8, 4.0), 0.0, &mut r).unwrap();
        for p in ["b.f1.", "b.f2.", "b.g."] {
            s.zero_prefix(p);
        }
        let x = randn(&[2, 8, 5, 5], 6);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = b.forward(&mut g, &s, xv, &mut ForwardCtx::eval()).unwrap();
        assert!(g.value(y).max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn fusion_placements_are_distinct() {
        let mut g = Graph::new();
        let a = g.input(randn(&[16], 1));
        let b = g.input(randn(&[16], 2));
        let outs: Vec<Tensor> = ActPlacement::ALL
            .iter()
            .map(|&p| {
                let v = fuse(&mut g, a, b, FusionMode::Star, p, Activation::ReLU6).unwrap();
                g.value(v).clone()
            })
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(outs[i].max_abs_diff(&outs[j]).unwrap() > 0.0, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn drop_path_is_train_only_and_per_sample() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[64, 3], 1.0));
        let mut ctx = ForwardCtx::eval();
        assert_eq!(drop_path(&mut g, x, 0.5, &mut ctx).unwrap(), x);
        let mut ctx = ForwardCtx::train(0);
        let y = drop_path(&mut g, x, 0.5, &mut ctx).unwrap();
        let rows: Vec<&[f64]> = g.value(y).data().chunks(3).collect();
        assert!(rows.iter().all(|r| r.iter().all(|&v| v == r[0]) && (r[0] == 0.0 || r[0] == 2.0)));
        let kept = rows.iter().filter(|r| r[0] > 0.0).count();
        assert!(kept > 16 && kept < 48, "{kept}");
    }

    #[test]
    fn one_branch_width_matches_pointwise_cost() {
        let d = 32;
        let h = one_branch_hidden(d, 4.0).unwrap();
        assert_eq!(2 * d * h, 3 * d * 4 * d);
    }
}
