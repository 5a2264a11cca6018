use crate::error::{invalid, shape_err, Result};
use crate::nn::{ActPlacement, BlockConfig, Conv2d, DemoBlock, ForwardCtx, FusionMode, Init, LayerNorm, Linear};
use crate::rng;
use crate::tensor::{ConvSpec, Graph, Layout, ParamStore, Var};

use super::{CostReport, Model};

/// Isotropic image network: patchify stem, a stack of demo blocks, pooled head.
#[derive(Clone, Debug)]
pub struct DemoNet {
    pub store: ParamStore,
    pub stem: Conv2d,
    pub blocks: Vec<DemoBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl DemoNet {
    pub const PATCH: usize = 16;

    pub fn new(width: usize, depth: usize, fusion: FusionMode, num_classes: usize, seed: u64) -> Result<Self> {
        Self::with_block(BlockConfig::demo(width, fusion), depth, num_classes, seed)
    }

    pub fn with_block(cfg: BlockConfig, depth: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if cfg.dim == 0 || depth == 0 || num_classes == 0 {
            return Err(invalid("DemoNet needs width, depth and classes ≥ 1"));
        }
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, rng::streams::INIT);
        let spec = ConvSpec::new(Self::PATCH, 0, 1);
        let stem = Conv2d::new(&mut store, "stem", 3, cfg.dim, Self::PATCH, spec, true, Init::KaimingFanOut, &mut r)?;
        let blocks = (0..depth)
            .map(|i| DemoBlock::new(&mut store, &format!("blocks.{i}"), cfg, Init::POINTWISE, &mut r))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut store, "norm", cfg.dim)?;
        let head = Linear::new(&mut store, "head", cfg.dim, num_classes, true, Init::POINTWISE, &mut r)?;
        Ok(Self {
            store,
            stem,
            blocks,
            norm,
            head,
        })
    }

    pub fn width(&self) -> usize {
        self.norm.dim
    }

    pub fn set_fusion(&mut self, fusion: FusionMode) {
        self.blocks.iter_mut().for_each(|b| b.cfg.fusion = fusion);
    }
}

impl Model for DemoNet {
    fn name(&self) -> String {
        format!("demonet-w{}-d{}", self.width(), self.blocks.len())
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `x: [N, 3, H, W]` → logits `[N, classes]`.
    fn forward(&mut self, g: &mut Graph, x: Var, _ctx: &mut ForwardCtx) -> Result<Var> {
        let s = &self.store;
        let y = self.stem.forward(g, s, x)?;
        let mut y = g.permute(y, &[0, 2, 3, 1])?;
        for b in &self.blocks {
            y = b.forward(g, s, y)?;
        }
        let y = g.mean_pool_spatial(y, Layout::ChannelsLast)?;
        let y = self.norm.forward(g, s, y)?;
        self.head.forward(g, s, y)
    }

    fn cost(&self, input: &[usize]) -> Result<CostReport> {
        if input.len() != 4 || input[1] != 3 {
            return Err(shape_err("DemoNet::cost", format!("input {input:?}")));
        }
        let mut r = CostReport::new(input);
        r.model = self.name();
        let y = self.stem.cost("stem", input, &mut r)?;
        let mut y = vec![y[0], y[2], y[3], y[1]];
        for (i, b) in self.blocks.iter().enumerate() {
            y = b.cost(&format!("blocks.{i}"), &y, &mut r)?;
        }
        let pooled = vec![y[0], y[3]];
        r.push("pool", "mean", 0, 0, pooled.iter().product());
        self.norm.cost("norm", &pooled, &mut r);
        self.head.cost("head", &pooled, &mut r);
        Ok(r)
    }
}

/// The point-cloud network: linear stem, demo blocks without convolution,
/// layer norm, linear head.
#[derive(Clone, Debug)]
pub struct DemoNet2d {
    pub store: ParamStore,
    pub stem: Linear,
    pub blocks: Vec<DemoBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl DemoNet2d {
    pub const WIDTH: usize = 100;
    pub const DEPTH: usize = 4;
    pub const CLASSES: usize = 2;

    /// Width 100, depth 4, ReLU on one branch.
    pub fn build(fusion: FusionMode, seed: u64) -> Result<Self> {
        Self::uniform(Self::WIDTH, Self::DEPTH, fusion, ActPlacement::One, seed)
    }

    pub fn uniform(dim: usize, depth: usize, fusion: FusionMode, placement: ActPlacement, seed: u64) -> Result<Self> {
        let cfg = BlockConfig {
            placement,
            ..BlockConfig::demo_2d(dim, fusion)
        };
        Self::new(&vec![cfg; depth], Self::CLASSES, seed)
    }

    /// One block per config; all must share `dim` and have no convolution.
    pub fn new(blocks: &[BlockConfig], num_classes: usize, seed: u64) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(invalid("DemoNet2d needs at least one block"));
        };
        let dim = first.dim;
        if blocks.iter().any(|b| b.dim != dim || b.use_conv) {
            return Err(invalid("DemoNet2d blocks must share width and use no convolution"));
        }
        let init = Init::UniformFanIn;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, rng::streams::INIT);
        let stem = Linear::new(&mut store, "stem", 2, dim, true, init, &mut r)?;
        let blocks = blocks
            .iter()
            .enumerate()
            .map(|(i, c)| DemoBlock::new(&mut store, &format!("blocks.{i}"), *c, init, &mut r))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut store, "norm", dim)?;
        let head = Linear::new(&mut store, "head", dim, num_classes, true, init, &mut r)?;
        Ok(Self {
            store,
            stem,
            blocks,
            norm,
            head,
        })
    }

    pub fn fusions(&self) -> Vec<FusionMode> {
        self.blocks.iter().map(|b| b.cfg.fusion).collect()
    }
}

impl Model for DemoNet2d {
    fn name(&self) -> String {
        let f: Vec<&str> = self.blocks.iter().map(|b| b.cfg.fusion.name()).collect();
        format!("demonet2d-w{}-{}", self.norm.dim, f.join("-"))
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `x: [N, 2]` → logits `[N, classes]`.
    fn forward(&mut self, g: &mut Graph, x: Var, _ctx: &mut ForwardCtx) -> Result<Var> {
        let s = &self.store;
        let mut y = self.stem.forward(g, s, x)?;
        for b in &self.blocks {
            y = b.forward(g, s, y)?;
        }
        let y = self.norm.forward(g, s, y)?;
        self.head.forward(g, s, y)
    }

    fn cost(&self, input: &[usize]) -> Result<CostReport> {
        if input.len() != 2 || input[1] != 2 {
            return Err(shape_err("DemoNet2d::cost", format!("input {input:?}")));
        }
        let mut r = CostReport::new(input);
        r.model = self.name();
        let mut y = self.stem.cost("stem", input, &mut r);
        for (i, b) in self.blocks.iter().enumerate() {
            y = b.cost(&format!("blocks.{i}"), &y, &mut r)?;
        }
        self.norm.cost("norm", &y, &mut r);
        self.head.cost("head", &y, &mut r);
        Ok(r)
    }
}
