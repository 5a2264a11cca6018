use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{ActPlacement, BatchNorm, BlockConfig, Conv2d, ForwardCtx, FusionMode, Init, Linear, StarBlock};
use crate::rng;
use crate::tensor::{Activation, ConvSpec, Graph, Layout, ParamStore, Var};

use super::{CostReport, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum StarVariant {
    S1,
    S2,
    S3,
    S4,
    N050,
    N100,
    N150,
}

impl StarVariant {
    pub const ALL: [StarVariant; 7] = [
        StarVariant::S1,
        StarVariant::S2,
        StarVariant::S3,
        StarVariant::S4,
        StarVariant::N050,
        StarVariant::N100,
        StarVariant::N150,
    ];

    pub fn config(self) -> StarNetConfig {
        use StarVariant::*;
        let (embed, depths, expansion, drop_path) = match self {
            S1 => (24, [2, 2, 8, 3], 4.0, 0.0),
            S2 => (32, [1, 2, 6, 2], 4.0, 0.0),
            S3 => (32, [2, 2, 8, 4], 4.0, 0.0),
            S4 => (32, [3, 3, 12, 5], 4.0, 0.1),
            N050 => (16, [1, 1, 3, 1], 3.0, 0.0),
            N100 => (20, [1, 2, 4, 1], 4.0, 0.0),
            N150 => (24, [1, 2, 4, 2], 3.0, 0.0),
        };
        StarNetConfig {
            embed,
            depths,
            expansion,
            drop_path,
            ..StarNetConfig::default()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StarVariant::S1 => "s1",
            StarVariant::S2 => "s2",
            StarVariant::S3 => "s3",
            StarVariant::S4 => "s4",
            StarVariant::N050 => "n050",
            StarVariant::N100 => "n100",
            StarVariant::N150 => "n150",
        }
    }
}

impl fmt::Display for StarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for StarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown StarNet variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StarNetConfig {
    pub embed: usize,
    pub depths: [usize; 4],
    pub expansion: f64,
    /// Final drop-path rate; block `k` of `n` uses `rate·k/(n−1)`.
    pub drop_path: f64,
    pub stem_channels: usize,
    pub num_classes: usize,
    pub fusion: [FusionMode; 4],
    pub placement: ActPlacement,
    pub activation: Activation,
}

impl Default for StarNetConfig {
    fn default() -> Self {
        Self {
            embed: 32,
            depths: [3, 3, 12, 5],
            expansion: 4.0,
            drop_path: 0.0,
            stem_channels: 32,
            num_classes: 1000,
            fusion: [FusionMode::Star; 4],
            placement: ActPlacement::One,
            activation: Activation::ReLU6,
        }
    }
}

impl StarNetConfig {
    pub fn stage_widths(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.embed << i)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: Conv2d,
    pub down_bn: BatchNorm,
    pub blocks: Vec<StarBlock>,
}

/// Four-stage hierarchical network of [`StarBlock`]s.
///
/// `stem conv3×3/2 → BN → ReLU6`, then per stage a `conv3×3/2 → BN`
/// downsampler doubling the width and the stage's blocks; head
/// `global pool → BN → linear`.
#[derive(Clone, Debug)]
pub struct StarNet {
    pub config: StarNetConfig,
    pub store: ParamStore,
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub stages: Vec<Stage>,
    pub norm: BatchNorm,
    pub head: Linear,
}

impl StarNet {
    pub fn variant(v: StarVariant, seed: u64) -> Result<Self> {
        Self::new(v.config(), seed)
    }

    pub fn new(config: StarNetConfig, seed: u64) -> Result<Self> {
        if config.embed == 0 || config.stem_channels == 0 || config.depths.iter().any(|&d| d == 0) {
            return Err(invalid("StarNet needs positive widths and stage depths"));
        }
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, rng::streams::INIT);
        let down_spec = ConvSpec::new(2, 1, 1);
        let stem = Conv2d::new(&mut store, "stem", 3, config.stem_channels, 3, down_spec, true, Init::KaimingFanOut, &mut r)?;
        let stem_bn = BatchNorm::new(&mut store, "stem.bn", config.stem_channels)?;
        let total: usize = config.depths.iter().sum();
        let mut k = 0;
        let mut in_ch = config.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, (&depth, &width)) in config.depths.iter().zip(&config.stage_widths()).enumerate() {
            let down = Conv2d::new(&mut store, &format!("stages.{i}.down"), in_ch, width, 3, down_spec, true, Init::KaimingFanOut, &mut r)?;
            let down_bn = BatchNorm::new(&mut store, &format!("stages.{i}.down.bn"), width)?;
            let cfg = BlockConfig {
                fusion: config.fusion[i],
                placement: config.placement,
                activation: config.activation,
                ..BlockConfig::star(width, config.expansion)
            };
            let mut blocks = Vec::with_capacity(depth);
            for j in 0..depth {
                let rate = if total > 1 { config.drop_path * k as f64 / (total - 1) as f64 } else { 0.0 };
                blocks.push(StarBlock::new(&mut store, &format!("stages.{i}.blocks.{j}"), cfg, rate, &mut r)?);
                k += 1;
            }
            stages.push(Stage { down, down_bn, blocks });
            in_ch = width;
        }
        let norm = BatchNorm::new(&mut store, "norm", in_ch)?;
        let head = Linear::new(&mut store, "head", in_ch, config.num_classes, true, Init::POINTWISE, &mut r)?;
        Ok(Self {
            config,
            store,
            stem,
            stem_bn,
            stages,
            norm,
            head,
        })
    }

    /// Sets the fusion of every block stage by stage; parameters are untouched.
    pub fn set_stage_fusion(&mut self, per_stage: [FusionMode; 4]) {
        for (stage, f) in self.stages.iter_mut().zip(per_stage) {
            stage.blocks.iter_mut().for_each(|b| b.cfg.fusion = f);
        }
        self.config.fusion = per_stage;
    }

    /// Folds every block's batch norms for inference.
    pub fn fold_bn(&mut self) -> Result<()> {
        for s in &mut self.stages {
            for b in &mut s.blocks {
                b.fold_bn(&mut self.store)?;
            }
        }
        Ok(())
    }
}

impl Model for StarNet {
    fn name(&self) -> String {
        let c = &self.config;
        format!("starnet-e{}-{:?}-r{}", c.embed, c.depths, c.expansion)
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `x: [N, 3, H, W]` → logits `[N, classes]`.
    fn forward(&mut self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let s = &self.store;
        let y = self.stem.forward(g, s, x)?;
        let y = self.stem_bn.forward(g, s, y, ctx)?;
        let mut y = g.activation(y, Activation::ReLU6)?;
        for stage in &mut self.stages {
            y = stage.down.forward(g, s, y)?;
            y = stage.down_bn.forward(g, s, y, ctx)?;
            for b in &mut stage.blocks {
                y = b.forward(g, s, y, ctx)?;
            }
        }
        let y = g.mean_pool_spatial(y, Layout::ChannelsFirst)?;
        let y = self.norm.forward(g, s, y, ctx)?;
        self.head.forward(g, s, y)
    }

    fn cost(&self, input: &[usize]) -> Result<CostReport> {
        if input.len() != 4 || input[1] != 3 {
            return Err(shape_err("StarNet::cost", format!("input {input:?}")));
        }
        let mut r = CostReport::new(input);
        r.model = self.name();
        let y = self.stem.cost("stem", input, &mut r)?;
        self.stem_bn.cost("stem.bn", &y, &mut r);
        r.push("stem.act", "relu6", 0, 0, y.iter().product());
        let mut y = y;
        for (i, stage) in self.stages.iter().enumerate() {
            y = stage.down.cost(&format!("stages.{i}.down"), &y, &mut r)?;
            stage.down_bn.cost(&format!("stages.{i}.down.bn"), &y, &mut r);
            for (j, b) in stage.blocks.iter().enumerate() {
                y = b.cost(&format!("stages.{i}.blocks.{j}"), &y, &mut r)?;
            }
        }
        let pooled = vec![y[0], y[1]];
        r.push("pool", "mean", 0, 0, pooled.iter().product());
        self.norm.cost("norm", &pooled, &mut r);
        self.head.cost("head", &pooled, &mut r);
        Ok(r)
    }
}

/// Shapes of the star-operation operands in each stage for a batch-1
/// `side × side` input: `[1, width·r, side/2^(i+2), side/2^(i+2)]`.
pub fn star_op_shapes(config: &StarNetConfig, side: usize) -> Result<Vec<[usize; 4]>> {
    let net_side = |i: usize| side.div_ceil(1 << (i + 2));
    if side < 32 {
        return Err(invalid("input side must be at least 32"));
    }
    config
        .stage_widths()
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let h = BlockConfig::star(w, config.expansion).hidden()?;
            Ok([1, h, net_side(i), net_side(i)])
        })
        .collect()
}
