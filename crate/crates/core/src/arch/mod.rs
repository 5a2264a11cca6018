//! Network zoo and cost accounting.

mod cost;
mod demo;
mod starnet;

pub use cost::{CostReport, LayerCost, MAC_NOTE};
pub use demo::{DemoNet, DemoNet2d};
pub use starnet::{star_op_shapes, Stage, StarNet, StarNetConfig, StarVariant};

use crate::error::{invalid, Result};
use crate::nn::{ForwardCtx, FusionMode};
use crate::tensor::{Graph, ParamStore, Var};

/// A network with its own parameters.
pub trait Model {
    fn name(&self) -> String;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Records the forward pass on `g`; returns the logits.
    fn forward(&mut self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<Var>;
    /// Analytic cost for a given input shape.
    fn cost(&self, input: &[usize]) -> Result<CostReport>;
}

/// Any network of the zoo.
#[derive(Clone, Debug)]
pub enum Network {
    Demo(DemoNet),
    Demo2d(DemoNet2d),
    Star(StarNet),
}

impl Network {
    fn inner(&self) -> &dyn Model {
        match self {
            Network::Demo(n) => n,
            Network::Demo2d(n) => n,
            Network::Star(n) => n,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Model {
        match self {
            Network::Demo(n) => n,
            Network::Demo2d(n) => n,
            Network::Star(n) => n,
        }
    }

    /// Per-stage fusion for StarNet; other families are an error.
    pub fn replace_fusion_by_stage(&mut self, per_stage: [FusionMode; 4]) -> Result<()> {
        match self {
            Network::Star(n) => {
                n.set_stage_fusion(per_stage);
                Ok(())
            }
            _ => Err(invalid("per-stage fusion applies to StarNet only")),
        }
    }
}

impl Model for Network {
    fn name(&self) -> String {
        self.inner().name()
    }

    fn params(&self) -> &ParamStore {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().params_mut()
    }

    fn forward(&mut self, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        self.inner_mut().forward(g, x, ctx)
    }

    fn cost(&self, input: &[usize]) -> Result<CostReport> {
        self.inner().cost(input)
    }
}
