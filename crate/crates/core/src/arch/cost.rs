use std::fmt::Write as _;

use serde::Serialize;

use crate::fmt::sig9;

/// Printed under every cost table.
pub const MAC_NOTE: &str = "FLOPs are multiply-accumulates (1 MAC counted once), the convention of the \
efficient-network tables; normalization, activation and element-wise entries list element counts only.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: usize,
    pub macs: usize,
    /// Output elements produced by the layer.
    pub elements: usize,
}

/// Per-layer parameter and multiply-accumulate counts for one input shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub input: Vec<usize>,
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_macs: usize,
}

impl CostReport {
    pub fn new(input: &[usize]) -> Self {
        Self {
            model: String::new(),
            input: input.to_vec(),
            layers: Vec::new(),
            total_params: 0,
            total_macs: 0,
        }
    }

    pub fn push(&mut self, name: &str, kind: &str, params: usize, macs: usize, elements: usize) {
        self.total_params += params;
        self.total_macs += macs;
        self.layers.push(LayerCost {
            name: name.to_string(),
            kind: kind.to_string(),
            params,
            macs,
            elements,
        });
    }

    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn macs_millions(&self) -> f64 {
        self.total_macs as f64 / 1e6
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "input": self.input,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "params_m": sig9(self.params_millions()),
            "flops_m": sig9(self.macs_millions()),
            "note": MAC_NOTE,
            "layers": self.layers,
        })
    }

    /// Aligned plain-text table with a totals row and the MAC note.
    pub fn to_table(&self) -> String {
        let name_w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(0).max(5);
        let kind_w = self.layers.iter().map(|l| l.kind.len()).max().unwrap_or(0).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{} input {:?}", self.model, self.input);
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<kind_w$}  {:>12}  {:>14}  {:>12}",
            "layer", "kind", "params", "FLOPs (MACs)", "elements"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<name_w$}  {:<kind_w$}  {:>12}  {:>14}  {:>12}",
                l.name, l.kind, l.params, l.macs, l.elements
            );
        }
        let _ = writeln!(
            s,
            "{:<name_w$}  {:<kind_w$}  {:>12}  {:>14}",
            "total", "", self.total_params, self.total_macs
        );
        let _ = writeln!(
            s,
            "params {}M  FLOPs {}M",
            sig9(self.params_millions()),
            sig9(self.macs_millions())
        );
        let _ = writeln!(s, "note: {MAC_NOTE}");
        s
    }
}
