//! Operation and memory counts for a forward pass.

use super::DgpModel;
use crate::config::Rule;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    /// `M³·D_out`: factorizing and using `K_uu` for every output.
    pub gp_time: u64,
    /// `M·D_in² + |φ| + |ψ|`: the inference-function evaluation.
    pub amortizer_time: u64,
    /// `M²·D_out + M·D_in² + |φ| + |ψ|`.
    pub memory: u64,
    /// How many times the layer runs per datapoint (S for AR1 beyond layer 1).
    pub multiplier: u64,
}

impl LayerCost {
    pub fn time(&self) -> u64 {
        self.multiplier * (self.gp_time + self.amortizer_time)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub rule: Rule,
    pub layers: Vec<LayerCost>,
    /// Per-datapoint totals.
    pub time: u64,
    pub memory: u64,
    /// Totals for a minibatch of `B` points; global layers pay their cubic
    /// term once per batch.
    pub batch_time: u64,
    pub batch_memory: u64,
}

/// Asymptotic counts per layer for batch size `b` and `s` paths.
pub fn cost_report(model: &DgpModel, b: usize, s: usize) -> CostReport {
    let rule = model.rule();
    let (b, s) = (b as u64, s as u64);
    let mut layers = Vec::with_capacity(model.layers.len());
    let (mut batch_time, mut batch_memory) = (0, 0);
    for (l, layer) in model.layers.iter().enumerate() {
        let (m, d_in, d_out) = (layer.m as u64, layer.d_in as u64, layer.d_out as u64);
        let (phi, psi) = layer.amortizer_param_counts();
        let amortized = !layer.is_global();
        let amortizer = if amortized { m * d_in * d_in + (phi + psi) as u64 } else { 0 };
        let multiplier = if rule == Rule::AR1 && l > 0 { s } else { 1 };
        let gp_memory = m * m * d_out;
        let c = LayerCost {
            layer: l + 1,
            gp_time: m * m * m * d_out,
            amortizer_time: amortizer,
            memory: multiplier * gp_memory + amortizer,
            multiplier,
        };
        if amortized {
            batch_time += b * c.time();
            batch_memory += b * multiplier * gp_memory + amortizer;
        } else {
            // one shared factorization plus the per-point cross-covariances
            batch_time += c.gp_time + b * s * m * m * d_out;
            batch_memory += gp_memory + b * s * m * d_out;
        }
        layers.push(c);
    }
    let time = layers.iter().map(LayerCost::time).sum();
    let memory = layers.iter().map(|c| c.memory).sum();
    CostReport { rule, layers, time, memory, batch_time, batch_memory }
}
