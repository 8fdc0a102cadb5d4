//! Per-layer GMACs accounting and the complexity regularizer.
//!
//! The regularizer is `Σ_ℓ (A_ℓ^t / A_ℓ^0) · GMACs_ℓ`, where `A_ℓ` is the
//! output area of layer `ℓ` and `GMACs_ℓ` is counted once at the initial
//! scale factors. Live areas are products of straight-through sizes, so the
//! loss is differentiable w.r.t. every α upstream of a layer.

use crate::error::{Error, Result};
use crate::network::LayerSpec;
use crate::tensor::{Graph, Var};

/// Multiply-accumulates (in units of 1e9) of one layer for a single sample.
/// Convolutions are counted at their output resolution; layers without
/// weights cost nothing.
pub fn count_layer_gmacs(layer: &LayerSpec, out_h: usize, out_w: usize) -> Result<f64> {
    match *layer {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => Ok((in_channels * out_channels * kernel * kernel * out_h * out_w) as f64 / 1e9),
        LayerSpec::Linear {
            in_features,
            out_features,
        } => Ok((in_features * out_features) as f64 / 1e9),
        LayerSpec::Relu | LayerSpec::DynoPool { .. } | LayerSpec::Flatten | LayerSpec::GlobalAvgPool => Ok(0.0),
        LayerSpec::Pool { .. } => Err(Error::invalid(
            "fixed-stride pooling has no GMACs count; replace resizers first",
        )),
    }
}

#[derive(Clone, Debug)]
pub struct LedgerEntry {
    pub layer: usize,
    /// GMACs of the layer at the initial scale factors.
    pub initial_gmacs: f64,
    /// Output area at the initial scale factors (≥ 4 for resized maps).
    pub initial_area: f64,
    /// Straight-through output area on the current graph.
    pub live_area: Var,
    /// Discrete output area of the current forward pass.
    pub area: usize,
}

/// Costs of the compute-carrying layers of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct GmacsLedger {
    pub entries: Vec<LedgerEntry>,
}

impl GmacsLedger {
    pub fn push(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    /// `A^t / A^0` of an entry, read from the live area's forward value.
    pub fn weight(&self, g: &Graph, index: usize) -> f64 {
        let e = &self.entries[index];
        g.item(e.live_area) / e.initial_area
    }

    pub fn initial_gmacs(&self) -> f64 {
        self.entries.iter().map(|e| e.initial_gmacs).sum()
    }

    /// Current model GMACs from the discrete areas.
    pub fn discrete_gmacs(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.area as f64 / e.initial_area * e.initial_gmacs)
            .sum()
    }
}

pub fn gmacs_loss(g: &mut Graph, ledger: &GmacsLedger) -> Result<Var> {
    let mut total: Option<Var> = None;
    for e in &ledger.entries {
        let term = g.scale(e.live_area, e.initial_gmacs / e.initial_area);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| g.scalar(0.0)))
}

/// `task + λ · gmacs`.
pub fn total_loss(g: &mut Graph, task: Var, gmacs: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let weighted = g.scale(gmacs, lambda);
    g.add(task, weighted)
}
