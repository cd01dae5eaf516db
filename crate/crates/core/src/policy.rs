//! The self-adaptive ratio schedule and compression accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Network;
use crate::pruning::{layer_sparsity, LayerSparsity, MaskSet};
use crate::reconstruction::{DetectVariant, ReconMode, ThresholdPool};
use crate::scalar::Scalar;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Target fraction of maskable conv parameters removed model-wide.
    pub tau: f64,
    /// Lower bound on per-layer density; ratios are clamped to `1 - s_min`.
    pub s_min: f64,
    /// Constant ratio increment.
    pub delta: f64,
    /// Ratio assigned to every layer in the first search epoch.
    pub k_init: f64,
    pub recon_mode: ReconMode,
    /// `false` fixes every layer at `uniform_ratio` (uniform baseline).
    #[serde(default = "default_true")]
    pub adaptive: bool,
    #[serde(default)]
    pub uniform_ratio: f64,
    #[serde(default)]
    pub detect: DetectVariant,
    #[serde(default)]
    pub threshold_pool: ThresholdPool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            s_min: 0.0,
            delta: 0.2,
            k_init: 0.1,
            recon_mode: ReconMode::Reload,
            adaptive: true,
            uniform_ratio: 0.5,
            detect: DetectVariant::WeightNorm,
            threshold_pool: ThresholdPool::All,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.s_min) {
            return bad(format!("s_min must be in [0, 1), got {}", self.s_min));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must be in (0, 1), got {}", self.delta));
        }
        if !(self.k_init > 0.0 && self.k_init < 1.0) {
            return bad(format!("k_init must be in (0, 1), got {}", self.k_init));
        }
        if !(0.0..=1.0).contains(&self.uniform_ratio) {
            return bad(format!("uniform_ratio must be in [0, 1], got {}", self.uniform_ratio));
        }
        Ok(())
    }

    pub fn max_ratio(&self) -> f64 {
        1.0 - self.s_min
    }
}

/// `k' = s + delta` when `s <= k`, otherwise `k' = s`; then clamped to
/// `[0, 1 - s_min]`.
pub fn update_ratio(s: f64, k: f64, delta: f64, s_min: f64) -> f64 {
    let next = if s <= k { s + delta } else { s };
    next.clamp(0.0, 1.0 - s_min)
}

/// Per-layer ratios for the next pruning step together with the WSR
/// measurements they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioPlan {
    pub ratios: Vec<f64>,
    pub sparsity: Vec<LayerSparsity>,
}

/// Ratios for search epoch `epoch` (1-based). `previous` holds the ratios
/// of the last step (ignored in epoch 1 and in uniform mode).
pub fn update_all_ratios<S: Scalar>(
    net: &Network<S>,
    cfg: &PruneConfig,
    epoch: usize,
    previous: &[f64],
) -> Result<RatioPlan> {
    if epoch == 0 {
        return Err(Error::Contract("search epochs are numbered from 1".into()));
    }
    let units = net.maskable_units();
    if epoch > 1 && cfg.adaptive && previous.len() != units.len() {
        return Err(Error::Contract(format!(
            "{} previous ratios for {} maskable layers",
            previous.len(),
            units.len()
        )));
    }
    let mut ratios = Vec::with_capacity(units.len());
    let mut sparsity = Vec::with_capacity(units.len());
    for (i, &u) in units.iter().enumerate() {
        let measured = layer_sparsity(net.unit(u), 0.0);
        let k = if !cfg.adaptive {
            cfg.uniform_ratio.clamp(0.0, cfg.max_ratio())
        } else if epoch == 1 {
            cfg.k_init.clamp(0.0, cfg.max_ratio())
        } else {
            update_ratio(measured.wsr, previous[i], cfg.delta, cfg.s_min)
        };
        ratios.push(k);
        sparsity.push(LayerSparsity { ratio_k: k, ..measured });
    }
    Ok(RatioPlan { ratios, sparsity })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub param_ratio_removed: f64,
    /// Dense multiply-accumulate count of all conv layers for one sample.
    pub flops_total: u64,
    pub flops_removed_fraction: f64,
    pub per_layer: Vec<LayerSparsity>,
}

/// Multiply-accumulates of one conv for one sample given live channel counts.
pub fn conv_macs(out_hw: (usize, usize), kernel: (usize, usize), in_channels: usize, out_filters: usize) -> u64 {
    (out_hw.0 * out_hw.1 * kernel.0 * kernel.1 * in_channels * out_filters) as u64
}

/// Number of filters of `unit` that are not entirely zero.
pub fn live_filters<S: Scalar>(net: &Network<S>, unit: usize) -> usize {
    let conv = &net.unit(unit).conv;
    let len = conv.filter_len();
    conv.weights.data().chunks(len).filter(|f| f.iter().any(|&w| w != S::zero())).count()
}

/// Parameter and FLOPs compression measured from the current weights.
///
/// A conv's FLOPs shrink with its all-zero output filters, and with the
/// all-zero filters of the unit that solely feeds it (its input channels
/// carry nothing). `ratios` annotates `per_layer` when given.
pub fn global_compression_ratio<S: Scalar>(net: &Network<S>, ratios: Option<&[f64]>) -> Result<CompressionReport> {
    let units = net.maskable_units();
    let per_layer = units
        .iter()
        .enumerate()
        .map(|(i, &u)| layer_sparsity(net.unit(u), ratios.and_then(|r| r.get(i).copied()).unwrap_or(0.0)))
        .collect();
    let live: Vec<usize> = (0..net.units().len()).map(|u| live_filters(net, u)).collect();
    assemble(net, per_layer, &live)
}

/// The compression `masks` would lock in if enforced, regardless of any
/// regrowth in the current weights.
pub fn mask_compression_ratio<S: Scalar>(net: &Network<S>, masks: &MaskSet, ratios: Option<&[f64]>) -> Result<CompressionReport> {
    let units = net.maskable_units();
    let mut live: Vec<usize> = net.units().iter().map(|u| u.conv.out_filters()).collect();
    let mut per_layer = Vec::with_capacity(units.len());
    for (i, &u) in units.iter().enumerate() {
        let conv = &net.unit(u).conv;
        let pruned = masks.get(u).map_or(0, |m| m.pruned_count());
        live[u] = conv.out_filters() - pruned;
        let total = conv.weights.numel();
        let nonzero = live[u] * conv.filter_len();
        per_layer.push(LayerSparsity {
            layer_id: net.unit(u).name.clone(),
            wsr: 1.0 - nonzero as f64 / total as f64,
            ratio_k: ratios.and_then(|r| r.get(i).copied()).unwrap_or(0.0),
            nonzero_count: nonzero,
            total_count: total,
        });
    }
    assemble(net, per_layer, &live)
}

fn assemble<S: Scalar>(net: &Network<S>, per_layer: Vec<LayerSparsity>, live: &[usize]) -> Result<CompressionReport> {
    if per_layer.is_empty() {
        return Err(Error::Contract("model has no maskable layers".into()));
    }
    let nonzero: usize = per_layer.iter().map(|l| l.nonzero_count).sum();
    let total: usize = per_layer.iter().map(|l| l.total_count).sum();
    let hw = net.unit_output_hw()?;
    let mut flops_total = 0u64;
    let mut flops_live = 0u64;
    for (u, unit) in net.units().iter().enumerate() {
        let conv = &unit.conv;
        flops_total += conv_macs(hw[u], conv.kernel(), conv.in_channels(), conv.out_filters());
        let live_in = unit.input_from.map_or(conv.in_channels(), |p| live[p]);
        flops_live += conv_macs(hw[u], conv.kernel(), live_in, live[u]);
    }
    Ok(CompressionReport {
        param_ratio_removed: 1.0 - nonzero as f64 / total as f64,
        flops_total,
        flops_removed_fraction: 1.0 - flops_live as f64 / flops_total as f64,
        per_layer,
    })
}
