//! Protective reconstruction: back up weights before a pruning step, run one
//! probe step, flag pruned filters whose norm jumped above the layer mean
//! and restore them.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_filter, Network};
use crate::optim::{sgd_step, SgdState, StepReport};
use crate::pruning::MaskSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What happens to a flagged (abnormal) pruned filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    /// Restore the pre-pruning weights from the backup.
    #[default]
    Reload,
    /// Keep the values grown during the probe step.
    Reactivate,
    /// Draw fresh weights from the layer initializer.
    #[serde(alias = "reinit")]
    Reinitialize,
    /// Ignore the report (plain iterative prune/train).
    None,
}

impl FromStr for ReconMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reload" => Ok(Self::Reload),
            "reactivate" => Ok(Self::Reactivate),
            "reinit" | "reinitialize" => Ok(Self::Reinitialize),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown reconstruction mode `{other}` (expected reload, reactivate, reinit, none)"
            ))),
        }
    }
}

impl fmt::Display for ReconMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reload => "reload",
            Self::Reactivate => "reactivate",
            Self::Reinitialize => "reinit",
            Self::None => "none",
        })
    }
}

/// Quantity whose per-filter L2 norm is compared against the layer mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectVariant {
    /// Post-probe weights (pruned filters regrow with their gradient).
    #[default]
    WeightNorm,
    /// Probe-step gradients.
    GradNorm,
}

impl FromStr for DetectVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight-norm" => Ok(Self::WeightNorm),
            "grad-norm" => Ok(Self::GradNorm),
            other => Err(Error::Config(format!("unknown detect variant `{other}` (expected weight-norm, grad-norm)"))),
        }
    }
}

/// Filters averaged into the abnormality threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPool {
    #[default]
    All,
    Pruned,
}

impl FromStr for ThresholdPool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "pruned" => Ok(Self::Pruned),
            other => Err(Error::Config(format!("unknown threshold pool `{other}` (expected all, pruned)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct UnitBackup<S> {
    unit: usize,
    weights: Tensor<S>,
    gamma: Vec<S>,
    beta: Vec<S>,
    running_mean: Vec<S>,
}

/// Deep copy of every maskable unit's parameters, taken before a pruning
/// step and consumed by exactly one [`reconstruct`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBackup<S> {
    pub epoch: usize,
    pub step: u64,
    layers: Vec<UnitBackup<S>>,
    consumed: bool,
}

pub fn backup_weights<S: Scalar>(net: &Network<S>, epoch: usize, step: u64) -> WeightBackup<S> {
    let layers = net
        .maskable_units()
        .into_iter()
        .map(|u| {
            let unit = net.unit(u);
            UnitBackup {
                unit: u,
                weights: unit.conv.weights.clone(),
                gamma: unit.bn.gamma.data().to_vec(),
                beta: unit.bn.beta.data().to_vec(),
                running_mean: unit.bn.running_mean.clone(),
            }
        })
        .collect();
    WeightBackup { epoch, step, layers, consumed: false }
}

impl<S: Scalar> WeightBackup<S> {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn weights(&self, unit: usize) -> Option<&Tensor<S>> {
        self.layers.iter().find(|l| l.unit == unit).map(|l| &l.weights)
    }

    /// Write every backed-up value back into `net`.
    pub fn restore_all(&self, net: &mut Network<S>) -> Result<()> {
        for l in &self.layers {
            let filters = l.gamma.len();
            self.restore_filters(net, l.unit, &(0..filters).collect::<Vec<_>>())?;
        }
        Ok(())
    }

    fn restore_filters(&self, net: &mut Network<S>, unit: usize, filters: &[usize]) -> Result<()> {
        let l = self
            .layers
            .iter()
            .find(|l| l.unit == unit)
            .ok_or_else(|| Error::Contract(format!("backup has no entry for unit {unit}")))?;
        let live = net.unit_mut(unit);
        if live.conv.weights.shape() != l.weights.shape() {
            return Err(Error::Contract(format!("backup shape mismatch for `{}`", live.name)));
        }
        let len = live.conv.filter_len();
        for &f in filters {
            live.conv.weights.data_mut()[f * len..(f + 1) * len]
                .copy_from_slice(&l.weights.data()[f * len..(f + 1) * len]);
            live.bn.gamma.data_mut()[f] = l.gamma[f];
            live.bn.beta.data_mut()[f] = l.beta[f];
            live.bn.running_mean[f] = l.running_mean[f];
        }
        Ok(())
    }
}

/// One ordinary training step on a single mini-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOutcome {
    pub loss: f64,
    pub correct: usize,
    pub step: StepReport,
}

pub fn probe_step<S: Scalar>(
    net: &mut Network<S>,
    sgd: &mut SgdState<S>,
    x: &Tensor<S>,
    labels: &[usize],
) -> Result<ProbeOutcome> {
    let ce = net.loss_and_grad(x, labels)?;
    let mut params = net.params_mut();
    let step = sgd_step(&mut params, sgd)?;
    Ok(ProbeOutcome { loss: ce.loss.as_f64(), correct: ce.correct, step })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAbnormal {
    pub unit: usize,
    pub layer_id: String,
    pub abnormal: Vec<usize>,
    /// Per-filter norm measured after the probe step.
    pub norms: Vec<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbnormalReport {
    pub step: u64,
    pub layers: Vec<LayerAbnormal>,
}

impl AbnormalReport {
    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.abnormal.len()).sum()
    }

    pub fn count_for(&self, unit: usize) -> usize {
        self.layers.iter().find(|l| l.unit == unit).map_or(0, |l| l.abnormal.len())
    }
}

fn filter_norms(data: &[f64], len: usize) -> Vec<f64> {
    data.chunks(len).map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// Flag pruned filters whose norm exceeds the mean norm of the layer.
pub fn detect_abnormal<S: Scalar>(
    net: &Network<S>,
    masks: &MaskSet,
    variant: DetectVariant,
    pool: ThresholdPool,
) -> AbnormalReport {
    let mut layers = Vec::new();
    for m in &masks.masks {
        if m.pruned_count() == 0 {
            continue;
        }
        let conv = &net.unit(m.unit).conv;
        let source: Vec<f64> = match variant {
            DetectVariant::WeightNorm => conv.weights.data().iter().map(|v| v.as_f64()).collect(),
            DetectVariant::GradNorm => match conv.weights.grad() {
                Some(g) => g.iter().map(|v| v.as_f64()).collect(),
                None => vec![0.0; conv.weights.numel()],
            },
        };
        let norms = filter_norms(&source, conv.filter_len());
        let pooled: Vec<f64> = match pool {
            ThresholdPool::All => norms.clone(),
            ThresholdPool::Pruned => m.pruned_indices().iter().map(|&i| norms[i]).collect(),
        };
        let threshold = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let abnormal = m.pruned_indices().into_iter().filter(|&i| norms[i] > threshold).collect();
        layers.push(LayerAbnormal { unit: m.unit, layer_id: m.layer_id.clone(), abnormal, norms, threshold });
    }
    AbnormalReport { step: masks.step, layers }
}

/// Act on an abnormal report. Flagged filters re-enter the kept set of
/// `masks` (except in [`ReconMode::None`]). Velocity of reloaded or
/// re-drawn filters is cleared so the probe step's pulse does not carry over.
pub fn reconstruct<S: Scalar>(
    net: &mut Network<S>,
    masks: &mut MaskSet,
    backup: &mut WeightBackup<S>,
    report: &AbnormalReport,
    mode: ReconMode,
    mut sgd: Option<&mut SgdState<S>>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if backup.consumed {
        return Err(Error::Contract(format!("backup of step {} was already consumed", backup.step)));
    }
    if backup.step != masks.step || report.step != masks.step {
        return Err(Error::Contract(format!(
            "stale reconstruction inputs: backup step {}, report step {}, masks step {}",
            backup.step, report.step, masks.step
        )));
    }
    backup.consumed = true;
    if mode == ReconMode::None {
        return Ok(());
    }
    for layer in &report.layers {
        if layer.abnormal.is_empty() {
            continue;
        }
        let mask = masks
            .get_mut(layer.unit)
            .ok_or_else(|| Error::Contract(format!("report names unit {} absent from masks", layer.unit)))?;
        if let Some(&bad) = layer.abnormal.iter().find(|&&i| mask.kept[i]) {
            return Err(Error::Contract(format!("filter {bad} of `{}` was not pruned", layer.layer_id)));
        }
        match mode {
            ReconMode::Reload => backup.restore_filters(net, layer.unit, &layer.abnormal)?,
            ReconMode::Reactivate => {}
            ReconMode::Reinitialize => {
                let unit = net.unit_mut(layer.unit);
                let len = unit.conv.filter_len();
                for &f in &layer.abnormal {
                    let fresh: Vec<S> = sample_filter(rng, len);
                    unit.conv.weights.data_mut()[f * len..(f + 1) * len].copy_from_slice(&fresh);
                    unit.bn.gamma.data_mut()[f] = S::one();
                    unit.bn.beta.data_mut()[f] = S::zero();
                }
            }
            ReconMode::None => unreachable!(),
        }
        if mode != ReconMode::Reactivate {
            if let Some(state) = sgd.as_deref_mut() {
                let base = Network::<S>::param_index(layer.unit);
                let len = net.unit(layer.unit).conv.filter_len();
                if let Some(vw) = state.velocity_mut(base) {
                    for &f in &layer.abnormal {
                        vw[f * len..(f + 1) * len].iter_mut().for_each(|v| *v = S::zero());
                    }
                }
                for off in [1, 2] {
                    if let Some(v) = state.velocity_mut(base + off) {
                        for &f in &layer.abnormal {
                            v[f] = S::zero();
                        }
                    }
                }
            }
        }
        for &f in &layer.abnormal {
            mask.kept[f] = true;
        }
    }
    Ok(())
}
