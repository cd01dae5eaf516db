//! Filter-level masking: importance norms, selection, mask application and
//! weight sparsity measurement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConvUnit, Network};
use crate::nn::ConvParams;
use crate::optim::SgdState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which filters of one conv unit survive (`true`) or are pruned (`false`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterMask {
    pub layer_id: String,
    pub unit: usize,
    pub kept: Vec<bool>,
}

impl FilterMask {
    pub fn all_kept(unit: usize, layer_id: impl Into<String>, filters: usize) -> Self {
        Self { layer_id: layer_id.into(), unit, kept: vec![true; filters] }
    }

    pub fn with_pruned(unit: usize, layer_id: impl Into<String>, filters: usize, pruned: &[usize]) -> Self {
        let mut m = Self::all_kept(unit, layer_id, filters);
        for &i in pruned {
            m.kept[i] = false;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn pruned_indices(&self) -> Vec<usize> {
        self.kept.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect()
    }

    pub fn pruned_count(&self) -> usize {
        self.kept.iter().filter(|&&k| !k).count()
    }

    pub fn pruned_fraction(&self) -> f64 {
        self.pruned_count() as f64 / self.kept.len() as f64
    }

    pub fn is_pruned(&self, filter: usize) -> bool {
        !self.kept[filter]
    }
}

/// The masks produced by one pruning step. `step` ties backups and abnormal
/// reports to the step that created them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub step: u64,
    pub masks: Vec<FilterMask>,
}

impl MaskSet {
    pub fn get(&self, unit: usize) -> Option<&FilterMask> {
        self.masks.iter().find(|m| m.unit == unit)
    }

    pub fn get_mut(&mut self, unit: usize) -> Option<&mut FilterMask> {
        self.masks.iter_mut().find(|m| m.unit == unit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer_id: String,
    pub wsr: f64,
    pub ratio_k: f64,
    pub nonzero_count: usize,
    pub total_count: usize,
}

/// `sqrt(sum w^2)` over each filter, in filter order.
pub fn filter_l2_norms<S: Scalar>(params: &ConvParams<S>) -> Vec<S> {
    let len = params.filter_len();
    params
        .weights
        .data()
        .chunks(len)
        .map(|f| f.iter().map(|&w| w * w).sum::<S>().sqrt())
        .collect()
}

/// Number of whole filters a ratio `k` removes out of `filters`.
///
/// A 1e-9 slack absorbs representation error in products such as
/// `0.57 * 100`.
pub fn filters_to_prune(k: f64, filters: usize) -> usize {
    let k = k.clamp(0.0, 1.0);
    ((k * filters as f64 + 1e-9).floor() as usize).min(filters)
}

/// The `floor(k * n)` indices with the smallest norms (ties to the lower
/// index), sorted ascending.
pub fn select_prune_indices<S: Scalar>(norms: &[S], k: f64) -> Vec<usize> {
    let count = filters_to_prune(k, norms.len());
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| {
        norms[a].partial_cmp(&norms[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Zero the weights and BN shift of every pruned filter.
///
/// The BN running mean of a pruned channel is reset as well, so the channel
/// outputs exactly zero in both training and inference mode. BN `gamma` is
/// left in place: with the filter output identically zero the forward pass
/// ignores it, and it carries the `gamma / sqrt(eps)` backward path through
/// which a wrongly pruned filter receives its pulse gradient.
pub fn apply_mask<S: Scalar>(
    unit: &mut ConvUnit<S>,
    mask: &FilterMask,
    velocity: Option<(&mut [S], &mut [S])>,
) -> Result<()> {
    let filters = unit.conv.out_filters();
    if mask.len() != filters {
        return Err(Error::Contract(format!(
            "mask for `{}` has {} entries, layer has {filters} filters",
            unit.name,
            mask.len()
        )));
    }
    let len = unit.conv.filter_len();
    let pruned = mask.pruned_indices();
    let w = unit.conv.weights.data_mut();
    for &f in &pruned {
        w[f * len..(f + 1) * len].iter_mut().for_each(|v| *v = S::zero());
    }
    let beta = unit.bn.beta.data_mut();
    for &f in &pruned {
        beta[f] = S::zero();
        unit.bn.running_mean[f] = S::zero();
    }
    if let Some((vw, vb)) = velocity {
        for &f in &pruned {
            vw[f * len..(f + 1) * len].iter_mut().for_each(|v| *v = S::zero());
            vb[f] = S::zero();
        }
    }
    Ok(())
}

/// Apply every mask of `masks` to `net`, clearing optimizer velocity of the
/// pruned entries when a state is given.
pub fn apply_masks<S: Scalar>(net: &mut Network<S>, masks: &MaskSet, mut sgd: Option<&mut SgdState<S>>) -> Result<()> {
    for m in &masks.masks {
        if m.unit >= net.units().len() {
            return Err(Error::Contract(format!("mask refers to unknown unit {}", m.unit)));
        }
        let velocity = match sgd.as_deref_mut() {
            Some(state) if !state.velocity().is_empty() => {
                let base = Network::<S>::param_index(m.unit);
                state.velocity_pair_mut(base, base + 2)
            }
            _ => None,
        };
        apply_mask(net.unit_mut(m.unit), m, velocity)?;
    }
    Ok(())
}

/// Fraction of exactly-zero entries.
pub fn weight_sparsity_ratio<S: Scalar>(weights: &Tensor<S>) -> f64 {
    let nonzero = weights.data().iter().filter(|&&w| w != S::zero()).count();
    1.0 - nonzero as f64 / weights.numel() as f64
}

pub fn layer_sparsity<S: Scalar>(unit: &ConvUnit<S>, ratio_k: f64) -> LayerSparsity {
    let w = unit.conv.weights.data();
    let nonzero = w.iter().filter(|&&v| v != S::zero()).count();
    LayerSparsity {
        layer_id: unit.name.clone(),
        wsr: 1.0 - nonzero as f64 / w.len() as f64,
        ratio_k,
        nonzero_count: nonzero,
        total_count: w.len(),
    }
}

/// Select per-unit masks by L2 norm. `ratios` is indexed like
/// [`Network::maskable_units`].
pub fn select_masks<S: Scalar>(net: &Network<S>, ratios: &[f64], step: u64) -> Result<MaskSet> {
    let units = net.maskable_units();
    if units.len() != ratios.len() {
        return Err(Error::Contract(format!(
            "{} ratios for {} maskable layers",
            ratios.len(),
            units.len()
        )));
    }
    let masks = units
        .iter()
        .zip(ratios)
        .map(|(&u, &k)| {
            let unit = net.unit(u);
            let norms = filter_l2_norms(&unit.conv);
            let pruned = select_prune_indices(&norms, k);
            FilterMask::with_pruned(u, unit.name.clone(), norms.len(), &pruned)
        })
        .collect();
    Ok(MaskSet { step, masks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Architecture, ConvSpec, ModelSpec};

    fn small_net() -> Network<f64> {
        build_model(&ModelSpec {
            architecture: Architecture::CnnSmall { layers: vec![ConvSpec::new(4), ConvSpec::new(4)] },
            input_shape: [2, 5, 5],
            classes: 3,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn norms_of_three_four_five() {
        let mut w = vec![0.0f64; 2 * 4];
        w[0] = 3.0;
        w[1] = 4.0;
        let p = ConvParams::new(Tensor::new(vec![2, 1, 2, 2], w).unwrap(), 1, 0).unwrap();
        assert_eq!(filter_l2_norms(&p), vec![5.0, 0.0]);
        let z = ConvParams::new(Tensor::<f64>::zeros(&[3, 2, 1, 1]), 1, 0).unwrap();
        assert_eq!(filter_l2_norms(&z), vec![0.0; 3]);
    }

    #[test]
    fn selection_tie_rule() {
        assert!(select_prune_indices(&[1.0f64, 2.0], 0.0).is_empty());
        assert_eq!(select_prune_indices(&[5.0f64, 0.0, 3.0, 3.0], 0.5), vec![1, 2]);
        assert_eq!(select_prune_indices(&[1.0f64; 3], 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn floor_quantization() {
        assert_eq!(filters_to_prune(0.1, 8), 0);
        assert_eq!(filters_to_prune(0.57, 100), 57);
        assert_eq!(filters_to_prune(0.3, 10), 3);
        assert_eq!(filters_to_prune(1.0, 7), 7);
    }

    #[test]
    fn all_true_mask_is_identity() {
        let mut net = small_net();
        let before = net.state_vectors();
        let m = FilterMask::all_kept(0, "conv0", 4);
        apply_mask(net.unit_mut(0), &m, None).unwrap();
        assert_eq!(net.state_vectors(), before);
    }

    #[test]
    fn all_false_mask_removes_layer() {
        let mut net = small_net();
        let m = FilterMask::with_pruned(0, "conv0", 4, &[0, 1, 2, 3]);
        apply_mask(net.unit_mut(0), &m, None).unwrap();
        assert_eq!(weight_sparsity_ratio(&net.unit(0).conv.weights), 1.0);
        let x = Tensor::from_fn(&[2, 2, 5, 5], |i| (i as f64).cos());
        for training in [true, false] {
            let (y, _) = crate::nn::conv2d_forward_cached(&x, &net.unit(0).conv).unwrap();
            let (z, _) = crate::nn::batchnorm_forward(&y, &mut net.unit_mut(0).bn, training).unwrap();
            assert!(z.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn masking_two_of_four_filters() {
        let mut net = small_net();
        let before = filter_l2_norms(&net.unit(0).conv);
        let m = FilterMask::with_pruned(0, "conv0", 4, &[1, 2]);
        apply_mask(net.unit_mut(0), &m, None).unwrap();
        let after = filter_l2_norms(&net.unit(0).conv);
        assert_eq!(after[1], 0.0);
        assert_eq!(after[2], 0.0);
        assert_eq!(after[0].to_bits(), before[0].to_bits());
        assert_eq!(after[3].to_bits(), before[3].to_bits());
        assert_eq!(weight_sparsity_ratio(&net.unit(0).conv.weights), 0.5);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let mut net = small_net();
        let m = FilterMask::all_kept(0, "conv0", 3);
        assert!(matches!(apply_mask(net.unit_mut(0), &m, None), Err(Error::Contract(_))));
    }

    #[test]
    fn fresh_layer_is_dense() {
        let net = small_net();
        assert_eq!(weight_sparsity_ratio(&net.unit(1).conv.weights), 0.0);
    }

    #[test]
    fn velocity_of_pruned_entries_is_cleared() {
        let mut net = small_net();
        let mut sgd = SgdState::new(crate::optim::SgdConfig::default());
        sgd.set_velocity(net.params().iter().map(|t| vec![1.0; t.numel()]).collect());
        let masks = MaskSet { step: 1, masks: vec![FilterMask::with_pruned(1, "conv1", 4, &[3])] };
        apply_masks(&mut net, &masks, Some(&mut sgd)).unwrap();
        let base = Network::<f64>::param_index(1);
        let len = net.unit(1).conv.filter_len();
        let vw = &sgd.velocity()[base];
        assert!(vw[3 * len..].iter().all(|&v| v == 0.0));
        assert!(vw[..3 * len].iter().all(|&v| v == 1.0));
        assert_eq!(sgd.velocity()[base + 2], vec![1.0, 1.0, 1.0, 0.0]);
        // gamma velocity untouched
        assert!(sgd.velocity()[base + 1].iter().all(|&v| v == 1.0));
    }
}
