use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use psap::data::{synthetic_dataset, SyntheticSpec};
use psap::model::{build_model, Architecture, ConvSpec, ModelSpec};
use psap::nn::softmax_cross_entropy;
use psap::optim::{SgdConfig, SgdState};
use psap::pruning::{apply_masks, filter_l2_norms, FilterMask, MaskSet};
use psap::reconstruction::{
    backup_weights, detect_abnormal, probe_step, reconstruct, AbnormalReport, DetectVariant, ReconMode,
    ThresholdPool,
};
use psap::{Network64, Tensor64};

/// conv (2 filters, no ReLU) -> BN -> global pool -> linear. Filter 0 feeds
/// the head; the head ignores filter 1.
fn two_filter_toy(seed: u64) -> (Network64, Tensor64, Vec<usize>) {
    let spec = SyntheticSpec { classes: 2, train_size: 32, test_size: 2, shape: [1, 5, 5], ..Default::default() };
    let (train, _) = synthetic_dataset::<f64>(&spec, seed).unwrap();
    let mut net: Network64 = build_model(&ModelSpec {
        architecture: Architecture::CnnSmall {
            layers: vec![ConvSpec { out_channels: 2, kernel: 3, stride: 1, relu: false }],
        },
        input_shape: [1, 5, 5],
        classes: 2,
        seed,
    })
    .unwrap();
    let head = net.head.weight.data_mut();
    head.copy_from_slice(&[1.5, 0.0, -1.5, 0.0]);
    let (x, labels) = train.batch(&(0..32).collect::<Vec<_>>(), None).unwrap();
    (net, x, labels)
}

fn sgd(lr: f64) -> SgdState<f64> {
    SgdState::new(SgdConfig { learning_rate: lr, momentum: 0.9, weight_decay: 5e-4, clip_max_norm: None })
}

fn prune(net: &mut Network64, filters: &[usize], state: &mut SgdState<f64>) -> MaskSet {
    let n = net.unit(0).conv.out_filters();
    let masks = MaskSet { step: 1, masks: vec![FilterMask::with_pruned(0, "conv1", n, filters)] };
    apply_masks(net, &masks, Some(state)).unwrap();
    masks
}

#[test]
fn backup_is_deep() {
    let (mut net, _, _) = two_filter_toy(1);
    let backup = backup_weights(&net, 0, 1);
    let saved = backup.weights(0).unwrap().data().to_vec();
    net.unit_mut(0).conv.weights.data_mut().fill(7.0);
    assert_eq!(backup.weights(0).unwrap().data(), saved.as_slice());
    backup.restore_all(&mut net).unwrap();
    assert_eq!(net.unit(0).conv.weights.data(), saved.as_slice());
}

#[test]
fn backup_of_zero_layer_is_zero() {
    let (mut net, _, _) = two_filter_toy(1);
    net.unit_mut(0).conv.weights.data_mut().fill(0.0);
    let backup = backup_weights(&net, 0, 1);
    assert!(backup.weights(0).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn restore_without_mutation_is_identity() {
    let (mut net, _, _) = two_filter_toy(3);
    let before = net.state_vectors();
    backup_weights(&net, 0, 1).restore_all(&mut net).unwrap();
    assert_eq!(net.state_vectors(), before);
}

#[test]
fn zero_lr_probe_leaves_pruned_filters_at_zero() {
    let (mut net, x, labels) = two_filter_toy(2);
    let mut state = sgd(0.0);
    let masks = prune(&mut net, &[0, 1], &mut state);
    let before = net.state_vectors();
    probe_step(&mut net, &mut state, &x, &labels).unwrap();
    assert_eq!(net.unit(0).conv.weights.data(), &before[0][..]);
    assert!(filter_l2_norms(&net.unit(0).conv).iter().all(|&n| n == 0.0));
    assert_eq!(detect_abnormal(&net, &masks, DetectVariant::WeightNorm, ThresholdPool::All).total(), 0);
}

#[test]
fn pulse_reaches_signal_filter_but_not_dead_one() {
    for seed in 0..5 {
        let (mut net, x, labels) = two_filter_toy(seed);
        let mut state = sgd(0.05);
        let masks = prune(&mut net, &[0, 1], &mut state);
        probe_step(&mut net, &mut state, &x, &labels).unwrap();
        let norms = filter_l2_norms(&net.unit(0).conv);
        assert!(norms[0] > 0.0, "seed {seed}: {norms:?}");
        assert!(norms[1] < 1e-3 * norms[0], "seed {seed}: {norms:?}");
        let rep = detect_abnormal(&net, &masks, DetectVariant::WeightNorm, ThresholdPool::Pruned);
        assert_eq!(rep.layers[0].abnormal, vec![0], "seed {seed}");
    }
}

#[test]
fn detect_only_flags_pruned_filters() {
    let (mut net, x, labels) = two_filter_toy(4);
    let mut state = sgd(0.5);
    let masks = prune(&mut net, &[1], &mut state);
    probe_step(&mut net, &mut state, &x, &labels).unwrap();
    for pool in [ThresholdPool::All, ThresholdPool::Pruned] {
        for variant in [DetectVariant::WeightNorm, DetectVariant::GradNorm] {
            let rep = detect_abnormal(&net, &masks, variant, pool);
            assert!(rep.layers.iter().all(|l| l.abnormal.iter().all(|&f| !masks.masks[0].kept[f])));
        }
    }
}

#[test]
fn empty_report_leaves_model_unchanged() {
    for mode in [ReconMode::Reload, ReconMode::Reactivate, ReconMode::Reinitialize, ReconMode::None] {
        let (mut net, _, _) = two_filter_toy(5);
        let mut state = sgd(0.1);
        let mut backup = backup_weights(&net, 0, 1);
        let mut masks = prune(&mut net, &[1], &mut state);
        let before = net.state_vectors();
        let kept = masks.clone();
        let report = AbnormalReport { step: 1, layers: Vec::new() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        reconstruct(&mut net, &mut masks, &mut backup, &report, mode, Some(&mut state), &mut rng).unwrap();
        assert_eq!(net.state_vectors(), before, "{mode}");
        assert_eq!(masks, kept);
    }
}

/// Reconstruction of the signal filter after a probe; returns the norm
/// change across the reconstruction event and the loss afterwards.
fn reconstruct_signal_filter(seed: u64, mode: ReconMode, trained: bool) -> (f64, f64, bool) {
    let (mut net, x, labels) = two_filter_toy(seed);
    if trained {
        let mut dense = sgd(0.1);
        for _ in 0..40 {
            probe_step(&mut net, &mut dense, &x, &labels).unwrap();
        }
    }
    let mut state = sgd(0.05);
    let mut backup = backup_weights(&net, 0, 1);
    let mut masks = prune(&mut net, &[0, 1], &mut state);
    probe_step(&mut net, &mut state, &x, &labels).unwrap();
    let report = detect_abnormal(&net, &masks, DetectVariant::WeightNorm, ThresholdPool::All);
    let before = filter_l2_norms(&net.unit(0).conv)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    reconstruct(&mut net, &mut masks, &mut backup, &report, mode, Some(&mut state), &mut rng).unwrap();
    let after = filter_l2_norms(&net.unit(0).conv)[0];
    let logits = net.forward(&x, true).unwrap();
    let loss = softmax_cross_entropy(&logits, &labels).unwrap().loss;
    let flagged = report.layers[0].abnormal.contains(&0);
    (after - before, loss, flagged)
}

#[test]
fn norm_change_is_zero_for_reactivate_positive_for_reinit() {
    // The norm observed after the probe is the regrown one; reload jumps back
    // to the backup, reinit re-draws, reactivate keeps the regrown value.
    for seed in 0..3 {
        let (react, _, flagged) = reconstruct_signal_filter(seed, ReconMode::Reactivate, false);
        assert!(flagged);
        assert_eq!(react, 0.0);
        let (reinit, _, _) = reconstruct_signal_filter(seed, ReconMode::Reinitialize, false);
        assert!(reinit.abs() > 0.0);
    }
}

#[test]
fn reload_norm_equals_pre_prune_norm() {
    let (net0, _, _) = two_filter_toy(8);
    let original = filter_l2_norms(&net0.unit(0).conv)[0];
    let (mut net, x, labels) = two_filter_toy(8);
    let mut state = sgd(0.05);
    let mut backup = backup_weights(&net, 0, 1);
    let mut masks = prune(&mut net, &[0, 1], &mut state);
    probe_step(&mut net, &mut state, &x, &labels).unwrap();
    let report = detect_abnormal(&net, &masks, DetectVariant::WeightNorm, ThresholdPool::All);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    reconstruct(&mut net, &mut masks, &mut backup, &report, ReconMode::Reload, Some(&mut state), &mut rng).unwrap();
    assert_eq!(filter_l2_norms(&net.unit(0).conv)[0].to_bits(), original.to_bits());
    assert!(masks.masks[0].kept[0] && !masks.masks[0].kept[1]);
}

#[test]
fn reload_loss_not_above_none_loss() {
    let mut wins = 0;
    for seed in 0..10 {
        let (_, reload, _) = reconstruct_signal_filter(seed, ReconMode::Reload, true);
        let (_, none, _) = reconstruct_signal_filter(seed, ReconMode::None, true);
        wins += usize::from(reload <= none);
    }
    assert!(wins >= 9, "reload loss <= none loss on {wins}/10 seeds");
}

#[test]
fn stale_or_reused_backup_is_rejected() {
    let (mut net, _, _) = two_filter_toy(6);
    let mut state = sgd(0.1);
    let mut backup = backup_weights(&net, 0, 1);
    let mut masks = prune(&mut net, &[1], &mut state);
    let report = detect_abnormal(&net, &masks, DetectVariant::WeightNorm, ThresholdPool::All);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    reconstruct(&mut net, &mut masks, &mut backup, &report, ReconMode::Reload, None, &mut rng).unwrap();
    let again = reconstruct(&mut net, &mut masks, &mut backup, &report, ReconMode::Reload, None, &mut rng);
    assert!(matches!(again, Err(psap::Error::Contract(_))));

    let mut old = backup_weights(&net, 0, 0);
    let stale = reconstruct(&mut net, &mut masks, &mut old, &report, ReconMode::Reload, None, &mut rng);
    assert!(matches!(stale, Err(psap::Error::Contract(_))));
}

#[test]
fn reload_is_selective() {
    let (mut net, x, labels) = two_filter_toy(7);
    net.unit_mut(0).conv.weights.data_mut().iter_mut().for_each(|w| *w += 0.1);
    let mut state = sgd(0.05);
    let mut backup = backup_weights(&net, 0, 1);
    let snapshot = net.clone();
    let mut masks = prune(&mut net, &[0, 1], &mut state);
    probe_step(&mut net, &mut state, &x, &labels).unwrap();
    let probed = net.clone();
    let mut report = detect_abnormal(&net, &masks, DetectVariant::WeightNorm, ThresholdPool::All);
    report.layers[0].abnormal = vec![0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    reconstruct(&mut net, &mut masks, &mut backup, &report, ReconMode::Reload, None, &mut rng).unwrap();
    let len = net.unit(0).conv.filter_len();
    let w = net.unit(0).conv.weights.data();
    assert_eq!(&w[..len], &snapshot.unit(0).conv.weights.data()[..len]);
    assert_eq!(&w[len..], &probed.unit(0).conv.weights.data()[len..]);
    assert_eq!(net.unit(0).bn.gamma.data()[0].to_bits(), snapshot.unit(0).bn.gamma.data()[0].to_bits());
    assert_eq!(net.unit(0).bn.beta.data()[0].to_bits(), snapshot.unit(0).bn.beta.data()[0].to_bits());
}
