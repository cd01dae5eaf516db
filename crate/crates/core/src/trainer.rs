//! The two-stage loop: adaptive search with soft masks, then fine-tuning
//! under hard masks.
//!
//! All state needed to continue a run lives in [`RunState`]; every random
//! draw is keyed by the seed and an epoch or step counter, so a run can be
//! resumed from any epoch boundary and continue bit for bit.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, steps_per_epoch, Augment, Dataset};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::optim::{SgdConfig, SgdState, DEFAULT_CLIP_MAX_NORM};
use crate::policy::{global_compression_ratio, mask_compression_ratio, update_all_ratios, PruneConfig};
use crate::pruning::{apply_masks, layer_sparsity, select_masks, MaskSet};
use crate::reconstruction::{backup_weights, detect_abnormal, probe_step, reconstruct, AbnormalReport, ReconMode};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learning-rate decay over the whole run (pretrain + search + fine-tune).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrDecay {
    /// Multiply by `factor` once each fraction in `at` of the run has elapsed.
    Milestones { at: Vec<f64>, factor: f64 },
    /// Linear from the initial rate to zero.
    Linear,
    Constant,
}

impl Default for LrDecay {
    fn default() -> Self {
        Self::Milestones { at: vec![0.5, 0.75], factor: 0.2 }
    }
}

impl LrDecay {
    /// Rate for the epoch at 0-based `position` of `total`.
    pub fn rate(&self, initial: f64, position: usize, total: usize) -> f64 {
        let frac = if total == 0 { 0.0 } else { position as f64 / total as f64 };
        match self {
            Self::Milestones { at, factor } => {
                initial * factor.powi(at.iter().filter(|&&m| frac >= m).count() as i32)
            }
            Self::Linear => initial * (1.0 - frac).max(0.0),
            Self::Constant => initial,
        }
    }
}

fn default_clip() -> Option<f64> {
    Some(DEFAULT_CLIP_MAX_NORM)
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    #[serde(default)]
    pub pretrain_epochs: usize,
    pub max_search_epochs: usize,
    pub max_finetune_epochs: usize,
    pub lr_initial: f64,
    #[serde(default)]
    pub lr_decay: LrDecay,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub clip_max_norm: Option<f64>,
    /// Training-set augmentation; `None` trains on the raw images.
    #[serde(default)]
    pub augment: Option<Augment>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain_epochs: 0,
            max_search_epochs: 30,
            max_finetune_epochs: 100,
            lr_initial: 0.05,
            lr_decay: LrDecay::default(),
            batch_size: 128,
            seed: 0,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            clip_max_norm: default_clip(),
            augment: Some(Augment::default()),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let LrDecay::Milestones { at, factor } = &self.lr_decay {
            if !(*factor > 0.0 && *factor <= 1.0) {
                return Err(Error::Config(format!("lr decay factor must be in (0, 1], got {factor}")));
            }
            if at.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return Err(Error::Config("lr milestones must be fractions in [0, 1]".into()));
            }
        }
        self.sgd_config(self.lr_initial).validate()
    }

    pub fn sgd_config(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            clip_max_norm: self.clip_max_norm,
        }
    }

    pub fn planned_epochs(&self) -> usize {
        self.pretrain_epochs + self.max_search_epochs + self.max_finetune_epochs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainConfig {
    pub prune: PruneConfig,
    pub schedule: TrainSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.prune.validate()?;
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Search,
    Finetune,
    Done,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Search => "search",
            Self::Finetune => "finetune",
            Self::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer_id: String,
    /// WSR measured at the start of the epoch, before any pruning in it.
    pub wsr: f64,
    pub k: f64,
    pub abnormal_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    /// 0-based index over the whole run.
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub param_ratio_removed: f64,
    pub flops_removed_fraction: f64,
    pub abnormal_total: usize,
    /// Largest pre-clip gradient entry seen in any step of the epoch.
    pub max_grad: f64,
    /// Largest pre-clip gradient entry of the probe step (search only).
    pub probe_max_grad: f64,
    pub layers: Vec<LayerRow>,
    pub wall_time_s: f64,
}

pub const LOG_SCHEMA_VERSION: u32 = 1;

const FIXED_COLUMNS: [&str; 14] = [
    "epoch",
    "phase",
    "lr",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "param_ratio_removed",
    "flops_removed_fraction",
    "abnormal_total",
    "max_grad",
    "probe_max_grad",
    "wall_time_s",
    "schema_version",
];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub rows: Vec<EpochRow>,
}

impl ExperimentLog {
    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::Contract(format!("log row for epoch {} after epoch {}", row.epoch, last.epoch)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows_in(&self, phase: Phase) -> impl Iterator<Item = &EpochRow> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    /// The log with wall-clock times zeroed; the rest is a pure function of
    /// (config, seed).
    pub fn without_timing(&self) -> Self {
        let mut c = self.clone();
        c.rows.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        c
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        if let Some(r) = self.rows.first() {
            for l in &r.layers {
                h.push(format!("{}.wsr", l.layer_id));
                h.push(format!("{}.k", l.layer_id));
                h.push(format!("{}.abnormal", l.layer_id));
            }
        }
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.epoch.to_string(),
                r.phase.as_str().to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                r.test_loss.to_string(),
                r.test_acc.to_string(),
                r.param_ratio_removed.to_string(),
                r.flops_removed_fraction.to_string(),
                r.abnormal_total.to_string(),
                r.max_grad.to_string(),
                r.probe_max_grad.to_string(),
                r.wall_time_s.to_string(),
                LOG_SCHEMA_VERSION.to_string(),
            ];
            for l in &r.layers {
                rec.push(l.wsr.to_string());
                rec.push(l.k.to_string());
                rec.push(l.abnormal_count.to_string());
            }
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Parse a log written by [`ExperimentLog::write_csv`], validating the
    /// column set and schema version.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let bad = |m: String| Error::Format { file: "<log csv>".into(), offset: 0, msg: m };
        let mut rd = csv::Reader::from_reader(input);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header.len() < FIXED_COLUMNS.len() || header[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
            return Err(bad(format!("unexpected fixed columns {:?}", &header[..header.len().min(FIXED_COLUMNS.len())])));
        }
        let extra = &header[FIXED_COLUMNS.len()..];
        if extra.len() % 3 != 0 {
            return Err(bad("per-layer columns must come in wsr/k/abnormal triples".into()));
        }
        let mut layer_ids = Vec::new();
        for t in extra.chunks(3) {
            let id = t[0].strip_suffix(".wsr").ok_or_else(|| bad(format!("bad column {}", t[0])))?;
            if t[1] != format!("{id}.k") || t[2] != format!("{id}.abnormal") {
                return Err(bad(format!("bad layer columns {t:?}")));
            }
            layer_ids.push(id.to_string());
        }
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Format { file: "<log csv>".into(), offset: 0, msg: format!("bad {what} `{s}`") })
        }
        let mut log = ExperimentLog::default();
        for rec in rd.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            if num::<u32>(f(13), "schema_version")? != LOG_SCHEMA_VERSION {
                return Err(bad(format!("unsupported schema version {}", f(13))));
            }
            let phase = match f(1) {
                "pretrain" => Phase::Pretrain,
                "search" => Phase::Search,
                "finetune" => Phase::Finetune,
                other => return Err(bad(format!("unknown phase `{other}`"))),
            };
            let mut layers = Vec::new();
            for (j, id) in layer_ids.iter().enumerate() {
                let b = FIXED_COLUMNS.len() + 3 * j;
                layers.push(LayerRow {
                    layer_id: id.clone(),
                    wsr: num(f(b), "wsr")?,
                    k: num(f(b + 1), "k")?,
                    abnormal_count: num(f(b + 2), "abnormal")?,
                });
            }
            log.push(EpochRow {
                epoch: num(f(0), "epoch")?,
                phase,
                lr: num(f(2), "lr")?,
                train_loss: num(f(3), "train_loss")?,
                train_acc: num(f(4), "train_acc")?,
                test_loss: num(f(5), "test_loss")?,
                test_acc: num(f(6), "test_acc")?,
                param_ratio_removed: num(f(7), "param_ratio_removed")?,
                flops_removed_fraction: num(f(8), "flops_removed_fraction")?,
                abnormal_total: num(f(9), "abnormal_total")?,
                max_grad: num(f(10), "max_grad")?,
                probe_max_grad: num(f(11), "probe_max_grad")?,
                wall_time_s: num(f(12), "wall_time_s")?,
                layers,
            })?;
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    /// The epoch budget ran out before the target; fine-tuning proceeds with
    /// whatever sparsity was reached.
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub reason: StopReason,
    pub epochs: usize,
    pub param_ratio_removed: f64,
    pub flops_removed_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// Inference-mode pass over `data` in order.
pub fn evaluate<S: Scalar>(net: &mut Network<S>, data: &Dataset<S>, batch_size: usize) -> Result<EvalResult> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk, None)?;
        let logits = net.forward(&x, false)?;
        let ce = crate::nn::softmax_cross_entropy(&logits, &labels)?;
        loss += ce.loss.as_f64() * chunk.len() as f64;
        correct += ce.correct;
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult { loss: loss / n, accuracy: correct as f64 / n })
}

/// Everything needed to continue a run from an epoch boundary.
#[derive(Debug, Clone)]
pub struct RunState<S> {
    pub net: Network<S>,
    pub sgd: SgdState<S>,
    pub phase: Phase,
    /// Epochs completed in the current phase.
    pub phase_epoch: usize,
    /// Epochs completed over the whole run.
    pub epoch_cursor: usize,
    pub prune_step: u64,
    /// Ratios of the most recent pruning step (maskable-unit order).
    pub ratios: Vec<f64>,
    /// Masks of the most recent pruning step, after reconstruction.
    pub masks: Option<MaskSet>,
    pub search: Option<SearchOutcome>,
    pub log: ExperimentLog,
}

impl<S: Scalar> RunState<S> {
    pub fn new(net: Network<S>, schedule: &TrainSchedule) -> Self {
        let n = net.maskable_units().len();
        let mut state = Self {
            net,
            sgd: SgdState::new(schedule.sgd_config(schedule.lr_initial)),
            phase: Phase::Pretrain,
            phase_epoch: 0,
            epoch_cursor: 0,
            prune_step: 0,
            ratios: vec![0.0; n],
            masks: None,
            search: None,
            log: ExperimentLog::default(),
        };
        state.settle_phase(schedule);
        state
    }

    /// Skip over phases whose epoch budget is already used up.
    fn settle_phase(&mut self, schedule: &TrainSchedule) {
        loop {
            let budget = match self.phase {
                Phase::Pretrain => schedule.pretrain_epochs,
                Phase::Search => schedule.max_search_epochs,
                Phase::Finetune => schedule.max_finetune_epochs,
                Phase::Done => return,
            };
            let search_done = self.phase == Phase::Search && self.search.is_some();
            if self.phase_epoch < budget && !search_done {
                return;
            }
            if self.phase == Phase::Search && self.search.is_none() {
                let rep = self.current_mask_report();
                self.search = Some(SearchOutcome {
                    reason: StopReason::BudgetExhausted,
                    epochs: self.phase_epoch,
                    param_ratio_removed: rep.0,
                    flops_removed_fraction: rep.1,
                });
                if self.phase_epoch > 0 {
                    log::warn!(
                        "search stopped after {} epochs without reaching the target (removed {:.4})",
                        self.phase_epoch,
                        rep.0
                    );
                }
            }
            self.phase = match self.phase {
                Phase::Pretrain => Phase::Search,
                Phase::Search => Phase::Finetune,
                _ => Phase::Done,
            };
            self.phase_epoch = 0;
        }
    }

    fn current_mask_report(&self) -> (f64, f64) {
        match &self.masks {
            Some(m) => mask_compression_ratio(&self.net, m, None)
                .map(|r| (r.param_ratio_removed, r.flops_removed_fraction))
                .unwrap_or((0.0, 0.0)),
            None => (0.0, 0.0),
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Epoch count the learning-rate schedule is laid out over: the planned
    /// budget, shortened to the actual search length once that is known.
    fn schedule_total(&self, schedule: &TrainSchedule) -> usize {
        match &self.search {
            Some(s) => schedule.pretrain_epochs + s.epochs + schedule.max_finetune_epochs,
            None => schedule.planned_epochs(),
        }
    }
}

struct EpochStats {
    loss: f64,
    correct: usize,
    seen: usize,
    max_grad: f64,
}

impl EpochStats {
    fn new() -> Self {
        Self { loss: 0.0, correct: 0, seen: 0, max_grad: 0.0 }
    }

    fn add(&mut self, loss: f64, correct: usize, batch: usize, max_grad: f64) {
        self.loss += loss * batch as f64;
        self.correct += correct;
        self.seen += batch;
        self.max_grad = self.max_grad.max(max_grad);
    }
}

/// Drives a [`RunState`] over fixed training and test sets.
pub struct Trainer<'a, S> {
    pub config: &'a TrainConfig,
    pub train: &'a Dataset<S>,
    pub test: &'a Dataset<S>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(config: &'a TrainConfig, train: &'a Dataset<S>, test: &'a Dataset<S>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        Ok(Self { config, train, test })
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let order = epoch_order(self.train.len(), self.config.schedule.seed, epoch);
        order.chunks(self.config.schedule.batch_size).map(|c| c.to_vec()).collect()
    }

    fn load_batch(&self, idx: &[usize], epoch: usize) -> Result<(Tensor<S>, Vec<usize>)> {
        let aug = self.config.schedule.augment.as_ref().map(|a| (a, self.config.schedule.seed, epoch));
        self.train.batch(idx, aug)
    }

    fn layer_rows(&self, net: &Network<S>, ratios: &[f64], report: Option<&AbnormalReport>) -> Vec<LayerRow> {
        net.maskable_units()
            .iter()
            .zip(ratios)
            .map(|(&u, &k)| LayerRow {
                layer_id: net.unit(u).name.clone(),
                wsr: layer_sparsity(net.unit(u), k).wsr,
                k,
                abnormal_count: report.map_or(0, |r| r.count_for(u)),
            })
            .collect()
    }

    /// Run exactly one epoch of the current phase and append its log row.
    pub fn step_epoch(&self, state: &mut RunState<S>) -> Result<()> {
        state.settle_phase(&self.config.schedule);
        if state.is_done() {
            return Ok(());
        }
        let started = Instant::now();
        let sched = &self.config.schedule;
        let lr = sched.lr_decay.rate(sched.lr_initial, state.epoch_cursor, state.schedule_total(sched));
        state.sgd.config.learning_rate = lr;
        let epoch = state.epoch_cursor;
        let batches = self.batches(epoch);
        debug_assert_eq!(batches.len(), steps_per_epoch(self.train.len(), sched.batch_size));
        let mut stats = EpochStats::new();
        let mut probe_max_grad = 0.0;
        let mut report: Option<AbnormalReport> = None;
        let mut rest = &batches[..];
        let phase = state.phase;

        let layers_at_start;
        let (param_removed, flops_removed);
        match phase {
            Phase::Pretrain => {
                layers_at_start = self.layer_rows(&state.net, &state.ratios, None);
                (param_removed, flops_removed) = (0.0, 0.0);
            }
            Phase::Search => {
                let prune = &self.config.prune;
                let search_epoch = state.phase_epoch + 1;
                let plan = update_all_ratios(&state.net, prune, search_epoch, &state.ratios)?;
                state.prune_step += 1;
                let step = state.prune_step;
                let mut masks = select_masks(&state.net, &plan.ratios, step)?;
                let mut backup = backup_weights(&state.net, epoch, step);
                apply_masks(&mut state.net, &masks, Some(&mut state.sgd))?;

                let (x, labels) = self.load_batch(&rest[0], epoch)?;
                let probe = probe_step(&mut state.net, &mut state.sgd, &x, &labels)?;
                stats.add(probe.loss, probe.correct, labels.len(), probe.step.max_abs_grad);
                probe_max_grad = probe.step.max_abs_grad;
                rest = &rest[1..];

                if prune.recon_mode != ReconMode::None {
                    let rep = detect_abnormal(&state.net, &masks, prune.detect, prune.threshold_pool);
                    let mut rng = stream_rng(sched.seed, streams::REINIT, step);
                    reconstruct(
                        &mut state.net,
                        &mut masks,
                        &mut backup,
                        &rep,
                        prune.recon_mode,
                        Some(&mut state.sgd),
                        &mut rng,
                    )?;
                    report = Some(rep);
                }
                let measured = mask_compression_ratio(&state.net, &masks, Some(&plan.ratios))?;
                layers_at_start = plan
                    .sparsity
                    .iter()
                    .zip(state.net.maskable_units())
                    .map(|(s, u)| LayerRow {
                        layer_id: s.layer_id.clone(),
                        wsr: s.wsr,
                        k: s.ratio_k,
                        abnormal_count: report.as_ref().map_or(0, |r| r.count_for(u)),
                    })
                    .collect();
                (param_removed, flops_removed) = (measured.param_ratio_removed, measured.flops_removed_fraction);
                state.ratios = plan.ratios;
                state.masks = Some(masks);
                if measured.param_ratio_removed >= prune.tau {
                    state.search = Some(SearchOutcome {
                        reason: StopReason::TargetReached,
                        epochs: search_epoch,
                        param_ratio_removed: measured.param_ratio_removed,
                        flops_removed_fraction: measured.flops_removed_fraction,
                    });
                }
            }
            Phase::Finetune => {
                if state.phase_epoch == 0 {
                    if let Some(m) = &state.masks {
                        apply_masks(&mut state.net, m, Some(&mut state.sgd))?;
                    }
                }
                layers_at_start = self.layer_rows(&state.net, &state.ratios, None);
                let rep = global_compression_ratio(&state.net, None)?;
                (param_removed, flops_removed) = (rep.param_ratio_removed, rep.flops_removed_fraction);
            }
            Phase::Done => unreachable!("settled above"),
        }

        for idx in rest {
            let (x, labels) = self.load_batch(idx, epoch)?;
            let out = probe_step(&mut state.net, &mut state.sgd, &x, &labels)?;
            stats.add(out.loss, out.correct, labels.len(), out.step.max_abs_grad);
            if phase == Phase::Finetune {
                if let Some(m) = &state.masks {
                    apply_masks(&mut state.net, m, Some(&mut state.sgd))?;
                }
            }
        }

        let test = evaluate(&mut state.net, self.test, sched.batch_size)?;
        let row = EpochRow {
            epoch,
            phase,
            lr,
            train_loss: stats.loss / stats.seen.max(1) as f64,
            train_acc: stats.correct as f64 / stats.seen.max(1) as f64,
            test_loss: test.loss,
            test_acc: test.accuracy,
            param_ratio_removed: param_removed,
            flops_removed_fraction: flops_removed,
            abnormal_total: report.as_ref().map_or(0, |r| r.total()),
            max_grad: stats.max_grad,
            probe_max_grad,
            layers: layers_at_start,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} [{}] lr {:.4} train {:.4}/{:.3} test {:.4}/{:.3} removed {:.3} flops {:.3} abnormal {}",
            row.epoch,
            row.phase.as_str(),
            row.lr,
            row.train_loss,
            row.train_acc,
            row.test_loss,
            row.test_acc,
            row.param_ratio_removed,
            row.flops_removed_fraction,
            row.abnormal_total
        );
        state.log.push(row)?;
        state.epoch_cursor += 1;
        state.phase_epoch += 1;
        state.settle_phase(sched);
        Ok(())
    }

    /// Run epochs until the state leaves `phase` (or the run is done).
    pub fn run_phase(&self, state: &mut RunState<S>, phase: Phase) -> Result<()> {
        state.settle_phase(&self.config.schedule);
        while state.phase == phase {
            self.step_epoch(state)?;
        }
        Ok(())
    }

    /// Run to completion, calling `after_epoch` at every epoch boundary.
    pub fn run(&self, state: &mut RunState<S>, mut after_epoch: impl FnMut(&RunState<S>) -> Result<()>) -> Result<()> {
        state.settle_phase(&self.config.schedule);
        while !state.is_done() {
            self.step_epoch(state)?;
            after_epoch(state)?;
        }
        Ok(())
    }
}

/// Final artefacts of a complete run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tool_version: String,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub compression: crate::policy::CompressionReport,
    pub search: Option<SearchOutcome>,
    pub ratios: Vec<f64>,
}

pub fn summarize<S: Scalar>(state: &mut RunState<S>, test: &Dataset<S>, batch_size: usize) -> Result<RunSummary> {
    let eval = evaluate(&mut state.net, test, batch_size)?;
    Ok(RunSummary {
        tool_version: crate::TOOL_VERSION.to_string(),
        final_test_accuracy: eval.accuracy,
        final_test_loss: eval.loss,
        compression: global_compression_ratio(&state.net, Some(&state.ratios))?,
        search: state.search.clone(),
        ratios: state.ratios.clone(),
    })
}

/// Pretraining (if any) followed by the search stage.
pub fn search_stage<S: Scalar>(
    net: Network<S>,
    config: &TrainConfig,
    train: &Dataset<S>,
    test: &Dataset<S>,
) -> Result<RunState<S>> {
    let trainer = Trainer::new(config, train, test)?;
    let mut state = RunState::new(net, &config.schedule);
    trainer.run_phase(&mut state, Phase::Pretrain)?;
    trainer.run_phase(&mut state, Phase::Search)?;
    Ok(state)
}

/// Fine-tune a searched state under its frozen masks.
pub fn finetune_stage<S: Scalar>(
    state: &mut RunState<S>,
    config: &TrainConfig,
    train: &Dataset<S>,
    test: &Dataset<S>,
) -> Result<()> {
    let trainer = Trainer::new(config, train, test)?;
    trainer.run_phase(state, Phase::Finetune)
}

/// Complete run: search then fine-tune.
pub fn run_psap<S: Scalar>(
    net: Network<S>,
    config: &TrainConfig,
    train: &Dataset<S>,
    test: &Dataset<S>,
) -> Result<(RunState<S>, RunSummary)> {
    let mut state = search_stage(net, config, train, test)?;
    finetune_stage(&mut state, config, train, test)?;
    let summary = summarize(&mut state, test, config.schedule.batch_size)?;
    Ok((state, summary))
}
