//! Orchestration behind the command-line subcommands. Every function here
//! writes its artefacts into `RunConfig::output_dir` when one is set.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint;
use crate::config::{Precision, RunConfig};
use crate::data::{epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_model, Network};
use crate::optim::gradient_stats;
use crate::pruning::{apply_masks, filter_l2_norms, filters_to_prune, select_prune_indices, FilterMask, MaskSet};
use crate::reconstruction::ReconMode;
use crate::scalar::Scalar;
use crate::trainer::{evaluate, summarize, LrDecay, Phase, RunState, RunSummary, TrainConfig, TrainSchedule, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Serialize)]
struct Artefact<'a, T: Serialize> {
    tool_version: &'static str,
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(dir: &Path, name: &str, cfg: &RunConfig, body: T) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&Artefact { tool_version: crate::TOOL_VERSION, config: cfg, body })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_data<S: Scalar>(cfg: &RunConfig) -> Result<(Dataset<S>, Dataset<S>)> {
    cfg.data.load(cfg.data_seed())
}

/// Outcome of `run`, with the final model state for inspection.
pub struct RunOutput<S> {
    pub state: RunState<S>,
    pub summary: RunSummary,
}

/// Execute (or continue) a full run at precision `S`.
pub fn run_typed<S: Scalar>(cfg: &RunConfig, resume: Option<RunState<S>>) -> Result<RunOutput<S>> {
    cfg.validate()?;
    let tc = cfg.train_config();
    let (train, test) = load_data::<S>(cfg)?;
    let trainer = Trainer::new(&tc, &train, &test)?;
    let mut state = match resume {
        Some(s) => s,
        None => RunState::new(build_model::<S>(&cfg.model_spec())?, &tc.schedule),
    };
    let out = cfg.output_dir.clone();
    if let Some(dir) = &out {
        prepare_dir(dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_json()?).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
    }
    trainer.run(&mut state, |s| {
        if let Some(dir) = &out {
            checkpoint::save(&dir.join(CHECKPOINT_FILE), cfg, s)?;
            s.log.save_csv(&dir.join(LOG_FILE))?;
        }
        Ok(())
    })?;
    let summary = summarize(&mut state, &test, tc.schedule.batch_size)?;
    if let Some(dir) = &out {
        checkpoint::save(&dir.join(CHECKPOINT_FILE), cfg, &state)?;
        state.log.save_csv(&dir.join(LOG_FILE))?;
        write_json(dir, SUMMARY_FILE, cfg, &summary)?;
    }
    Ok(RunOutput { state, summary })
}

pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    Ok(match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, None)?.summary,
        Precision::F64 => run_typed::<f64>(cfg, None)?.summary,
    })
}

/// Continue the run stored in `path`; `out` replaces the stored output directory.
pub fn resume(path: &Path, out: Option<PathBuf>) -> Result<RunSummary> {
    let header = checkpoint::load_header(path)?;
    let mut cfg = header.config.clone();
    if out.is_some() {
        cfg.output_dir = out;
    }
    Ok(match header.scalar.as_str() {
        "f32" => run_typed::<f32>(&cfg, Some(checkpoint::load::<f32>(path)?.1))?.summary,
        "f64" => run_typed::<f64>(&cfg, Some(checkpoint::load::<f64>(path)?.1))?.summary,
        other => return Err(Error::Format { file: path.display().to_string(), offset: 0, msg: format!("unknown scalar {other}") }),
    })
}

/// The four mechanism combinations of the ablation grid.
pub fn ablation_variants(cfg: &RunConfig) -> [(&'static str, bool, ReconMode); 4] {
    let pr = match cfg.prune.recon_mode {
        ReconMode::None => ReconMode::Reload,
        m => m,
    };
    [
        ("pure_ipt", false, ReconMode::None),
        ("without_pr", true, ReconMode::None),
        ("without_sa", false, pr),
        ("psap", true, pr),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub adaptive: bool,
    pub recon: ReconMode,
    pub seeds: Vec<u64>,
    pub accuracy: Vec<f64>,
    pub param_ratio_removed: Vec<f64>,
    pub mean_accuracy: f64,
}

pub fn ablation_config(cfg: &RunConfig, adaptive: bool, recon: ReconMode, seed: u64) -> RunConfig {
    let mut c = cfg.with_seed(seed);
    c.prune.adaptive = adaptive;
    c.prune.recon_mode = recon;
    c.output_dir = None;
    c
}

/// Every variant under the shared seeds `seed, seed + 1, ...`.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.experiments.n_seeds as u64).map(|i| cfg.seed + i).collect();
    let mut rows = Vec::new();
    for (name, adaptive, recon) in ablation_variants(cfg) {
        let mut accuracy = Vec::new();
        let mut removed = Vec::new();
        for &s in &seeds {
            let r = run(&ablation_config(cfg, adaptive, recon, s))?;
            log::info!("ablate {name} seed {s}: accuracy {:.4}", r.final_test_accuracy);
            accuracy.push(r.final_test_accuracy);
            removed.push(r.compression.param_ratio_removed);
        }
        let mean_accuracy = accuracy.iter().sum::<f64>() / accuracy.len() as f64;
        rows.push(AblationRow {
            variant: name.into(),
            adaptive,
            recon,
            seeds: seeds.clone(),
            accuracy,
            param_ratio_removed: removed,
            mean_accuracy,
        });
    }
    if let Some(dir) = &cfg.output_dir {
        prepare_dir(dir)?;
        let path = dir.join("ablation.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["variant".to_string(), "adaptive".into(), "recon".into()];
        header.extend(seeds.iter().map(|s| format!("seed_{s}")));
        header.push("mean".into());
        w.write_record(&header)?;
        for r in &rows {
            let mut rec = vec![r.variant.clone(), r.adaptive.to_string(), r.recon.to_string()];
            rec.extend(r.accuracy.iter().map(|a| a.to_string()));
            rec.push(r.mean_accuracy.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_json(dir, "ablation.json", cfg, serde_json::json!({ "rows": rows }))?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WsrTrace {
    pub layers: Vec<String>,
    /// One row per search epoch: WSR of every layer measured before that
    /// epoch's pruning step.
    pub wsr: Vec<Vec<f64>>,
    pub train_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
}

/// Uniform iterative prune/train for `schedule.max_search_epochs` epochs,
/// recording every layer's WSR.
pub fn wsr_trace(cfg: &RunConfig) -> Result<WsrTrace> {
    let mut c = cfg.clone();
    c.prune.adaptive = false;
    c.prune.recon_mode = ReconMode::None;
    c.prune.tau = 1.0;
    c.schedule.max_finetune_epochs = 0;
    c.output_dir = None;
    let log = match c.precision {
        Precision::F32 => run_typed::<f32>(&c, None)?.state.log,
        Precision::F64 => run_typed::<f64>(&c, None)?.state.log,
    };
    let rows: Vec<_> = log.rows_in(Phase::Search).collect();
    let trace = WsrTrace {
        layers: rows.first().map(|r| r.layers.iter().map(|l| l.layer_id.clone()).collect()).unwrap_or_default(),
        wsr: rows.iter().map(|r| r.layers.iter().map(|l| l.wsr).collect()).collect(),
        train_acc: rows.iter().map(|r| r.train_acc).collect(),
        test_acc: rows.iter().map(|r| r.test_acc).collect(),
    };
    if let Some(dir) = &cfg.output_dir {
        prepare_dir(dir)?;
        let path = dir.join("wsr_trace.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["epoch".to_string()];
        header.extend(trace.layers.iter().cloned());
        header.extend(["train_acc".to_string(), "test_acc".to_string()]);
        w.write_record(&header)?;
        for (e, wsr) in trace.wsr.iter().enumerate() {
            let mut rec = vec![e.to_string()];
            rec.extend(wsr.iter().map(|v| v.to_string()));
            rec.push(trace.train_acc[e].to_string());
            rec.push(trace.test_acc[e].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_json(dir, "wsr_trace.json", cfg, &trace)?;
    }
    Ok(trace)
}

/// Dense training for `experiments.dense_epochs` epochs.
pub fn train_dense<S: Scalar>(cfg: &RunConfig, train: &Dataset<S>, test: &Dataset<S>) -> Result<Network<S>> {
    let tc = TrainConfig {
        prune: cfg.prune.clone(),
        schedule: TrainSchedule {
            pretrain_epochs: cfg.experiments.dense_epochs,
            max_search_epochs: 0,
            max_finetune_epochs: 0,
            seed: cfg.seed,
            ..cfg.schedule.clone()
        },
    };
    let trainer = Trainer::new(&tc, train, test)?;
    let mut state = RunState::new(build_model::<S>(&cfg.model_spec())?, &tc.schedule);
    trainer.run(&mut state, |_| Ok(()))?;
    Ok(state.net)
}

fn base_network<S: Scalar>(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    train: &Dataset<S>,
    test: &Dataset<S>,
) -> Result<Network<S>> {
    match checkpoint_path {
        Some(p) => {
            let net = checkpoint::load::<S>(p)?.1.net;
            if net.spec().input_shape != train.shape() || net.spec().classes != train.classes() {
                return Err(Error::Config(format!("checkpoint {} does not match the configured data", p.display())));
            }
            Ok(net)
        }
        None => train_dense(cfg, train, test),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub ratio: f64,
    pub pruned_filters: usize,
    /// Accuracy right after masking, before any fine-tuning.
    pub acc_pruned: f64,
    pub acc_finetuned: f64,
}

/// Prune only `layer` at every grid ratio, fine-tune briefly under a hard
/// mask and record test accuracy. A ratio that removes no filter skips the
/// fine-tune, so it reports the base accuracy unchanged.
pub fn sensitivity_typed<S: Scalar>(
    cfg: &RunConfig,
    base: &Network<S>,
    layer: &str,
    train: &Dataset<S>,
    test: &Dataset<S>,
) -> Result<Vec<SensitivityRow>> {
    let unit = base.unit_index(layer).filter(|&u| base.unit(u).maskable).ok_or_else(|| {
        let names: Vec<String> = base.maskable_units().iter().map(|&u| base.unit(u).name.clone()).collect();
        Error::Config(format!("unknown layer `{layer}`; valid layers: {}", names.join(", ")))
    })?;
    let tc = TrainConfig {
        prune: cfg.prune.clone(),
        schedule: TrainSchedule {
            pretrain_epochs: 0,
            max_search_epochs: 0,
            max_finetune_epochs: cfg.experiments.sensitivity_finetune_epochs,
            lr_initial: cfg.experiments.finetune_lr,
            lr_decay: LrDecay::Constant,
            seed: cfg.seed,
            ..cfg.schedule.clone()
        },
    };
    let trainer = Trainer::new(&tc, train, test)?;
    let mut rows = Vec::new();
    for &ratio in &cfg.experiments.sensitivity_ratios {
        let mut net = base.clone();
        let norms = filter_l2_norms(&net.unit(unit).conv);
        let pruned = select_prune_indices(&norms, ratio);
        let masks = MaskSet {
            step: 0,
            masks: vec![FilterMask::with_pruned(unit, layer, norms.len(), &pruned)],
        };
        apply_masks(&mut net, &masks, None)?;
        let acc_pruned = evaluate(&mut net, test, tc.schedule.batch_size)?.accuracy;
        let acc_finetuned = if pruned.is_empty() {
            acc_pruned
        } else {
            let mut state = RunState::new(net, &tc.schedule);
            state.masks = Some(masks);
            trainer.run(&mut state, |_| Ok(()))?;
            evaluate(&mut state.net, test, tc.schedule.batch_size)?.accuracy
        };
        rows.push(SensitivityRow { ratio, pruned_filters: pruned.len(), acc_pruned, acc_finetuned });
    }
    Ok(rows)
}

pub fn sensitivity(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<Vec<SensitivityRow>> {
    fn go<S: Scalar>(cfg: &RunConfig, ck: Option<&Path>) -> Result<Vec<SensitivityRow>> {
        let layer = cfg
            .experiments
            .sensitivity_layer
            .clone()
            .ok_or_else(|| Error::Config("sensitivity needs experiments.sensitivity_layer".into()))?;
        let (train, test) = load_data::<S>(cfg)?;
        let base = base_network(cfg, ck, &train, &test)?;
        sensitivity_typed(cfg, &base, &layer, &train, &test)
    }
    cfg.validate()?;
    let rows = match cfg.precision {
        Precision::F32 => go::<f32>(cfg, checkpoint_path)?,
        Precision::F64 => go::<f64>(cfg, checkpoint_path)?,
    };
    if let Some(dir) = &cfg.output_dir {
        prepare_dir(dir)?;
        let path = dir.join("sensitivity.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_json(dir, "sensitivity.json", cfg, serde_json::json!({ "rows": rows }))?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Half {
    Lower,
    Upper,
}

/// Indices of the `floor(fraction * n)` largest norms (ties: lower index).
pub fn select_upper_indices<S: Scalar>(norms: &[S], fraction: f64) -> Vec<usize> {
    let n = filters_to_prune(fraction, norms.len());
    let mut idx: Vec<usize> = (0..norms.len()).collect();
    idx.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut out: Vec<usize> = idx[..n].to_vec();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradAccRow {
    pub seed: u64,
    pub arm: Half,
    pub pruned_filters: usize,
    pub max_grad: f64,
    pub grad_norm: f64,
    pub acc_before: f64,
    pub acc_after: f64,
    pub acc_drop: f64,
}

/// Prune `fraction` of every maskable layer's filters from one end of the
/// importance order, then measure the test-accuracy drop and the largest
/// pre-clip gradient entry on one training batch.
pub fn gradient_accuracy_arm<S: Scalar>(
    base: &Network<S>,
    arm: Half,
    fraction: f64,
    batch: (&crate::tensor::Tensor<S>, &[usize]),
    test: &Dataset<S>,
    eval_batch: usize,
) -> Result<(usize, f64, f64, f64)> {
    let mut net = base.clone();
    let mut masks = Vec::new();
    for u in net.maskable_units() {
        let norms = filter_l2_norms(&net.unit(u).conv);
        let pruned = match arm {
            Half::Lower => select_prune_indices(&norms, fraction),
            Half::Upper => select_upper_indices(&norms, fraction),
        };
        masks.push(FilterMask::with_pruned(u, net.unit(u).name.clone(), norms.len(), &pruned));
    }
    let set = MaskSet { step: 0, masks };
    apply_masks(&mut net, &set, None)?;
    let pruned: usize = set.masks.iter().map(|m| m.pruned_count()).sum();
    let acc = evaluate(&mut net, test, eval_batch)?.accuracy;
    net.loss_and_grad(batch.0, batch.1)?;
    let (norm, max) = gradient_stats(&net.params_mut());
    Ok((pruned, max, norm, acc))
}

pub fn gradient_accuracy(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<Vec<GradAccRow>> {
    fn go<S: Scalar>(cfg: &RunConfig, ck: Option<&Path>) -> Result<Vec<GradAccRow>> {
        let (train, test) = load_data::<S>(cfg)?;
        let bs = cfg.schedule.batch_size;
        let mut rows = Vec::new();
        for i in 0..cfg.experiments.n_seeds as u64 {
            let seed = cfg.seed + i;
            let c = cfg.with_seed(seed);
            let base = base_network(&c, ck, &train, &test)?;
            let before = evaluate(&mut base.clone(), &test, bs)?.accuracy;
            let order = epoch_order(train.len(), seed, usize::MAX >> 1);
            let (x, labels) = train.batch(&order[..bs.min(order.len())], None)?;
            for arm in [Half::Lower, Half::Upper] {
                let (pruned, max_grad, grad_norm, after) =
                    gradient_accuracy_arm(&base, arm, cfg.experiments.prune_fraction, (&x, &labels), &test, bs)?;
                rows.push(GradAccRow {
                    seed,
                    arm,
                    pruned_filters: pruned,
                    max_grad,
                    grad_norm,
                    acc_before: before,
                    acc_after: after,
                    acc_drop: before - after,
                });
            }
        }
        Ok(rows)
    }
    cfg.validate()?;
    let rows = match cfg.precision {
        Precision::F32 => go::<f32>(cfg, checkpoint_path)?,
        Precision::F64 => go::<f64>(cfg, checkpoint_path)?,
    };
    if let Some(dir) = &cfg.output_dir {
        prepare_dir(dir)?;
        let path = dir.join("gradient_accuracy.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_json(dir, "gradient_accuracy.json", cfg, serde_json::json!({ "rows": rows }))?;
    }
    Ok(rows)
}
