//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//! `b"PSAPCKPT"`, `u32` format version, `u64` header length, UTF-8 JSON
//! header, the model state vectors as `f64` in registry order, the optimizer
//! velocity buffers as `f64`, then one bitmap per mask (LSB first, `1` =
//! kept).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{build_model, ModelSpec};
use crate::optim::{SgdConfig, SgdState};
use crate::pruning::{FilterMask, MaskSet};
use crate::scalar::Scalar;
use crate::trainer::{ExperimentLog, Phase, RunState, SearchOutcome};

pub const MAGIC: &[u8; 8] = b"PSAPCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// All randomness is derived from the seed and the epoch/step counters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch_cursor: usize,
    pub prune_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLayout {
    pub unit: usize,
    pub layer_id: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool_version: String,
    pub scalar: String,
    pub config: RunConfig,
    pub model_spec: ModelSpec,
    pub phase: Phase,
    pub phase_epoch: usize,
    pub rng: RngState,
    pub ratios: Vec<f64>,
    pub search: Option<SearchOutcome>,
    pub sgd: SgdConfig,
    pub tensor_lens: Vec<usize>,
    pub velocity_lens: Vec<usize>,
    pub mask_step: Option<u64>,
    pub masks: Vec<MaskLayout>,
    pub log: ExperimentLog,
}

pub fn encode<S: Scalar>(config: &RunConfig, state: &RunState<S>) -> Result<Vec<u8>> {
    let tensors = state.net.state_vectors();
    let velocity = state.sgd.velocity();
    let header = Header {
        tool_version: crate::TOOL_VERSION.to_string(),
        scalar: S::NAME.to_string(),
        config: config.clone(),
        model_spec: state.net.spec().clone(),
        phase: state.phase,
        phase_epoch: state.phase_epoch,
        rng: RngState { seed: config.seed, epoch_cursor: state.epoch_cursor, prune_step: state.prune_step },
        ratios: state.ratios.clone(),
        search: state.search.clone(),
        sgd: state.sgd.config,
        tensor_lens: tensors.iter().map(Vec::len).collect(),
        velocity_lens: velocity.iter().map(Vec::len).collect(),
        mask_step: state.masks.as_ref().map(|m| m.step),
        masks: state
            .masks
            .iter()
            .flat_map(|m| &m.masks)
            .map(|m| MaskLayout { unit: m.unit, layer_id: m.layer_id.clone(), len: m.len() })
            .collect(),
        log: state.log.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 8 * header.tensor_lens.iter().sum::<usize>() * 2);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in tensors.iter().map(|v| v.as_slice()).chain(velocity.iter().map(|v| v.as_slice())) {
        for &x in v {
            out.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    for m in state.masks.iter().flat_map(|m| &m.masks) {
        let mut bytes = vec![0u8; m.len().div_ceil(8)];
        for (i, &k) in m.kept.iter().enumerate() {
            if k {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format { file: self.file.to_string(), offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s<S: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<S>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect())
    }
}

/// Header only, for `inspect`.
pub fn read_header(bytes: &[u8], file: &str) -> Result<Header> {
    let mut c = Cursor { bytes, pos: 0, file };
    if c.take(8, "magic")? != MAGIC {
        c.pos = 0;
        return Err(c.err("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(c.err(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(c.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let start = c.pos;
    let json = c.take(len, "header")?;
    serde_json::from_slice(json).map_err(|e| Error::Format {
        file: file.to_string(),
        offset: start as u64,
        msg: format!("bad header: {e}"),
    })
}

pub fn decode<S: Scalar>(bytes: &[u8], file: &str) -> Result<(RunConfig, RunState<S>)> {
    let header = read_header(bytes, file)?;
    let mut c = Cursor { bytes, pos: 20, file };
    c.pos += u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;

    let mut net = build_model::<S>(&header.model_spec)?;
    let tensors = header.tensor_lens.iter().map(|&n| c.f64s::<S>(n, "tensor")).collect::<Result<Vec<_>>>()?;
    net.load_state_vectors(&tensors)?;
    let velocity = header.velocity_lens.iter().map(|&n| c.f64s::<S>(n, "velocity")).collect::<Result<Vec<_>>>()?;
    let mut sgd = SgdState::new(header.sgd);
    sgd.set_velocity(velocity);

    let mut masks = Vec::with_capacity(header.masks.len());
    for m in &header.masks {
        let raw = c.take(m.len.div_ceil(8), "mask bitmap")?;
        let kept = (0..m.len).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
        masks.push(FilterMask { layer_id: m.layer_id.clone(), unit: m.unit, kept });
    }
    if c.pos != bytes.len() {
        return Err(c.err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let state = RunState {
        net,
        sgd,
        phase: header.phase,
        phase_epoch: header.phase_epoch,
        epoch_cursor: header.rng.epoch_cursor,
        prune_step: header.rng.prune_step,
        ratios: header.ratios,
        masks: header.mask_step.map(|step| MaskSet { step, masks }),
        search: header.search,
        log: header.log,
    };
    Ok((header.config, state))
}

/// Write atomically (temporary file, then rename) so an interrupted write
/// never clobbers the last good checkpoint.
pub fn save<S: Scalar>(path: &Path, config: &RunConfig, state: &RunState<S>) -> Result<()> {
    let bytes = encode(config, state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<(RunConfig, RunState<S>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn load_header(path: &Path) -> Result<Header> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_header(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_is_format_error() {
        let err = read_header(b"NOTACKPT\x01\0\0\0", "x").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn fresh_state_round_trips() {
        let cfg = RunConfig::toy();
        let net = build_model::<f32>(&cfg.model_spec()).unwrap();
        let state = RunState::new(net, &cfg.train_config().schedule);
        let a = encode(&cfg, &state).unwrap();
        let (cfg2, state2) = decode::<f32>(&a, "mem").unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(encode(&cfg2, &state2).unwrap(), a);
        let truncated = decode::<f32>(&a[..a.len() - 3], "mem");
        assert!(matches!(truncated, Err(Error::Format { .. })));
    }
}
