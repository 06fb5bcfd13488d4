//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! magic `COGRPOCK`, u32 version, u64 seed, task hash and JSON metadata as
//! u32-length-prefixed UTF-8, u32 array count, then per array a
//! length-prefixed name, u32 rank, u64 dims and raw f64 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::grpo::{TrainMode, TrainState};
use crate::numerics::{AdamMoments, RngState, Tensor};
use crate::params::ParamStore;
use crate::schedule::{SchedulePolicy, SchedulePolicyConfig};
use crate::tasks::TaskSpec;

pub const MAGIC: &[u8; 8] = b"COGRPOCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub mode: Option<TrainMode>,
    pub denoiser: DenoiserConfig,
    pub policy: Option<SchedulePolicyConfig>,
    /// Horizon the schedule policy was trained at.
    pub train_steps: Option<usize>,
    pub updates: u64,
    pub env_steps: u64,
    pub model_adam_step: u64,
    pub schedule_adam_step: Option<u64>,
    pub heldout_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub task_hash: String,
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, Tensor)>,
}

fn io_err(msg: impl Into<String>) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into()))
}

fn push_named(out: &mut Vec<(String, Tensor)>, prefix: &str, names: &[String], tensors: &[Tensor]) {
    for (n, t) in names.iter().zip(tensors) {
        out.push((format!("{prefix}{n}"), t.clone()));
    }
}

fn push_block(out: &mut Vec<(String, Tensor)>, block: &str, params: &ParamStore, moments: &AdamMoments) {
    push_named(out, &format!("{block}/"), params.names(), params.tensors());
    push_named(out, &format!("{block}.adam_m/"), params.names(), &moments.m);
    push_named(out, &format!("{block}.adam_v/"), params.names(), &moments.v);
}

impl Checkpoint {
    pub fn from_pretrain(
        seed: u64,
        task: &TaskSpec,
        denoiser: &Denoiser,
        moments: &AdamMoments,
        heldout_loss: f64,
    ) -> Self {
        let mut arrays = Vec::new();
        push_block(&mut arrays, "theta", denoiser.params(), moments);
        Self {
            seed,
            task_hash: task.hash(),
            meta: CheckpointMeta {
                stage: Stage::Pretrain,
                mode: None,
                denoiser: *denoiser.config(),
                policy: None,
                train_steps: None,
                updates: 0,
                env_steps: 0,
                model_adam_step: moments.step,
                schedule_adam_step: None,
                heldout_loss: Some(heldout_loss),
            },
            arrays,
        }
    }

    /// Snapshot of a training run. Naive runs carry no schedule arrays.
    pub fn from_train_state(
        seed: u64,
        task: &TaskSpec,
        state: &TrainState,
        mode: TrainMode,
        train_steps: usize,
    ) -> Self {
        let mut arrays = Vec::new();
        push_block(&mut arrays, "theta", state.denoiser.params(), &state.model_moments);
        let policy = match (mode.uses_schedule_policy(), &state.policy, &state.schedule_moments) {
            (true, Some(p), Some(m)) => {
                push_block(&mut arrays, "phi", p.params(), m);
                Some(*p.config())
            }
            _ => None,
        };
        Self {
            seed,
            task_hash: task.hash(),
            meta: CheckpointMeta {
                stage: Stage::Train,
                mode: Some(mode),
                denoiser: *state.denoiser.config(),
                policy,
                train_steps: Some(train_steps),
                updates: state.updates,
                env_steps: state.env_steps,
                model_adam_step: state.model_moments.step,
                schedule_adam_step: policy.and(state.schedule_moments.as_ref().map(|m| m.step)),
                heldout_loss: None,
            },
            arrays,
        }
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_block(&self, block: &str) -> bool {
        let prefix = format!("{block}/");
        self.arrays.iter().any(|(n, _)| n.starts_with(&prefix))
    }

    fn fill(&self, prefix: &str, template: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, t) in template.names().iter().zip(template.tensors()) {
            let key = format!("{prefix}{name}");
            let a = self
                .array(&key)
                .ok_or_else(|| io_err(format!("checkpoint lacks array {key}")))?;
            if a.shape() != t.shape() {
                return Err(io_err(format!("array {key} has shape {:?}, expected {:?}", a.shape(), t.shape())));
            }
            out.push(name.clone(), a.clone());
        }
        Ok(out)
    }

    fn moments(&self, block: &str, params: &ParamStore, step: u64) -> Result<AdamMoments> {
        Ok(AdamMoments {
            m: self.fill(&format!("{block}.adam_m/"), params)?.tensors().to_vec(),
            v: self.fill(&format!("{block}.adam_v/"), params)?.tensors().to_vec(),
            step,
        })
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        let mut d = Denoiser::zeros(self.meta.denoiser);
        let loaded = self.fill("theta/", d.params())?;
        d.params_mut().load_from(&loaded)?;
        Ok(d)
    }

    pub fn model_moments(&self) -> Result<AdamMoments> {
        let d = Denoiser::zeros(self.meta.denoiser);
        self.moments("theta", d.params(), self.meta.model_adam_step)
    }

    pub fn policy(&self) -> Result<Option<SchedulePolicy>> {
        let Some(cfg) = self.meta.policy else {
            return Ok(None);
        };
        let mut p = SchedulePolicy::new(cfg, &mut RngState::new(0));
        let loaded = self.fill("phi/", p.params())?;
        p.params_mut().load_from(&loaded)?;
        Ok(Some(p))
    }

    /// Rebuild the full optimizer state of a training checkpoint.
    pub fn train_state(&self) -> Result<TrainState> {
        let denoiser = self.denoiser()?;
        let policy = self.policy()?;
        let model_moments = self.model_moments()?;
        let schedule_moments = match &policy {
            Some(p) => Some(self.moments("phi", p.params(), self.meta.schedule_adam_step.unwrap_or(0))?),
            None => None,
        };
        Ok(TrainState {
            denoiser,
            policy,
            model_moments,
            schedule_moments,
            updates: self.meta.updates,
            env_steps: self.meta.env_steps,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut b, &self.task_hash);
        put_str(&mut b, &serde_json::to_string(&self.meta).expect("meta serializes"));
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(io_err("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let seed = r.u64()?;
        let task_hash = r.string()?;
        let meta: CheckpointMeta = serde_json::from_str(&r.string()?)
            .map_err(|e| io_err(format!("bad checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| io_err(format!("array {name} is too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| io_err("array too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| io_err(format!("array {name}: {e}")))?;
            arrays.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(io_err("trailing bytes after the last array"));
        }
        Ok(Self {
            seed,
            task_hash,
            meta,
            arrays,
        })
    }

    /// Write through a temporary file and rename, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Read a checkpoint and, when `task` is given, check it was written for
    /// the same task.
    pub fn load(path: &Path, task: Option<&TaskSpec>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let ck = Self::from_bytes(&bytes)?;
        if let Some(task) = task {
            let expected = task.hash();
            if ck.task_hash != expected {
                return Err(Error::TaskMismatch {
                    expected,
                    found: ck.task_hash,
                });
            }
        }
        Ok(ck)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    format!("checkpoint truncated at byte {}", self.bytes.len()),
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| io_err("non UTF-8 string in checkpoint"))
    }
}
