//! Masked-token pretraining of the denoiser on corrupted class patterns.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{invalid, Result};
use crate::numerics::{Adam, AdamMoments, RngState, Tape};
use crate::params::{collect_grads, global_norm};
use crate::tasks::{sample_pretrain_pair, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the condition with `Null`.
    pub cond_dropout: f64,
    /// Batches averaged for the final held-out loss.
    pub eval_batches: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 32,
            lr: 3e-3,
            cond_dropout: 0.1,
            eval_batches: 16,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.eval_batches == 0 {
            return Err(invalid("pretrain iterations, batch_size and eval_batches must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("pretrain lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(invalid(format!("cond_dropout {} outside [0, 1)", self.cond_dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Held-out masked-token loss, averaged over `config.eval_batches` batches
/// drawn from a stream disjoint from training.
pub fn heldout_loss(
    denoiser: &Denoiser,
    task: &TaskSpec,
    config: &PretrainConfig,
    rng: &RngState,
) -> Result<f64> {
    let mut data = rng.fork("heldout-data");
    let mut masks = rng.fork("heldout-masks");
    let mut total = 0.0;
    for _ in 0..config.eval_batches {
        let batch: Vec<_> = (0..config.batch_size)
            .map(|_| sample_pretrain_pair(task, &mut data))
            .collect();
        let mut tape = Tape::new();
        let bound = denoiser.bind(&mut tape, false);
        let loss =
            denoiser.masked_pretrain_loss(&mut tape, &bound, &batch, config.cond_dropout, &mut masks)?;
        total += tape.value(loss).item();
    }
    Ok(total / config.eval_batches as f64)
}

/// Train `denoiser` in place; returns the held-out loss afterwards.
pub fn pretrain(
    denoiser: &mut Denoiser,
    moments: &mut AdamMoments,
    task: &TaskSpec,
    config: &PretrainConfig,
    rng: &RngState,
    sink: &mut dyn FnMut(&PretrainMetrics) -> Result<()>,
) -> Result<f64> {
    config.validate()?;
    task.validate()?;
    let dc = denoiser.config();
    if dc.vocab_size != task.vocab_size || dc.seq_len != task.seq_len || dc.num_classes != task.num_classes {
        return Err(invalid("denoiser shape does not match the task"));
    }
    let adam = Adam::new(config.lr);
    let mut data = rng.fork("data");
    let mut masks = rng.fork("masks");
    for iteration in 0..config.iterations {
        let batch: Vec<_> = (0..config.batch_size)
            .map(|_| sample_pretrain_pair(task, &mut data))
            .collect();
        let mut tape = Tape::new();
        let bound = denoiser.bind(&mut tape, true);
        let loss =
            denoiser.masked_pretrain_loss(&mut tape, &bound, &batch, config.cond_dropout, &mut masks)?;
        let grads = tape.backward(loss)?;
        let grads = collect_grads(&tape, &grads, &bound);
        let grad_norm = global_norm(&grads);
        adam.step(denoiser.params_mut().tensors_mut(), &grads, moments)?;
        sink(&PretrainMetrics {
            iteration,
            loss: tape.value(loss).item(),
            grad_norm,
        })?;
    }
    heldout_loss(denoiser, task, config, &rng.fork("heldout"))
}
