//! Group-relative policy optimization over the joint token/schedule policy.
//!
//! Each update collects fresh rollout groups under frozen snapshots, turns
//! terminal rewards into group-normalized advantages, and takes one or more
//! gradient steps on the clipped surrogate. The probability ratio depends on
//! the phase: the token factor alone (model phase), the schedule factor alone
//! (schedule phase), or their product (joint).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser, Timestep, TokenSequence};
use crate::error::{contract, invalid, Error, Result};
use crate::numerics::{categorical_kl, Adam, AdamMoments, RngState, Tape, Tensor, Var};
use crate::params::{accumulate, collect_grads, global_norm};
use crate::sampler::{generate_trajectory, ScheduleSource, StepRecord, Trajectory};
use crate::schedule::{
    action_log_prob, action_log_prob_on_tape, PresetSchedule, SchedulePolicy,
};
use crate::tasks::{composite_reward, RewardSpec, TaskSpec};

/// Guard added to the group standard deviation.
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Model,
    Schedule,
    Joint,
}

impl Phase {
    pub fn trains_model(self) -> bool {
        matches!(self, Phase::Model | Phase::Joint)
    }

    pub fn trains_schedule(self) -> bool {
        matches!(self, Phase::Schedule | Phase::Joint)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Model => "model",
            Phase::Schedule => "schedule",
            Phase::Joint => "joint",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Naive,
    CoJoint,
    CoAlternating,
}

impl TrainMode {
    pub fn uses_schedule_policy(self) -> bool {
        !matches!(self, TrainMode::Naive)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Naive => "naive",
            TrainMode::CoJoint => "co-joint",
            TrainMode::CoAlternating => "co-alternating",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(TrainMode::Naive),
            "co-joint" => Ok(TrainMode::CoJoint),
            "co-alternating" => Ok(TrainMode::CoAlternating),
            other => Err(invalid(format!(
                "unknown mode {other:?} (expected naive, co-joint or co-alternating)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Rollouts per condition in model and joint updates.
    pub group_size_model: usize,
    /// Rollouts per condition in schedule updates.
    pub group_size_schedule: usize,
    /// Denoising steps per trajectory.
    pub steps: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    /// Exploration standard deviation of the scheduling policy.
    pub sigma: f64,
    /// Model updates per alternating cycle.
    pub model_updates: usize,
    /// Schedule updates per alternating cycle.
    pub schedule_updates: usize,
    pub cycles: usize,
    pub lr_model: f64,
    pub lr_schedule: f64,
    /// Conditions drawn per update; each gets its own group.
    pub batch_conditions: usize,
    /// Gradient steps taken on each rollout batch.
    pub epochs_per_batch: usize,
    /// Return discount. Rewards are terminal, so only 1 is accepted.
    pub discount: f64,
    /// Taken from the run section, not from the train section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size_model: 6,
            group_size_schedule: 8,
            steps: 16,
            clip_eps: 0.2,
            kl_beta: 0.0,
            sigma: 0.1,
            model_updates: 100,
            schedule_updates: 66,
            cycles: 3,
            lr_model: 1e-3,
            lr_schedule: 1e-2,
            batch_conditions: 4,
            epochs_per_batch: 1,
            discount: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("group_size_model", self.group_size_model),
            ("group_size_schedule", self.group_size_schedule),
            ("steps", self.steps),
            ("model_updates", self.model_updates),
            ("schedule_updates", self.schedule_updates),
            ("cycles", self.cycles),
            ("batch_conditions", self.batch_conditions),
            ("epochs_per_batch", self.epochs_per_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if self.group_size_model < 2 || self.group_size_schedule < 2 {
            return Err(invalid("group sizes must be at least 2"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid(format!("clip_eps {} outside (0, 1)", self.clip_eps)));
        }
        if !(self.kl_beta >= 0.0) || !self.kl_beta.is_finite() {
            return Err(invalid(format!("kl_beta must be nonnegative, got {}", self.kl_beta)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(invalid(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        for (name, lr) in [("lr_model", self.lr_model), ("lr_schedule", self.lr_schedule)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.discount != 1.0 {
            return Err(invalid(format!(
                "discount must be 1 for terminal rewards, got {}",
                self.discount
            )));
        }
        Ok(())
    }

    pub fn group_size(&self, phase: Phase) -> usize {
        match phase {
            Phase::Model | Phase::Joint => self.group_size_model,
            Phase::Schedule => self.group_size_schedule,
        }
    }

    /// Environment steps consumed by one update in `phase`.
    pub fn env_steps_per_update(&self, phase: Phase) -> u64 {
        (self.batch_conditions * self.group_size(phase) * self.steps) as u64
    }

    /// Total environment steps of the alternating schedule.
    pub fn alternating_env_steps(&self) -> u64 {
        self.cycles as u64
            * (self.model_updates as u64 * self.env_steps_per_update(Phase::Model)
                + self.schedule_updates as u64 * self.env_steps_per_update(Phase::Schedule))
    }

    /// Number of updates `mode` runs so that every mode consumes the same
    /// number of environment steps as the alternating schedule.
    pub fn equalized_updates(&self, mode: TrainMode) -> usize {
        match mode {
            TrainMode::CoAlternating => {
                self.cycles * (self.model_updates + self.schedule_updates)
            }
            TrainMode::Naive | TrainMode::CoJoint => {
                let per = self.env_steps_per_update(Phase::Model);
                ((self.alternating_env_steps() + per / 2) / per) as usize
            }
        }
    }
}

/// `G` rollouts for one condition with their rewards and advantages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub condition: Condition,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// `(R - mean) / (std + eps)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(invalid(format!(
            "advantages need a group of at least 2, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(invalid("rewards must be finite"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + ADVANTAGE_EPS;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Roll out `group_size` trajectories for `cond` on independent forks of
/// `rng` and attach composite rewards.
#[allow(clippy::too_many_arguments)]
pub fn collect_group(
    denoiser: &Denoiser,
    source: ScheduleSource<'_>,
    cond: Condition,
    group_size: usize,
    steps: usize,
    task: &TaskSpec,
    rewards: &RewardSpec,
    rng: &RngState,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(invalid("a rollout group needs at least 2 trajectories"));
    }
    let mut trajectories = Vec::with_capacity(group_size);
    let mut values = Vec::with_capacity(group_size);
    for g in 0..group_size {
        let mut traj =
            generate_trajectory(denoiser, source, cond, steps, &rng.fork_indexed("rollout", g as u64))?;
        let r = composite_reward(&traj.final_seq, cond, task, rewards)?;
        traj.reward = Some(r);
        values.push(r);
        trajectories.push(traj);
    }
    let advantages = compute_advantages(&values)?;
    Ok(RolloutGroup {
        condition: cond,
        trajectories,
        rewards: values,
        advantages,
    })
}

fn record(traj: &Trajectory, t: usize) -> Result<(&StepRecord, Timestep)> {
    let rec = traj
        .steps
        .get(t)
        .ok_or_else(|| invalid(format!("step {t} outside a {}-step trajectory", traj.horizon())))?;
    Ok((rec, Timestep::new(t, traj.horizon())?))
}

fn stored_schedule(rec: &StepRecord) -> Result<([f64; 4], f64)> {
    match (rec.schedule_u, rec.schedule_logprob) {
        (Some(u), Some(lp)) => Ok((u, lp)),
        _ => Err(contract(
            "step has no stochastic schedule draw to score (rolled out with sigma = 0?)",
        )),
    }
}

/// Pooled final-layer features at the step's input state, as seen by the
/// scheduling policy during the rollout.
fn pooled_features(
    denoiser: &Denoiser,
    seq: &TokenSequence,
    cond: Condition,
    step: Timestep,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = denoiser.bind(&mut tape, false);
    let fwd = denoiser.forward(&mut tape, &bound, seq, cond, step)?;
    let pooled = tape.mean_rows(fwd.features);
    Ok(tape.value(pooled).clone())
}

fn guided_log_probs_value(denoiser: &Denoiser, rec: &StepRecord, cond: Condition, step: Timestep) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = denoiser.bind(&mut tape, false);
    let fwd = denoiser.forward(&mut tape, &bound, &rec.state_before, cond, step)?;
    let lp = denoiser.guided_log_probs(
        &mut tape,
        &bound,
        fwd.logits,
        &rec.state_before,
        step,
        rec.schedule.s,
        rec.schedule.tau_s,
    )?;
    Ok(tape.value(lp).clone())
}

fn model_log_ratio(denoiser: &Denoiser, traj: &Trajectory, t: usize) -> Result<f64> {
    let (rec, step) = record(traj, t)?;
    if rec.committed.is_empty() {
        return Err(contract(format!("step {t} committed no tokens")));
    }
    let lps = denoiser.token_log_probs(
        &rec.state_before,
        traj.condition,
        step,
        rec.schedule.s,
        rec.schedule.tau_s,
        &rec.committed,
    )?;
    Ok(lps.iter().sum::<f64>() - rec.model_logprob_sum)
}

fn schedule_log_ratio(
    denoiser: &Denoiser,
    policy: &SchedulePolicy,
    traj: &Trajectory,
    t: usize,
    sigma: f64,
) -> Result<f64> {
    let (rec, step) = record(traj, t)?;
    let (u, stored) = stored_schedule(rec)?;
    let pooled = pooled_features(denoiser, &rec.state_before, traj.condition, step)?;
    let mean = policy.policy_mean(&pooled, step)?;
    Ok(action_log_prob(&mean, sigma, &u)? - stored)
}

/// Token factor of the ratio: product over committed positions of
/// `p_theta / p_theta_old`, with the rollout's schedule held fixed.
pub fn model_ratio(denoiser: &Denoiser, traj: &Trajectory, t: usize) -> Result<f64> {
    Ok(model_log_ratio(denoiser, traj, t)?.exp())
}

/// Schedule factor of the ratio for the stored unconstrained draw.
pub fn schedule_ratio(
    denoiser: &Denoiser,
    policy: &SchedulePolicy,
    traj: &Trajectory,
    t: usize,
    sigma: f64,
) -> Result<f64> {
    Ok(schedule_log_ratio(denoiser, policy, traj, t, sigma)?.exp())
}

/// Ratio of the joint policy: both factors at once.
pub fn joint_ratio(
    denoiser: &Denoiser,
    policy: &SchedulePolicy,
    traj: &Trajectory,
    t: usize,
    sigma: f64,
) -> Result<f64> {
    let m = model_log_ratio(denoiser, traj, t)?;
    let s = schedule_log_ratio(denoiser, policy, traj, t, sigma)?;
    Ok((m + s).exp())
}

/// Value of the clipped surrogate and its ratio statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateStats {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)` for one term.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// `-(1/G)(1/T) sum_g sum_t min(r A, clip(r) A)`; `ratios[g][t]` pairs with
/// `advantages[g]`.
pub fn clipped_surrogate(ratios: &[Vec<f64>], advantages: &[f64], eps: f64) -> Result<SurrogateStats> {
    if ratios.len() != advantages.len() || ratios.is_empty() {
        return Err(invalid(format!(
            "{} ratio rows for {} advantages",
            ratios.len(),
            advantages.len()
        )));
    }
    let horizon = ratios[0].len();
    if horizon == 0 || ratios.iter().any(|r| r.len() != horizon) {
        return Err(invalid("ratio rows must share one nonzero horizon"));
    }
    let mut total = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    for (row, &a) in ratios.iter().zip(advantages) {
        for &r in row {
            total += clipped_term(r, a, eps);
            ratio_sum += r;
            clipped += usize::from((r - 1.0).abs() > eps);
        }
    }
    let terms = (ratios.len() * horizon) as f64;
    Ok(SurrogateStats {
        loss: -total / terms,
        mean_ratio: ratio_sum / terms,
        clip_fraction: clipped as f64 / terms,
    })
}

/// Mean categorical KL from `denoiser` to `reference` over the step's
/// committed positions; 0 when nothing was committed.
pub fn kl_regularizer(
    denoiser: &Denoiser,
    reference: &Denoiser,
    traj: &Trajectory,
    t: usize,
) -> Result<f64> {
    let (rec, step) = record(traj, t)?;
    if rec.committed.is_empty() {
        return Ok(0.0);
    }
    let p = guided_log_probs_value(denoiser, rec, traj.condition, step)?;
    let q = guided_log_probs_value(reference, rec, traj.condition, step)?;
    let mut total = 0.0;
    for &(i, _) in &rec.committed {
        let pi: Vec<f64> = p.row(i).iter().map(|v| v.exp()).collect();
        let qi: Vec<f64> = q.row(i).iter().map(|v| v.exp()).collect();
        total += categorical_kl(&pi, &qi)?;
    }
    Ok(total / rec.committed.len() as f64)
}

/// Optimizer state for one training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub denoiser: Denoiser,
    pub policy: Option<SchedulePolicy>,
    pub model_moments: AdamMoments,
    pub schedule_moments: Option<AdamMoments>,
    /// Rollout batches consumed so far.
    pub updates: u64,
    pub env_steps: u64,
}

impl TrainState {
    pub fn new(denoiser: Denoiser, policy: Option<SchedulePolicy>) -> Self {
        let model_moments = AdamMoments::zeros_like(denoiser.params().tensors());
        let schedule_moments = policy
            .as_ref()
            .map(|p| AdamMoments::zeros_like(p.params().tensors()));
        Self {
            denoiser,
            policy,
            model_moments,
            schedule_moments,
            updates: 0,
            env_steps: 0,
        }
    }

    pub fn model_fingerprint(&self) -> String {
        self.denoiser.params().fingerprint()
    }

    pub fn schedule_fingerprint(&self) -> Option<String> {
        self.policy.as_ref().map(|p| p.params().fingerprint())
    }
}

/// Read-only inputs shared by every update of a run.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub task: &'a TaskSpec,
    pub rewards: &'a RewardSpec,
    /// Pre-RL model, required when `kl_beta > 0`.
    pub reference: Option<&'a Denoiser>,
    pub rng: &'a RngState,
}

/// One JSONL metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub update: u64,
    pub phase: Phase,
    pub epoch: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub env_steps: u64,
}

/// Everything produced by one rollout batch.
#[derive(Clone, Debug)]
pub struct UpdateOutcome {
    pub metrics: Vec<UpdateMetrics>,
    pub groups: Vec<RolloutGroup>,
    pub model_fingerprint: String,
    pub schedule_fingerprint: Option<String>,
}

/// Receives each outcome as soon as its update finishes.
pub type UpdateSink<'s> = dyn FnMut(&UpdateOutcome) -> Result<()> + 's;

struct Objective {
    loss: f64,
    ratio_sum: f64,
    clipped: usize,
    terms: usize,
    model_grads: Option<Vec<Tensor>>,
    schedule_grads: Option<Vec<Tensor>>,
}

/// Surrogate contribution of one trajectory, `weight * sum_t term_t`
/// negated, with gradients for the trainable blocks of `phase`.
#[allow(clippy::too_many_arguments)]
fn trajectory_objective(
    denoiser: &Denoiser,
    policy: Option<&SchedulePolicy>,
    reference: Option<&Denoiser>,
    traj: &Trajectory,
    advantage: f64,
    phase: Phase,
    config: &TrainConfig,
    weight: f64,
) -> Result<Objective> {
    let mut tape = Tape::new();
    let dvars = denoiser.bind(&mut tape, phase.trains_model());
    // A deterministic schedule is a point mass: its factor is identically 1.
    let schedule_branch = phase.trains_schedule() && config.sigma > 0.0;
    let pvars = match (schedule_branch, policy) {
        (true, Some(p)) => Some(p.bind(&mut tape, true)),
        (true, None) => return Err(invalid("schedule updates need a scheduling policy")),
        (false, _) => None,
    };
    let eps = config.clip_eps;
    let mut terms = Vec::with_capacity(traj.horizon());
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    for t in 0..traj.horizon() {
        let (rec, step) = record(traj, t)?;
        let mut log_ratio: Option<Var> = None;
        if phase.trains_model() && !rec.committed.is_empty() {
            let lp = denoiser
                .committed_log_prob(
                    &mut tape,
                    &dvars,
                    &rec.state_before,
                    traj.condition,
                    step,
                    rec.schedule.s,
                    rec.schedule.tau_s,
                    &rec.committed,
                )?
                .expect("nonempty committed set");
            log_ratio = Some(tape.offset(lp, -rec.model_logprob_sum));
        }
        if let (Some(pvars), Some(policy)) = (&pvars, policy) {
            let (u, stored) = stored_schedule(rec)?;
            // Features come from the live denoiser, so in the joint phase the
            // schedule factor also carries gradient into the model.
            let fwd = denoiser.forward(&mut tape, &dvars, &rec.state_before, traj.condition, step)?;
            let pooled = tape.mean_rows(fwd.features);
            let mean = policy.mean_on_tape(&mut tape, pvars, pooled, step)?;
            let lp = action_log_prob_on_tape(&mut tape, mean, config.sigma, &u)?;
            let d = tape.offset(lp, -stored);
            log_ratio = Some(match log_ratio {
                Some(m) => tape.add(m, d)?,
                None => d,
            });
        }
        let ratio = match log_ratio {
            Some(l) => tape.exp(l),
            None => tape.constant(Tensor::scalar(1.0)),
        };
        let r = tape.value(ratio).item();
        ratio_sum += r;
        clipped += usize::from((r - 1.0).abs() > eps);
        let unclipped = tape.scale(ratio, advantage);
        let bounded = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
        let bounded = tape.scale(bounded, advantage);
        let mut term = tape.minimum(unclipped, bounded)?;
        if config.kl_beta > 0.0 && phase.trains_model() && !rec.committed.is_empty() {
            let reference =
                reference.ok_or_else(|| invalid("kl_beta > 0 needs a reference model"))?;
            let kl = kl_on_tape(&mut tape, denoiser, &dvars, reference, traj.condition, rec, step)?;
            let kl = tape.scale(kl, config.kl_beta);
            term = tape.sub(term, kl)?;
        }
        terms.push(term);
    }
    let total = tape.add_all(&terms)?;
    let loss = tape.scale(total, -weight);
    let grads = tape.backward(loss)?;
    Ok(Objective {
        loss: tape.value(loss).item(),
        ratio_sum,
        clipped,
        terms: traj.horizon(),
        model_grads: phase
            .trains_model()
            .then(|| collect_grads(&tape, &grads, &dvars)),
        schedule_grads: pvars.map(|pv| collect_grads(&tape, &grads, &pv)),
    })
}

fn kl_on_tape(
    tape: &mut Tape,
    denoiser: &Denoiser,
    dvars: &[Var],
    reference: &Denoiser,
    cond: Condition,
    rec: &StepRecord,
    step: Timestep,
) -> Result<Var> {
    let fwd = denoiser.forward(tape, dvars, &rec.state_before, cond, step)?;
    let lp = denoiser.guided_log_probs(
        tape,
        dvars,
        fwd.logits,
        &rec.state_before,
        step,
        rec.schedule.s,
        rec.schedule.tau_s,
    )?;
    let rows: Vec<usize> = rec.committed.iter().map(|&(i, _)| i).collect();
    let q = guided_log_probs_value(reference, rec, cond, step)?;
    let mut q_rows = Vec::with_capacity(rows.len() * q.cols());
    for &i in &rows {
        q_rows.extend_from_slice(q.row(i));
    }
    let q_rows = tape.constant(Tensor::new(vec![rows.len(), q.cols()], q_rows)?);
    let lp_rows = tape.gather_rows(lp, &rows)?;
    let p = tape.exp(lp_rows);
    let diff = tape.sub(lp_rows, q_rows)?;
    let prod = tape.mul(p, diff)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, 1.0 / rows.len() as f64))
}

/// Surrogate value, statistics and gradients over a batch of groups.
pub struct BatchObjective {
    pub stats: SurrogateStats,
    pub model_grads: Option<Vec<Tensor>>,
    pub schedule_grads: Option<Vec<Tensor>>,
}

/// Evaluate the clipped surrogate over `groups` for `phase` and
/// accumulate gradients trajectory by trajectory in a fixed order.
pub fn batch_objective(
    denoiser: &Denoiser,
    policy: Option<&SchedulePolicy>,
    reference: Option<&Denoiser>,
    groups: &[RolloutGroup],
    phase: Phase,
    config: &TrainConfig,
) -> Result<BatchObjective> {
    let count: usize = groups.iter().map(|g| g.trajectories.len()).sum();
    if count == 0 {
        return Err(invalid("no trajectories to optimize"));
    }
    let mut loss = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let mut terms = 0usize;
    let mut model_grads: Option<Vec<Tensor>> = None;
    let mut schedule_grads: Option<Vec<Tensor>> = None;
    for group in groups {
        for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
            let weight = 1.0 / (count * traj.horizon()) as f64;
            let obj = trajectory_objective(denoiser, policy, reference, traj, adv, phase, config, weight)?;
            loss += obj.loss;
            ratio_sum += obj.ratio_sum;
            clipped += obj.clipped;
            terms += obj.terms;
            merge(&mut model_grads, obj.model_grads);
            merge(&mut schedule_grads, obj.schedule_grads);
        }
    }
    Ok(BatchObjective {
        stats: SurrogateStats {
            loss,
            mean_ratio: ratio_sum / terms as f64,
            clip_fraction: clipped as f64 / terms as f64,
        },
        model_grads,
        schedule_grads,
    })
}

fn merge(into: &mut Option<Vec<Tensor>>, delta: Option<Vec<Tensor>>) {
    match (into.as_mut(), delta) {
        (Some(acc), Some(d)) => accumulate(acc, &d),
        (None, Some(d)) => *into = Some(d),
        _ => {}
    }
}

fn check_compatible(config: &TrainConfig, state: &TrainState, ctx: &RunContext<'_>) -> Result<()> {
    config.validate()?;
    ctx.task.validate()?;
    ctx.rewards.validate()?;
    let dc = state.denoiser.config();
    if dc.vocab_size != ctx.task.vocab_size
        || dc.seq_len != ctx.task.seq_len
        || dc.num_classes != ctx.task.num_classes
    {
        return Err(invalid(format!(
            "denoiser (V={}, N={}, C={}) does not fit the task (V={}, N={}, C={})",
            dc.vocab_size,
            dc.seq_len,
            dc.num_classes,
            ctx.task.vocab_size,
            ctx.task.seq_len,
            ctx.task.num_classes
        )));
    }
    if let Some(p) = &state.policy {
        if p.config().feature_dim != dc.hidden {
            return Err(invalid(format!(
                "policy reads {} features, denoiser produces {}",
                p.config().feature_dim,
                dc.hidden
            )));
        }
    }
    if config.kl_beta > 0.0 && ctx.reference.is_none() {
        return Err(invalid("kl_beta > 0 needs a reference model"));
    }
    Ok(())
}

fn require_policy(state: &TrainState) -> Result<()> {
    if state.policy.is_none() || state.schedule_moments.is_none() {
        return Err(invalid("this mode trains a scheduling policy but none was given"));
    }
    Ok(())
}

/// Conditions drawn for update `index`.
pub fn update_conditions(task: &TaskSpec, batch: usize, rng: &RngState, index: u64) -> Vec<Condition> {
    let mut r = rng.fork_indexed("update", index).fork("conditions");
    (0..batch)
        .map(|_| Condition::Class(r.below(task.num_classes)))
        .collect()
}

/// Collect a fresh batch under the current snapshot and take
/// `epochs_per_batch` gradient steps on the blocks `phase` trains.
pub fn run_update(
    config: &TrainConfig,
    state: &mut TrainState,
    ctx: &RunContext<'_>,
    phase: Phase,
) -> Result<UpdateOutcome> {
    let index = state.updates;
    let steps = config.steps;
    let preset = PresetSchedule::table1(steps)?;
    let source = match (&state.policy, phase) {
        (None, Phase::Model) => ScheduleSource::Preset(&preset),
        (None, _) => return Err(invalid("schedule updates need a scheduling policy")),
        (Some(_), Phase::Schedule) if !(config.sigma > 0.0) => {
            return Err(invalid("schedule updates need sigma > 0"))
        }
        // The frozen schedule acts through its mean while the model learns.
        (Some(p), Phase::Model) => ScheduleSource::Policy { policy: p, sigma: 0.0 },
        (Some(p), _) => ScheduleSource::Policy {
            policy: p,
            sigma: config.sigma,
        },
    };
    let update_rng = ctx.rng.fork_indexed("update", index);
    let conditions = update_conditions(ctx.task, config.batch_conditions, ctx.rng, index);
    let group_size = config.group_size(phase);
    let mut groups = Vec::with_capacity(conditions.len());
    for (b, &cond) in conditions.iter().enumerate() {
        groups.push(collect_group(
            &state.denoiser,
            source,
            cond,
            group_size,
            steps,
            ctx.task,
            ctx.rewards,
            &update_rng.fork_indexed("group", b as u64),
        )?);
    }
    let count: usize = groups.iter().map(|g| g.rewards.len()).sum();
    let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / count as f64;
    state.env_steps += config.env_steps_per_update(phase);

    let frozen_model = (!phase.trains_model()).then(|| state.model_fingerprint());
    let frozen_schedule = if phase.trains_schedule() {
        None
    } else {
        state.schedule_fingerprint()
    };

    let mut metrics = Vec::with_capacity(config.epochs_per_batch);
    for epoch in 0..config.epochs_per_batch {
        let obj = batch_objective(
            &state.denoiser,
            state.policy.as_ref(),
            ctx.reference,
            &groups,
            phase,
            config,
        )?;
        let mut all = Vec::new();
        all.extend(obj.model_grads.iter().flatten().cloned());
        all.extend(obj.schedule_grads.iter().flatten().cloned());
        let grad_norm = global_norm(&all);
        if let Some(g) = &obj.model_grads {
            Adam::new(config.lr_model).step(
                state.denoiser.params_mut().tensors_mut(),
                g,
                &mut state.model_moments,
            )?;
        }
        if let Some(g) = &obj.schedule_grads {
            let policy = state.policy.as_mut().expect("checked above");
            let moments = state
                .schedule_moments
                .as_mut()
                .ok_or_else(|| invalid("schedule moments missing"))?;
            Adam::new(config.lr_schedule).step(policy.params_mut().tensors_mut(), g, moments)?;
        }
        metrics.push(UpdateMetrics {
            update: index,
            phase,
            epoch,
            mean_reward,
            loss: obj.stats.loss,
            mean_ratio: obj.stats.mean_ratio,
            clip_fraction: obj.stats.clip_fraction,
            grad_norm,
            env_steps: state.env_steps,
        });
    }

    let model_fingerprint = state.model_fingerprint();
    let schedule_fingerprint = state.schedule_fingerprint();
    if frozen_model.is_some_and(|f| f != model_fingerprint) {
        return Err(contract(format!("model parameters changed during a {phase} update")));
    }
    if frozen_schedule.is_some_and(|f| Some(f) != schedule_fingerprint) {
        return Err(contract(format!("schedule parameters changed during a {phase} update")));
    }
    state.updates += 1;
    Ok(UpdateOutcome {
        metrics,
        groups,
        model_fingerprint,
        schedule_fingerprint,
    })
}

/// Model-only updates under the fixed `table1` preset.
pub fn naive_train(
    config: &TrainConfig,
    state: &mut TrainState,
    ctx: &RunContext<'_>,
    updates: usize,
    sink: &mut UpdateSink<'_>,
) -> Result<()> {
    check_compatible(config, state, ctx)?;
    if state.policy.is_some() {
        return Err(invalid("naive training runs without a scheduling policy"));
    }
    for _ in 0..updates {
        sink(&run_update(config, state, ctx, Phase::Model)?)?;
    }
    Ok(())
}

/// `cycles` rounds of `model_updates` model-phase updates followed by
/// `schedule_updates` schedule-phase updates.
pub fn alternating_train(
    config: &TrainConfig,
    state: &mut TrainState,
    ctx: &RunContext<'_>,
    sink: &mut UpdateSink<'_>,
) -> Result<()> {
    check_compatible(config, state, ctx)?;
    require_policy(state)?;
    if !(config.sigma > 0.0) {
        return Err(invalid("schedule updates need sigma > 0"));
    }
    for _ in 0..config.cycles {
        for _ in 0..config.model_updates {
            sink(&run_update(config, state, ctx, Phase::Model)?)?;
        }
        for _ in 0..config.schedule_updates {
            sink(&run_update(config, state, ctx, Phase::Schedule)?)?;
        }
    }
    Ok(())
}

/// Updates that step both policies through the product ratio. With
/// `sigma = 0` the schedule is deterministic and only the model moves.
pub fn joint_train(
    config: &TrainConfig,
    state: &mut TrainState,
    ctx: &RunContext<'_>,
    updates: usize,
    sink: &mut UpdateSink<'_>,
) -> Result<()> {
    check_compatible(config, state, ctx)?;
    require_policy(state)?;
    for _ in 0..updates {
        sink(&run_update(config, state, ctx, Phase::Joint)?)?;
    }
    Ok(())
}

/// Run `mode` with the budget matched to the alternating schedule.
pub fn train(
    config: &TrainConfig,
    mode: TrainMode,
    state: &mut TrainState,
    ctx: &RunContext<'_>,
    sink: &mut UpdateSink<'_>,
) -> Result<()> {
    let updates = config.equalized_updates(mode);
    match mode {
        TrainMode::Naive => naive_train(config, state, ctx, updates, sink),
        TrainMode::CoJoint => joint_train(config, state, ctx, updates, sink),
        TrainMode::CoAlternating => alternating_train(config, state, ctx, sink),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::sampler::ScheduleAction;
    use crate::schedule::{reference_mean, SchedulePolicyConfig};
    use proptest::prelude::*;

    fn small_task() -> TaskSpec {
        TaskSpec::generate(6, 5, 3, 0.1, 3).unwrap()
    }

    fn small_denoiser(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            vocab_size: 6,
            seq_len: 5,
            num_classes: 3,
            hidden: 6,
            layers: 1,
        };
        Denoiser::init(cfg, &mut RngState::new(seed))
    }

    fn small_policy(seed: u64, sigma: f64) -> SchedulePolicy {
        SchedulePolicy::new(
            SchedulePolicyConfig {
                feature_dim: 6,
                hidden: 3,
                sigma,
            },
            &mut RngState::new(seed),
        )
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            group_size_model: 3,
            group_size_schedule: 3,
            steps: 4,
            sigma: 0.3,
            model_updates: 2,
            schedule_updates: 2,
            cycles: 1,
            batch_conditions: 2,
            ..TrainConfig::default()
        }
    }

    fn policy_group(den: &Denoiser, pol: &SchedulePolicy, sigma: f64, seed: u64) -> RolloutGroup {
        collect_group(
            den,
            ScheduleSource::Policy { policy: pol, sigma },
            Condition::Class(1),
            4,
            4,
            &small_task(),
            &RewardSpec::default(),
            &RngState::new(seed),
        )
        .unwrap()
    }

    fn perturb(params: &mut crate::params::ParamStore, seed: u64, scale: f64) {
        let mut rng = RngState::new(seed);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v += scale * rng.normal();
            }
        }
    }

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[1.0, 2.0, 3.0]).unwrap();
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((a[0] + expect).abs() < 1e-7 && a[1].abs() < 1e-12 && (a[2] - expect).abs() < 1e-7);
        assert!((a[2] - 1.2247).abs() < 1e-4);
        assert_eq!(compute_advantages(&[0.4; 5]).unwrap(), vec![0.0; 5]);
        assert!(compute_advantages(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn advantages_normalized(r in proptest::collection::vec(0.0f64..1.0, 2..12), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            // The guard shrinks the spread by sd / (sd + eps); keep that below 1e-6.
            prop_assume!(r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n > 1e-4);
            let a = compute_advantages(&r).unwrap();
            let m = a.iter().sum::<f64>() / n;
            let sd = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((sd - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
            let scaled: Vec<f64> = r.iter().map(|x| x * scale).collect();
            for (x, y) in a.iter().zip(compute_advantages(&shifted).unwrap()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            // Exact up to the guard: A * eps * |1/sd - 1/(c sd)|.
            let sd_r = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            let guard = ADVANTAGE_EPS * (1.0 / sd_r - 1.0 / (scale * sd_r)).abs();
            for (x, y) in a.iter().zip(compute_advantages(&scaled).unwrap()) {
                prop_assert!((x - y).abs() < 1e-10 + 2.0 * x.abs() * guard);
            }
        }

        #[test]
        fn schedule_ratio_positive(shift in proptest::collection::vec(-20.0f64..20.0, 4)) {
            let den = small_denoiser(1);
            let mut pol = small_policy(2, 0.3);
            let g = policy_group(&den, &pol, 0.3, 3);
            let b2 = pol.params().names().iter().position(|n| n == "b2").unwrap();
            pol.params_mut().tensors_mut()[b2].data_mut().copy_from_slice(&shift);
            let r = schedule_ratio(&den, &pol, &g.trajectories[0], 1, 0.3).unwrap();
            prop_assert!(r.is_finite() && r >= 0.0);
        }
    }

    #[test]
    fn surrogate_examples() {
        let a = [0.5, -1.5, 1.0];
        let ones = vec![vec![1.0; 3]; 3];
        let s = clipped_surrogate(&ones, &a, 0.2).unwrap();
        assert_eq!(s.loss, -(a.iter().sum::<f64>() / 3.0));
        assert_eq!(s.clip_fraction, 0.0);
        assert_eq!(clipped_term(2.0, 1.0, 0.2), 1.2);
        assert_eq!(clipped_term(0.5, -1.0, 0.2), -0.8);
        let s = clipped_surrogate(&[vec![2.0, 1.0], vec![1.1, 0.5]], &[1.0, -1.0], 0.2).unwrap();
        assert_eq!(s.clip_fraction, 0.5);
        assert!((s.loss + (1.2 + 1.0 - 1.1 - 0.8) / 4.0).abs() < 1e-15);
        assert!(clipped_surrogate(&[vec![1.0]], &[1.0, 2.0], 0.2).is_err());
    }

    /// A one-step trajectory from the all-MASK state committing `committed`.
    fn manual_trajectory(committed: Vec<(usize, u16)>, stored: f64) -> Trajectory {
        let state = TokenSequence::all_masked(16, 16);
        let mut fin = state.clone();
        for &(i, v) in &committed {
            fin.set(i, v);
        }
        Trajectory {
            condition: Condition::Class(0),
            steps: vec![StepRecord {
                state_before: state,
                schedule: ScheduleAction {
                    r: 0.0,
                    tau_s: 1.0,
                    tau_r: 1.0,
                    s: 1.0,
                },
                committed,
                token_logprobs: vec![],
                model_logprob_sum: stored,
                schedule_u: None,
                schedule_logprob: None,
            }],
            final_seq: fin,
            reward: None,
        }
    }

    #[test]
    fn model_ratio_quotients() {
        let mut d = Denoiser::zeros(DenoiserConfig::default());
        let ob = d.params().names().iter().position(|n| n == "out_b").unwrap();
        // p(token 1) = 0.6, every other token 0.4 / 15.
        d.params_mut().tensors_mut()[ob].data_mut()[0] = 22.5f64.ln();
        let r = model_ratio(&d, &manual_trajectory(vec![(0, 1)], 0.3f64.ln()), 0).unwrap();
        assert!((r - 2.0).abs() < 1e-12, "{r}");
        let p2: f64 = 0.4 / 15.0;
        let stored = 0.3f64.ln() + (2.0 * p2).ln();
        let r = model_ratio(&d, &manual_trajectory(vec![(0, 1), (1, 2)], stored), 0).unwrap();
        assert!((r - 1.0).abs() < 1e-12, "{r}");
        assert!(model_ratio(&d, &manual_trajectory(vec![], 0.0), 0).is_err());
    }

    #[test]
    fn schedule_ratio_shifted_mean() {
        let d = small_denoiser(4);
        let mut pol = small_policy(5, 0.3);
        let sigma = 0.3;
        let mut traj = manual_trajectory(vec![], 0.0);
        traj.steps[0].state_before = TokenSequence::all_masked(5, 6);
        let step = Timestep::new(0, 1).unwrap();
        let old_mean = reference_mean(step);
        let mut u = old_mean;
        u[0] += sigma;
        traj.steps[0].schedule_u = Some(u);
        traj.steps[0].schedule_logprob = Some(action_log_prob(&old_mean, sigma, &u).unwrap());
        let r = schedule_ratio(&d, &pol, &traj, 0, sigma).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        let b2 = pol.params().names().iter().position(|n| n == "b2").unwrap();
        pol.params_mut().tensors_mut()[b2].data_mut()[0] = sigma;
        let r = schedule_ratio(&d, &pol, &traj, 0, sigma).unwrap();
        assert!((r - 0.5f64.exp()).abs() < 1e-12, "{r}");
        assert!(matches!(
            schedule_ratio(&d, &pol, &traj, 0, 0.0),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let d = small_denoiser(6);
        let pol = small_policy(7, 0.3);
        let g = policy_group(&d, &pol, 0.3, 8);
        for traj in &g.trajectories {
            for t in 0..traj.horizon() {
                assert!(kl_regularizer(&d, &d, traj, t).unwrap().abs() < 1e-12);
            }
        }
        let mut other = d.clone();
        perturb(other.params_mut(), 9, 0.2);
        let traj = &g.trajectories[0];
        let t = (0..traj.horizon()).find(|&t| !traj.steps[t].committed.is_empty()).unwrap();
        assert!(kl_regularizer(&other, &d, traj, t).unwrap() > 0.0);
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        assert!((categorical_kl(&p, &q).unwrap() - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn zero_beta_leaves_loss_bitwise() {
        let d = small_denoiser(10);
        let pol = small_policy(11, 0.3);
        let g = vec![policy_group(&d, &pol, 0.3, 12)];
        let mut moved = d.clone();
        perturb(moved.params_mut(), 13, 0.05);
        let cfg = small_config();
        let a = batch_objective(&moved, Some(&pol), None, &g, Phase::Joint, &cfg).unwrap();
        let b = batch_objective(&moved, Some(&pol), Some(&d), &g, Phase::Joint, &cfg).unwrap();
        assert_eq!(a.stats.loss.to_bits(), b.stats.loss.to_bits());
        let with_kl = TrainConfig { kl_beta: 0.5, ..cfg };
        let c = batch_objective(&moved, Some(&pol), Some(&d), &g, Phase::Joint, &with_kl).unwrap();
        assert!(c.stats.loss > a.stats.loss);
    }

    #[test]
    fn first_update_identity() {
        let d = small_denoiser(14);
        let pol = small_policy(15, 0.3);
        let groups: Vec<_> = (0..3).map(|s| policy_group(&d, &pol, 0.3, 100 + s)).collect();
        for g in &groups {
            for traj in &g.trajectories {
                for t in 0..traj.horizon() {
                    if !traj.steps[t].committed.is_empty() {
                        assert!((model_ratio(&d, traj, t).unwrap() - 1.0).abs() < 1e-10);
                        assert!((joint_ratio(&d, &pol, traj, t, 0.3).unwrap() - 1.0).abs() < 1e-10);
                    }
                    assert!((schedule_ratio(&d, &pol, traj, t, 0.3).unwrap() - 1.0).abs() < 1e-10);
                }
            }
        }
        let mean_a = groups.iter().flat_map(|g| &g.advantages).sum::<f64>() / 12.0;
        for phase in [Phase::Model, Phase::Schedule, Phase::Joint] {
            let obj = batch_objective(&d, Some(&pol), None, &groups, phase, &small_config()).unwrap();
            assert!((obj.stats.loss + mean_a).abs() < 1e-10, "{phase}");
            assert_eq!(obj.stats.clip_fraction, 0.0);
            assert!((obj.stats.mean_ratio - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn factorization_identity() {
        let d = small_denoiser(16);
        let pol = small_policy(17, 0.3);
        let g = policy_group(&d, &pol, 0.3, 18);
        for seed in 0..5 {
            let mut d2 = d.clone();
            perturb(d2.params_mut(), 50 + seed, 0.1);
            let mut p2 = pol.clone();
            perturb(p2.params_mut(), 60 + seed, 0.1);
            for traj in &g.trajectories {
                for t in 0..traj.horizon() {
                    if traj.steps[t].committed.is_empty() {
                        continue;
                    }
                    let m = model_ratio(&d2, traj, t).unwrap();
                    let s = schedule_ratio(&d2, &p2, traj, t, 0.3).unwrap();
                    let j = joint_ratio(&d2, &p2, traj, t, 0.3).unwrap();
                    assert!((j - m * s).abs() <= 1e-12 * j.abs().max(1.0), "{j} vs {}", m * s);
                }
            }
        }
    }

    fn check_gradients(phase: Phase, kl_beta: f64) {
        let d = small_denoiser(20);
        let pol = small_policy(21, 0.3);
        assert!(d.num_params() + pol.num_params() <= 2000);
        let groups = vec![policy_group(&d, &pol, 0.3, 22), policy_group(&d, &pol, 0.3, 23)];
        let mut d2 = d.clone();
        perturb(d2.params_mut(), 24, 0.05);
        let mut p2 = pol.clone();
        perturb(p2.params_mut(), 25, 0.05);
        let cfg = TrainConfig {
            kl_beta,
            clip_eps: 0.9,
            ..small_config()
        };
        let reference = Some(&d);
        let obj = batch_objective(&d2, Some(&p2), reference, &groups, phase, &cfg).unwrap();
        let loss = |den: &Denoiser, pol: &SchedulePolicy| {
            batch_objective(den, Some(pol), reference, &groups, phase, &cfg)
                .unwrap()
                .stats
                .loss
        };
        let h = 1e-5;
        let mut rng = RngState::new(26);
        let mut probes = 0;
        while probes < 25 {
            let model_side = phase == Phase::Model || (phase == Phase::Joint && rng.bernoulli(0.5));
            let (fd, analytic) = if model_side {
                let pi = rng.below(d2.params().len());
                let k = rng.below(d2.params().get(pi).len());
                let mut plus = d2.clone();
                plus.params_mut().tensors_mut()[pi].data_mut()[k] += h;
                let mut minus = d2.clone();
                minus.params_mut().tensors_mut()[pi].data_mut()[k] -= h;
                let fd = (loss(&plus, &p2) - loss(&minus, &p2)) / (2.0 * h);
                (fd, obj.model_grads.as_ref().unwrap()[pi].data()[k])
            } else {
                let pi = rng.below(p2.params().len());
                let k = rng.below(p2.params().get(pi).len());
                let mut plus = p2.clone();
                plus.params_mut().tensors_mut()[pi].data_mut()[k] += h;
                let mut minus = p2.clone();
                minus.params_mut().tensors_mut()[pi].data_mut()[k] -= h;
                let fd = (loss(&d2, &plus) - loss(&d2, &minus)) / (2.0 * h);
                (fd, obj.schedule_grads.as_ref().unwrap()[pi].data()[k])
            };
            let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-4, "{phase}: analytic {analytic} vs fd {fd}");
            probes += 1;
        }
        if phase == Phase::Model {
            assert!(obj.schedule_grads.is_none());
        }
        if phase == Phase::Schedule {
            assert!(obj.model_grads.is_none());
        }
    }

    #[test]
    fn surrogate_gradients_match_finite_differences() {
        check_gradients(Phase::Model, 0.0);
        check_gradients(Phase::Schedule, 0.0);
        check_gradients(Phase::Joint, 0.0);
        check_gradients(Phase::Model, 0.3);
    }

    fn run(mode: TrainMode, seed: u64) -> (Vec<UpdateMetrics>, Vec<UpdateOutcome>) {
        let task = small_task();
        let rewards = RewardSpec::default();
        let rng = RngState::new(seed);
        let ctx = RunContext {
            task: &task,
            rewards: &rewards,
            reference: None,
            rng: &rng,
        };
        let policy = mode.uses_schedule_policy().then(|| small_policy(31, 0.3));
        let mut state = TrainState::new(small_denoiser(30), policy);
        let mut outcomes = Vec::new();
        let mut sink = |o: &UpdateOutcome| {
            outcomes.push(o.clone());
            Ok(())
        };
        train(&small_config(), mode, &mut state, &ctx, &mut sink).unwrap();
        let metrics = outcomes.iter().flat_map(|o| o.metrics.clone()).collect();
        (metrics, outcomes)
    }

    #[test]
    fn alternating_phases_are_isolated() {
        let (metrics, outcomes) = run(TrainMode::CoAlternating, 40);
        let phases: Vec<Phase> = metrics.iter().map(|m| m.phase).collect();
        assert_eq!(phases, [Phase::Model, Phase::Model, Phase::Schedule, Phase::Schedule]);
        let first = TrainState::new(small_denoiser(30), Some(small_policy(31, 0.3)));
        assert_eq!(outcomes[0].schedule_fingerprint, first.schedule_fingerprint());
        assert_eq!(outcomes[1].schedule_fingerprint, first.schedule_fingerprint());
        assert_ne!(outcomes[1].model_fingerprint, first.model_fingerprint());
        assert_eq!(outcomes[2].model_fingerprint, outcomes[1].model_fingerprint);
        assert_eq!(outcomes[3].model_fingerprint, outcomes[1].model_fingerprint);
        assert_ne!(outcomes[3].schedule_fingerprint, first.schedule_fingerprint());
        for m in &metrics {
            assert!((0.0..=1.0).contains(&m.clip_fraction));
            assert_eq!(m.clip_fraction, 0.0);
        }
    }

    #[test]
    fn runs_are_deterministic_and_budgets_match() {
        for mode in [TrainMode::Naive, TrainMode::CoJoint, TrainMode::CoAlternating] {
            let (a, _) = run(mode, 41);
            let (b, _) = run(mode, 41);
            assert_eq!(a, b);
            let steps = small_config().alternating_env_steps();
            assert_eq!(a.last().unwrap().env_steps, steps, "{mode}");
        }
    }

    #[test]
    fn first_group_shared_by_naive_and_alternating() {
        let (_, naive) = run(TrainMode::Naive, 42);
        let (_, co) = run(TrainMode::CoAlternating, 42);
        for (a, b) in naive[0].groups.iter().zip(&co[0].groups) {
            assert_eq!(a.rewards, b.rewards);
            for (x, y) in a.trajectories.iter().zip(&b.trajectories) {
                assert_eq!(x.final_seq, y.final_seq);
                for (s, t) in x.steps.iter().zip(&y.steps) {
                    assert_eq!(s.committed, t.committed);
                    assert_eq!(s.model_logprob_sum.to_bits(), t.model_logprob_sum.to_bits());
                }
            }
        }
    }

    #[test]
    fn deterministic_joint_reduces_to_naive() {
        let task = small_task();
        let rewards = RewardSpec::default();
        let rng = RngState::new(43);
        let ctx = RunContext {
            task: &task,
            rewards: &rewards,
            reference: None,
            rng: &rng,
        };
        let cfg = TrainConfig {
            sigma: 0.0,
            ..small_config()
        };
        let rewards_of = |policy: Option<SchedulePolicy>, joint: bool| {
            let mut state = TrainState::new(small_denoiser(30), policy);
            let mut out = Vec::new();
            let mut sink = |o: &UpdateOutcome| {
                out.push(o.groups.iter().map(|g| g.rewards.clone()).collect::<Vec<_>>());
                Ok(())
            };
            if joint {
                joint_train(&cfg, &mut state, &ctx, 4, &mut sink).unwrap();
            } else {
                naive_train(&cfg, &mut state, &ctx, 4, &mut sink).unwrap();
            }
            out
        };
        let naive = rewards_of(None, false);
        let joint = rewards_of(Some(small_policy(31, 0.0)), true);
        assert_eq!(naive, joint);
    }

    #[test]
    fn invalid_configs_rejected_before_mutation() {
        let task = small_task();
        let rewards = RewardSpec::default();
        let rng = RngState::new(44);
        let ctx = RunContext {
            task: &task,
            rewards: &rewards,
            reference: None,
            rng: &rng,
        };
        let bad = [
            TrainConfig { group_size_model: 1, ..small_config() },
            TrainConfig { clip_eps: 1.0, ..small_config() },
            TrainConfig { model_updates: 0, ..small_config() },
            TrainConfig { discount: 0.9, ..small_config() },
            TrainConfig { kl_beta: 0.1, ..small_config() },
        ];
        for cfg in bad {
            let mut state = TrainState::new(small_denoiser(30), Some(small_policy(31, 0.3)));
            let before = state.model_fingerprint();
            let err = alternating_train(&cfg, &mut state, &ctx, &mut |_| Ok(())).unwrap_err();
            assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
            assert_eq!(state.model_fingerprint(), before);
            assert_eq!(state.updates, 0);
        }
        let mut state = TrainState::new(small_denoiser(30), None);
        assert!(alternating_train(&small_config(), &mut state, &ctx, &mut |_| Ok(())).is_err());
    }

    #[test]
    fn collect_group_streams_are_independent() {
        let d = small_denoiser(45);
        let pol = small_policy(46, 0.3);
        let g = policy_group(&d, &pol, 0.3, 47);
        assert!(g.rewards.iter().all(|r| r.is_finite()));
        assert!(g.trajectories.iter().all(|t| t.reward.is_some()));
        assert_ne!(g.trajectories[0], g.trajectories[1]);
        assert_eq!(g, policy_group(&d, &pol, 0.3, 47));
        assert_eq!("co-alternating".parse::<TrainMode>().unwrap(), TrainMode::CoAlternating);
        assert!("joint".parse::<TrainMode>().is_err());
    }
}
