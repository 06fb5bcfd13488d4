//! Iterative masked-diffusion decoding with per-step schedule actions and
//! full trajectory recording.
//!
//! One step fills every masked position from the guided, tempered model
//! distribution, scores each new token by its log-probability, then returns
//! `min(ceil(r * N), #new)` of the new tokens to MASK, drawn without
//! replacement with weights `softmax(-confidence / tau_r)`. Tokens that
//! survive a step are never touched again.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser, Timestep, TokenSequence, MASK, MIN_TEMPERATURE};
use crate::error::{invalid, Result};
use crate::numerics::{RngState, Tape, Tensor};
use crate::schedule::{
    action_log_prob, sample_action, to_array, PresetSchedule, SchedulePolicy, Unconstrained,
};

/// Per-step inference schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleAction {
    /// Remask ratio in `[0, 1]`.
    pub r: f64,
    /// Sampling temperature; below `MIN_TEMPERATURE` sampling is greedy.
    pub tau_s: f64,
    /// Remask temperature.
    pub tau_r: f64,
    /// Classifier-free guidance scale.
    pub s: f64,
}

impl ScheduleAction {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.r, self.tau_s, self.tau_r, self.s]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(invalid(format!("non-finite schedule action {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(invalid(format!("remask ratio {} outside [0, 1]", self.r)));
        }
        if self.tau_s <= 0.0 || self.tau_r <= 0.0 {
            return Err(invalid(format!("temperatures must be positive: {self:?}")));
        }
        if self.s < 0.0 {
            return Err(invalid(format!("guidance scale {} is negative", self.s)));
        }
        Ok(())
    }
}

/// Confidence of a position after the sampling step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Confidence {
    /// Committed in an earlier step; never eligible for remasking.
    Committed,
    /// Log-probability of the token sampled this step.
    Score(f64),
}

/// `ceil(r * n)`, ignoring float noise just above an integer.
pub fn remask_count(r: f64, n: usize) -> usize {
    let x = r * n as f64;
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Outcome of one sampling step.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub seq: TokenSequence,
    pub confidences: Vec<Confidence>,
}

/// Fill every masked position from `log_probs` (`[N, V]`).
pub fn sample_masked(
    seq: &TokenSequence,
    log_probs: &Tensor,
    tau_s: f64,
    rng: &mut RngState,
) -> Sampled {
    let mut out = seq.clone();
    let mut confidences = vec![Confidence::Committed; seq.len()];
    for i in seq.masked_positions() {
        let row = log_probs.row(i);
        let j = if tau_s < MIN_TEMPERATURE {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        } else {
            let weights: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            rng.categorical(&weights)
        };
        out.set(i, j as u16 + 1);
        confidences[i] = Confidence::Score(row[j]);
    }
    Sampled {
        seq: out,
        confidences,
    }
}

/// Sampling step: returns the filled sequence and per-position confidences.
pub fn sampling_step(
    denoiser: &Denoiser,
    seq: &TokenSequence,
    cond: Condition,
    step: Timestep,
    sched: &ScheduleAction,
    rng: &mut RngState,
) -> Result<Sampled> {
    sched.validate()?;
    let mut tape = Tape::new();
    let bound = denoiser.bind(&mut tape, false);
    let fwd = denoiser.forward(&mut tape, &bound, seq, cond, step)?;
    let lp = denoiser.guided_log_probs(&mut tape, &bound, fwd.logits, seq, step, sched.s, sched.tau_s)?;
    Ok(sample_masked(seq, tape.value(lp), sched.tau_s, rng))
}

/// Remask step. Returns the new sequence and the remasked positions.
pub fn remask_step(
    filled: &TokenSequence,
    confidences: &[Confidence],
    sched: &ScheduleAction,
    rng: &mut RngState,
) -> Result<(TokenSequence, Vec<usize>)> {
    if !(0.0..=1.0).contains(&sched.r) {
        return Err(invalid(format!("remask ratio {} outside [0, 1]", sched.r)));
    }
    if !(sched.tau_r > 0.0) {
        return Err(invalid("remask temperature must be positive"));
    }
    if confidences.len() != filled.len() {
        return Err(invalid("one confidence per position is required"));
    }
    let mut eligible: Vec<(usize, f64)> = confidences
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match c {
            Confidence::Score(s) => Some((i, -s / sched.tau_r)),
            Confidence::Committed => None,
        })
        .collect();
    let k = remask_count(sched.r, filled.len()).min(eligible.len());
    let mut out = filled.clone();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let max = eligible
            .iter()
            .map(|e| e.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = eligible.iter().map(|e| (e.1 - max).exp()).collect();
        let pick = rng.categorical(&weights);
        let (pos, _) = eligible.remove(pick);
        out.set(pos, MASK);
        chosen.push(pos);
    }
    chosen.sort_unstable();
    Ok((out, chosen))
}

/// Everything recorded about one denoising step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state_before: TokenSequence,
    pub schedule: ScheduleAction,
    /// Positions that were masked before the step and hold a token after it.
    pub committed: Vec<(usize, u16)>,
    pub token_logprobs: Vec<f64>,
    pub model_logprob_sum: f64,
    /// Unconstrained schedule draw, when a stochastic source produced it.
    pub schedule_u: Option<Unconstrained>,
    pub schedule_logprob: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: Condition,
    pub steps: Vec<StepRecord>,
    pub final_seq: TokenSequence,
    pub reward: Option<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// One line of the rollout JSONL format.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| invalid(format!("bad rollout line: {e}")))
    }
}

/// Where per-step schedule actions come from.
#[derive(Clone, Copy, Debug)]
pub enum ScheduleSource<'a> {
    Preset(&'a PresetSchedule),
    /// Learned policy conditioned on the current state.
    Policy {
        policy: &'a SchedulePolicy,
        sigma: f64,
    },
    /// Fixed per-step means in unconstrained space, e.g. interpolated ones.
    Means {
        means: &'a [Unconstrained],
        sigma: f64,
    },
}

/// Roll out one trajectory from the all-MASK state.
///
/// Token draws and schedule draws use separate forks of `rng`, so a
/// deterministic schedule source never perturbs token sampling.
pub fn generate_trajectory(
    denoiser: &Denoiser,
    source: ScheduleSource<'_>,
    cond: Condition,
    steps: usize,
    rng: &RngState,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(invalid("a trajectory needs at least one step"));
    }
    match source {
        ScheduleSource::Preset(p) if p.steps() != steps => {
            return Err(invalid(format!(
                "preset has {} steps, trajectory {steps}",
                p.steps()
            )))
        }
        ScheduleSource::Means { means, .. } if means.len() != steps => {
            return Err(invalid(format!(
                "{} schedule means for {steps} steps",
                means.len()
            )))
        }
        _ => {}
    }
    let cfg = denoiser.config();
    let mut token_rng = rng.fork("tokens");
    let mut sched_rng = rng.fork("schedule");
    let mut seq = TokenSequence::all_masked(cfg.seq_len, cfg.vocab_size);
    let mut records = Vec::with_capacity(steps);

    for t in 0..steps {
        let step = Timestep::new(t, steps)?;
        let mut tape = Tape::new();
        let bound = denoiser.bind(&mut tape, false);
        let fwd = denoiser.forward(&mut tape, &bound, &seq, cond, step)?;

        let (mut action, schedule_u, schedule_logprob) = match source {
            ScheduleSource::Preset(p) => (p.raw_action(t), None, None),
            ScheduleSource::Policy { policy, sigma } => {
                let pbound = policy.bind(&mut tape, false);
                let pooled = tape.mean_rows(fwd.features);
                let mean = policy.mean_on_tape(&mut tape, &pbound, pooled, step)?;
                let mean = to_array(tape.value(mean));
                let (u, a) = sample_action(&mean, sigma, &mut sched_rng)?;
                let lp = (sigma > 0.0)
                    .then(|| action_log_prob(&mean, sigma, &u))
                    .transpose()?;
                (a, Some(u), lp)
            }
            ScheduleSource::Means { means, sigma } => {
                let (u, a) = sample_action(&means[t], sigma, &mut sched_rng)?;
                let lp = (sigma > 0.0)
                    .then(|| action_log_prob(&means[t], sigma, &u))
                    .transpose()?;
                (a, Some(u), lp)
            }
        };
        if step.is_final() {
            action.r = 0.0;
        }
        action.validate()?;

        let lp = denoiser.guided_log_probs(
            &mut tape, &bound, fwd.logits, &seq, step, action.s, action.tau_s,
        )?;
        let sampled = sample_masked(&seq, tape.value(lp), action.tau_s, &mut token_rng);
        let (next, _) = remask_step(&sampled.seq, &sampled.confidences, &action, &mut token_rng)?;

        let mut committed = Vec::new();
        let mut token_logprobs = Vec::new();
        for i in seq.masked_positions() {
            if !next.is_masked(i) {
                committed.push((i, next.get(i)));
                if let Confidence::Score(c) = sampled.confidences[i] {
                    token_logprobs.push(c);
                }
            }
        }
        let model_logprob_sum = token_logprobs.iter().sum();
        records.push(StepRecord {
            state_before: seq,
            schedule: action,
            committed,
            token_logprobs,
            model_logprob_sum,
            schedule_u,
            schedule_logprob,
        });
        seq = next;
    }

    Ok(Trajectory {
        condition: cond,
        steps: records,
        final_seq: seq,
        reward: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::schedule::{unsquash, SchedulePolicyConfig};

    fn den(seed: u64) -> Denoiser {
        Denoiser::init(DenoiserConfig::default(), &mut RngState::new(seed))
    }

    fn action(r: f64) -> ScheduleAction {
        ScheduleAction {
            r,
            tau_s: 1.0,
            tau_r: 1.0,
            s: 3.0,
        }
    }

    #[test]
    fn greedy_below_min_temperature() {
        let d = den(1);
        let mut seq = TokenSequence::all_masked(16, 16);
        seq.set(0, 4);
        let step = Timestep::new(1, 4).unwrap();
        let sched = ScheduleAction {
            tau_s: 1e-4,
            ..action(0.0)
        };
        let out = sampling_step(&d, &seq, Condition::Class(2), step, &sched, &mut RngState::new(2)).unwrap();
        let logits = d.forward_logits(&seq, Condition::Class(2), step).unwrap();
        let uncond = d.forward_logits(&seq, Condition::Null, step).unwrap();
        let guided = crate::denoiser::apply_cfg(&logits, &uncond, 3.0).unwrap();
        for i in 1..16 {
            let row = guided.row(i);
            let argmax = (0..16).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            assert_eq!(out.seq.get(i), argmax as u16 + 1);
        }
        assert_eq!(out.seq.get(0), 4);
    }

    #[test]
    fn zero_network_confidences() {
        let d = Denoiser::zeros(DenoiserConfig::default());
        let mut seq = TokenSequence::all_masked(16, 16);
        seq.set(5, 9);
        let out = sampling_step(
            &d,
            &seq,
            Condition::Class(0),
            Timestep::new(0, 2).unwrap(),
            &action(0.5),
            &mut RngState::new(3),
        )
        .unwrap();
        for (i, c) in out.confidences.iter().enumerate() {
            match c {
                Confidence::Committed => assert_eq!(i, 5),
                Confidence::Score(v) => assert!((v + 16f64.ln()).abs() < 1e-12),
            }
        }
        assert_eq!(out.seq.get(5), 9);
        assert!(out.seq.is_complete());
    }

    #[test]
    fn zero_remask_ratio_is_identity() {
        let seq = TokenSequence::new((1..=16).collect(), 16).unwrap();
        let conf = vec![Confidence::Score(-1.0); 16];
        let (out, chosen) = remask_step(&seq, &conf, &action(0.0), &mut RngState::new(1)).unwrap();
        assert_eq!(out, seq);
        assert!(chosen.is_empty());
        assert!(remask_step(&seq, &conf, &action(1.5), &mut RngState::new(1)).is_err());
    }

    #[test]
    fn symmetric_remask_marginals() {
        let seq = TokenSequence::new((1..=16).collect(), 16).unwrap();
        let conf: Vec<Confidence> = (0..16)
            .map(|i| if i < 8 { Confidence::Score(-0.7) } else { Confidence::Committed })
            .collect();
        let sched = ScheduleAction { r: 0.25, ..action(0.0) };
        let mut rng = RngState::new(99);
        let trials = 10_000;
        let mut hits = [0usize; 16];
        for _ in 0..trials {
            let (out, chosen) = remask_step(&seq, &conf, &sched, &mut rng).unwrap();
            assert_eq!(chosen.len(), 4);
            assert_eq!(out.mask_count(), 4);
            for i in chosen {
                hits[i] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let p = h as f64 / trials as f64;
            if i < 8 {
                assert!((p - 0.5).abs() < 0.02, "position {i}: {p}");
            } else {
                assert_eq!(h, 0);
            }
        }
    }

    #[test]
    fn remask_truncates_to_eligible() {
        let seq = TokenSequence::new((1..=16).collect(), 16).unwrap();
        let mut conf = vec![Confidence::Committed; 16];
        conf[3] = Confidence::Score(-2.0);
        conf[9] = Confidence::Score(-0.1);
        let (out, chosen) = remask_step(&seq, &conf, &action(0.9), &mut RngState::new(5)).unwrap();
        assert_eq!(chosen, vec![3, 9]);
        assert_eq!(out.mask_count(), 2);
    }

    #[test]
    fn low_confidence_remasked_more_often() {
        let seq = TokenSequence::new((1..=16).collect(), 16).unwrap();
        let mut conf = vec![Confidence::Committed; 16];
        conf[0] = Confidence::Score(-3.0);
        conf[1] = Confidence::Score(-0.1);
        let sched = ScheduleAction { r: 1.0 / 16.0, tau_r: 0.5, ..action(0.0) };
        let mut rng = RngState::new(8);
        let low = (0..2000)
            .filter(|_| remask_step(&seq, &conf, &sched, &mut rng).unwrap().1 == vec![0])
            .count();
        assert!(low > 1900, "{low}");
    }

    #[test]
    fn single_step_commits_everything() {
        let d = den(4);
        let preset = PresetSchedule::table1(1).unwrap();
        let tr = generate_trajectory(&d, ScheduleSource::Preset(&preset), Condition::Class(1), 1, &RngState::new(6)).unwrap();
        assert_eq!(tr.steps.len(), 1);
        assert_eq!(tr.steps[0].committed.len(), 16);
        assert!(tr.final_seq.is_complete());
    }

    fn ceil_exact(x: f64) -> usize {
        let r = x.round();
        if (x - r).abs() < 1e-9 {
            r as usize
        } else {
            x.ceil() as usize
        }
    }

    #[test]
    fn table1_mask_counts_at_48_steps() {
        let d = den(5);
        let preset = PresetSchedule::table1(48).unwrap();
        let tr = generate_trajectory(&d, ScheduleSource::Preset(&preset), Condition::Class(3), 48, &RngState::new(7)).unwrap();
        for t in 0..48 {
            let after = if t + 1 < 48 {
                tr.steps[t + 1].state_before.mask_count()
            } else {
                tr.final_seq.mask_count()
            };
            let expected = if t == 47 {
                0
            } else {
                ceil_exact((std::f64::consts::PI * (t as f64 + 1.0) / 96.0).cos() * 16.0)
            };
            assert_eq!(after, expected, "step {t}");
        }
    }

    #[test]
    fn trajectories_are_deterministic_and_replayable() {
        let d = den(6);
        let preset = PresetSchedule::table1(12).unwrap();
        let run = |seed| {
            generate_trajectory(&d, ScheduleSource::Preset(&preset), Condition::Class(5), 12, &RngState::new(seed)).unwrap()
        };
        let a = run(11);
        assert_eq!(a, run(11));
        assert_ne!(a, run(12));
        assert!(a.final_seq.is_complete());
        for (t, rec) in a.steps.iter().enumerate() {
            let step = Timestep::new(t, 12).unwrap();
            let lp = d
                .token_log_probs(&rec.state_before, a.condition, step, rec.schedule.s, rec.schedule.tau_s, &rec.committed)
                .unwrap();
            assert_eq!(lp, rec.token_logprobs);
            let sum: f64 = lp.iter().sum();
            assert_eq!(sum.to_bits(), rec.model_logprob_sum.to_bits());
            for &(i, v) in &rec.committed {
                assert!(rec.state_before.is_masked(i));
                let later = if t + 1 < 12 { &a.steps[t + 1].state_before } else { &a.final_seq };
                assert_eq!(later.get(i), v);
            }
        }
    }

    #[test]
    fn pinned_policy_reduces_to_preset() {
        let d = den(7);
        let policy = SchedulePolicy::new(
            SchedulePolicyConfig { feature_dim: 64, hidden: 16, sigma: 0.1 },
            &mut RngState::new(1),
        );
        let preset = PresetSchedule::table1(10).unwrap();
        let means: Vec<Unconstrained> = (0..10).map(|t| unsquash(&preset.raw_action(t))).collect();
        for seed in 0..5 {
            let rng = RngState::new(seed);
            let base = generate_trajectory(&d, ScheduleSource::Preset(&preset), Condition::Class(2), 10, &rng).unwrap();
            for source in [
                ScheduleSource::Policy { policy: &policy, sigma: 0.0 },
                ScheduleSource::Means { means: &means, sigma: 0.0 },
            ] {
                let tr = generate_trajectory(&d, source, Condition::Class(2), 10, &rng).unwrap();
                assert_eq!(tr.final_seq, base.final_seq);
                for (a, b) in tr.steps.iter().zip(&base.steps) {
                    assert_eq!(a.state_before, b.state_before);
                    crate::schedule::tests::assert_close_action(&a.schedule, &b.schedule);
                    assert_eq!(a.committed, b.committed);
                    assert_eq!(a.model_logprob_sum.to_bits(), b.model_logprob_sum.to_bits());
                    assert!(a.schedule_logprob.is_none());
                }
            }
        }
    }

    #[test]
    fn rollout_json_round_trip() {
        let d = den(8);
        let preset = PresetSchedule::table1(4).unwrap();
        let mut tr = generate_trajectory(&d, ScheduleSource::Preset(&preset), Condition::Class(0), 4, &RngState::new(1)).unwrap();
        tr.reward = Some(0.25);
        let line = tr.to_json_line();
        assert!(!line.contains('\n'));
        assert_eq!(Trajectory::from_json_line(&line).unwrap(), tr);
    }
}
