//! Synthetic conditional token tasks and programmatic rewards.
//!
//! Each class owns a target pattern. Pretraining data is the pattern with
//! every position independently replaced by a uniform random token at the
//! corruption rate. Two rewards pull in different directions: agreement with
//! the class pattern, and smoothness of adjacent tokens.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Condition, TokenSequence};
use crate::error::{contract, invalid, Error, Result};
use crate::numerics::RngState;

/// Fraction of adjacent pairs in generated patterns that must be non-smooth.
pub const MIN_ROUGH_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub corruption: f64,
    pub patterns: Vec<Vec<u16>>,
}

fn rough_pairs(tokens: &[u16]) -> usize {
    tokens
        .windows(2)
        .filter(|w| (w[0] as i32 - w[1] as i32).abs() > 1)
        .count()
}

impl TaskSpec {
    /// Random-walk patterns with occasional jumps, one per class, each with
    /// at least `MIN_ROUGH_FRACTION` non-smooth adjacent pairs.
    pub fn generate(
        vocab_size: usize,
        seq_len: usize,
        num_classes: usize,
        corruption: f64,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size < 4 || seq_len < 2 || num_classes == 0 {
            return Err(invalid("task needs V >= 4, N >= 2 and at least one class"));
        }
        let mut rng = RngState::new(seed).fork("patterns");
        let min_rough = (MIN_ROUGH_FRACTION * (seq_len - 1) as f64).ceil() as usize;
        let v = vocab_size as i32;
        let mut patterns: Vec<Vec<u16>> = Vec::with_capacity(num_classes);
        while patterns.len() < num_classes {
            let mut p = Vec::with_capacity(seq_len);
            let mut cur = 1 + rng.below(vocab_size) as i32;
            p.push(cur as u16);
            for _ in 1..seq_len {
                if rng.bernoulli(0.65) {
                    cur = (cur + rng.below(3) as i32 - 1).clamp(1, v);
                } else {
                    cur = 1 + rng.below(vocab_size) as i32;
                }
                p.push(cur as u16);
            }
            if rough_pairs(&p) >= min_rough && !patterns.contains(&p) {
                patterns.push(p);
            }
        }
        let spec = Self {
            vocab_size,
            seq_len,
            num_classes,
            corruption,
            patterns,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.corruption) {
            return Err(invalid(format!(
                "corruption rate {} outside [0, 0.5)",
                self.corruption
            )));
        }
        if self.patterns.len() != self.num_classes {
            return Err(invalid(format!(
                "{} patterns for {} classes",
                self.patterns.len(),
                self.num_classes
            )));
        }
        for (k, p) in self.patterns.iter().enumerate() {
            if p.len() != self.seq_len {
                return Err(invalid(format!("pattern {k} has length {}", p.len())));
            }
            if p.iter().any(|&t| t == 0 || t as usize > self.vocab_size) {
                return Err(invalid(format!("pattern {k} has tokens outside 1..=V")));
            }
        }
        Ok(())
    }

    pub fn pattern(&self, class: usize) -> Result<&[u16]> {
        self.patterns
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid(format!("class {class} outside 0..{}", self.num_classes)))
    }

    /// Hex SHA-256 identifying the task; checkpoints are tied to it.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"task-v1");
        for n in [self.vocab_size, self.seq_len, self.num_classes] {
            h.update((n as u64).to_le_bytes());
        }
        h.update(self.corruption.to_bits().to_le_bytes());
        for p in &self.patterns {
            for &t in p {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn patterns_json(&self) -> String {
        serde_json::to_string_pretty(&self.patterns).expect("patterns serialize")
    }
}

/// A uniformly drawn class and its corrupted pattern.
pub fn sample_pretrain_pair(spec: &TaskSpec, rng: &mut RngState) -> (TokenSequence, Condition) {
    let class = rng.below(spec.num_classes);
    let tokens = spec.patterns[class]
        .iter()
        .map(|&t| {
            if rng.bernoulli(spec.corruption) {
                1 + rng.below(spec.vocab_size) as u16
            } else {
                t
            }
        })
        .collect();
    (
        TokenSequence::new(tokens, spec.vocab_size).expect("valid tokens"),
        Condition::Class(class),
    )
}

fn require_complete(seq: &TokenSequence) -> Result<()> {
    if seq.is_complete() {
        Ok(())
    } else {
        Err(contract("reward requested for a sequence that still has MASK tokens"))
    }
}

/// Fraction of positions that agree with the class pattern.
pub fn reward_match(seq: &TokenSequence, cond: Condition, spec: &TaskSpec) -> Result<f64> {
    require_complete(seq)?;
    let Condition::Class(k) = cond else {
        return Err(invalid("the match reward needs a class condition"));
    };
    let pattern = spec.pattern(k)?;
    if pattern.len() != seq.len() {
        return Err(invalid("sequence and pattern lengths differ"));
    }
    let hits = seq
        .tokens()
        .iter()
        .zip(pattern)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / seq.len() as f64)
}

/// Fraction of adjacent pairs whose tokens differ by at most one.
pub fn reward_smooth(seq: &TokenSequence) -> Result<f64> {
    require_complete(seq)?;
    if seq.len() < 2 {
        return Ok(1.0);
    }
    let rough = rough_pairs(seq.tokens());
    let pairs = seq.len() - 1;
    Ok((pairs - rough) as f64 / pairs as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Match,
    Smooth,
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardKind::Match => "match",
            RewardKind::Smooth => "smooth",
        })
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(RewardKind::Match),
            "smooth" => Ok(RewardKind::Smooth),
            other => Err(invalid(format!("unknown reward {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub components: Vec<(RewardKind, f64)>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            components: vec![(RewardKind::Match, 0.5), (RewardKind::Smooth, 0.5)],
        }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(invalid("at least one reward component is required"));
        }
        if self.components.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("reward weights must be nonnegative"));
        }
        let total: f64 = self.components.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("reward weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Individual components alongside their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub matched: f64,
    pub smooth: f64,
    pub composite: f64,
}

pub fn composite_reward(
    seq: &TokenSequence,
    cond: Condition,
    task: &TaskSpec,
    rewards: &RewardSpec,
) -> Result<f64> {
    Ok(reward_breakdown(seq, cond, task, rewards)?.composite)
}

pub fn reward_breakdown(
    seq: &TokenSequence,
    cond: Condition,
    task: &TaskSpec,
    rewards: &RewardSpec,
) -> Result<RewardBreakdown> {
    rewards.validate()?;
    let matched = reward_match(seq, cond, task)?;
    let smooth = reward_smooth(seq)?;
    Ok(RewardBreakdown {
        matched,
        smooth,
        composite: weighted(&rewards.components, matched, smooth),
    })
}

fn weighted(components: &[(RewardKind, f64)], matched: f64, smooth: f64) -> f64 {
    components
        .iter()
        .map(|(k, w)| {
            w * match k {
                RewardKind::Match => matched,
                RewardKind::Smooth => smooth,
            }
        })
        .sum()
}
