//! Inference schedules: closed-form presets and the learned Gaussian
//! scheduling policy over unconstrained schedule coordinates.
//!
//! Unconstrained coordinates `u` map to a [`ScheduleAction`] through
//! `r = sigmoid(u0)`, `tau_s = eps + softplus(u1)`, `tau_r = eps + softplus(u2)`,
//! `s = softplus(u3)`. Likelihoods are always evaluated on `u`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::{time_features, Timestep, TIME_FEATURES};
use crate::error::{contract, invalid, Error, Result};
use crate::numerics::{gaussian_log_density, RngState, Tape, Tensor, Var};
use crate::params::ParamStore;
use crate::sampler::ScheduleAction;

pub const SCHEDULE_DIMS: usize = 4;
pub const SQUASH_EPS: f64 = 1e-3;

pub type Unconstrained = [f64; SCHEDULE_DIMS];

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        let e = (-u).exp();
        1.0 - e / (1.0 + e)
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Map unconstrained coordinates onto a valid schedule action.
pub fn squash(u: &Unconstrained) -> ScheduleAction {
    ScheduleAction {
        r: sigmoid(u[0]),
        tau_s: SQUASH_EPS + softplus(u[1]),
        tau_r: SQUASH_EPS + softplus(u[2]),
        s: softplus(u[3]),
    }
}

/// Monotone total order on finite doubles.
fn ordered_key(x: f64) -> i64 {
    let b = x.to_bits() as i64;
    if b < 0 {
        i64::MIN - b
    } else {
        b
    }
}

fn from_key(k: i64) -> f64 {
    let b = if k < 0 { i64::MIN - k } else { k };
    f64::from_bits(b as u64)
}

/// Find `u` with `f(u) == target` exactly for nondecreasing `f`, starting
/// from an analytic guess. Falls back to the closest value found.
fn invert_exact(f: impl Fn(f64) -> f64, target: f64, guess: f64) -> f64 {
    if !guess.is_finite() {
        return guess;
    }
    if f(guess) == target {
        return guess;
    }
    let g = ordered_key(guess);
    let below = f(guess) < target;
    let mut span: i64 = 1;
    let (mut lo, mut hi) = (g, g);
    for _ in 0..62 {
        let probe = if below {
            g.saturating_add(span)
        } else {
            g.saturating_sub(span)
        };
        let v = f(from_key(probe));
        if !v.is_finite() {
            break;
        }
        if below && v >= target {
            hi = probe;
            break;
        }
        if !below && v <= target {
            lo = probe;
            break;
        }
        if below {
            lo = probe;
        } else {
            hi = probe;
        }
        span = span.saturating_mul(2);
    }
    let mut best = guess;
    let mut best_err = (f(guess) - target).abs();
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let x = from_key(mid);
        let v = f(x);
        if v == target {
            return x;
        }
        if (v - target).abs() < best_err {
            best = x;
            best_err = (v - target).abs();
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    for k in [lo, hi] {
        let x = from_key(k);
        if (f(x) - target).abs() < best_err {
            best = x;
            best_err = (f(x) - target).abs();
        }
    }
    best
}

/// Inverse of [`squash`]. Each coordinate is refined so that squashing it
/// lands on the input whenever such a double exists; otherwise on the
/// nearest reachable value (within a couple of ulps).
pub fn unsquash(a: &ScheduleAction) -> Unconstrained {
    let r = a.r.clamp(1e-300, 1.0 - f64::EPSILON);
    [
        invert_exact(sigmoid, a.r, logit(r)),
        invert_exact(|u| SQUASH_EPS + softplus(u), a.tau_s, softplus_inv(a.tau_s - SQUASH_EPS)),
        invert_exact(|u| SQUASH_EPS + softplus(u), a.tau_r, softplus_inv(a.tau_r - SQUASH_EPS)),
        invert_exact(softplus, a.s, softplus_inv(a.s)),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PresetKind {
    /// Cosine remask ratio, unit sampling temperature, linearly decaying
    /// remask temperature, guidance scale 9.
    Table1,
    /// As `Table1` with the remask ratio raised to the power `gamma`.
    CosineGamma(f64),
}

impl fmt::Display for PresetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PresetKind::Table1 => write!(f, "table1"),
            PresetKind::CosineGamma(g) => write!(f, "cosine_gamma:{g}"),
        }
    }
}

impl FromStr for PresetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "table1" {
            return Ok(PresetKind::Table1);
        }
        if let Some(g) = s.strip_prefix("cosine_gamma:") {
            let gamma: f64 = g
                .parse()
                .map_err(|_| invalid(format!("bad gamma in preset {s:?}")))?;
            if !(gamma > 0.0) || !gamma.is_finite() {
                return Err(invalid(format!("gamma must be positive, got {gamma}")));
            }
            return Ok(PresetKind::CosineGamma(gamma));
        }
        Err(invalid(format!(
            "unknown preset schedule {s:?} (expected table1 or cosine_gamma:<g>)"
        )))
    }
}

/// A closed-form schedule over a fixed horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PresetSchedule {
    kind: PresetKind,
    steps: usize,
}

impl PresetSchedule {
    pub fn new(kind: PresetKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("a schedule needs at least one step"));
        }
        if let PresetKind::CosineGamma(g) = kind {
            if !(g > 0.0) {
                return Err(invalid(format!("gamma must be positive, got {g}")));
            }
        }
        Ok(Self { kind, steps })
    }

    pub fn table1(steps: usize) -> Result<Self> {
        Self::new(PresetKind::Table1, steps)
    }

    pub fn cosine_gamma(steps: usize, gamma: f64) -> Result<Self> {
        Self::new(PresetKind::CosineGamma(gamma), steps)
    }

    pub fn kind(&self) -> PresetKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// The closed-form values at step `t`, before the final-step clamp.
    pub fn raw_action(&self, t: usize) -> ScheduleAction {
        let total = self.steps as f64;
        let cos = ((t as f64 + 1.0) / total * FRAC_PI_2).cos().max(0.0);
        let r = match self.kind {
            PresetKind::Table1 => cos,
            PresetKind::CosineGamma(g) => cos.powf(g),
        };
        ScheduleAction {
            r,
            tau_s: 1.0,
            tau_r: 2.0 * (total - t as f64) / total,
            s: 9.0,
        }
    }

    /// Action used at step `t`; the last step never remasks.
    pub fn action(&self, t: usize) -> ScheduleAction {
        let mut a = self.raw_action(t);
        if t + 1 == self.steps {
            a.r = 0.0;
        }
        a
    }

    pub fn actions(&self) -> Vec<ScheduleAction> {
        (0..self.steps).map(|t| self.action(t)).collect()
    }
}

/// Unconstrained coordinates that squash to the `table1` preset at `step`.
pub fn reference_mean(step: Timestep) -> Unconstrained {
    let preset = PresetSchedule::table1(step.total).expect("total >= 1");
    unsquash(&preset.raw_action(step.t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePolicyConfig {
    /// Width of the pooled denoiser features fed to the policy.
    pub feature_dim: usize,
    pub hidden: usize,
    /// Exploration standard deviation in unconstrained space.
    pub sigma: f64,
}

const W_FEAT: usize = 0;
const W_TIME: usize = 1;
const B1: usize = 2;
const W2: usize = 3;
const B2: usize = 4;

/// Gaussian scheduling policy `N(mean(s_t), sigma^2 I)`.
///
/// `mean = reference_mean(t) + head(pool(features), time)`. The head's output
/// layer starts at zero, so a fresh policy reproduces the `table1` preset.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulePolicy {
    config: SchedulePolicyConfig,
    params: ParamStore,
}

impl SchedulePolicy {
    pub fn new(config: SchedulePolicyConfig, rng: &mut RngState) -> Self {
        let (f, p) = (config.feature_dim, config.hidden);
        let mut params = ParamStore::new();
        let scale = 1.0 / (f as f64).sqrt();
        params.push(
            "w_feat",
            Tensor::from_fn(&[f, p], |_| scale * rng.normal()),
        );
        params.push(
            "w_time",
            Tensor::from_fn(&[TIME_FEATURES, p], |_| 0.5 * rng.normal()),
        );
        params.push("b1", Tensor::zeros(&[p]));
        params.push("w2", Tensor::zeros(&[p, SCHEDULE_DIMS]));
        params.push("b2", Tensor::zeros(&[SCHEDULE_DIMS]));
        Self { config, params }
    }

    pub fn config(&self) -> &SchedulePolicyConfig {
        &self.config
    }

    pub fn sigma(&self) -> f64 {
        self.config.sigma
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    /// Record the mean on `tape` from pooled `[1, feature_dim]` features.
    pub fn mean_on_tape(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        pooled: Var,
        step: Timestep,
    ) -> Result<Var> {
        if tape.value(pooled).len() != self.config.feature_dim {
            return Err(invalid(format!(
                "policy expects {} features, got {}",
                self.config.feature_dim,
                tape.value(pooled).len()
            )));
        }
        let tf = tape.constant(time_features(step.progress()));
        let a = tape.matmul(pooled, bound[W_FEAT])?;
        let b = tape.matmul(tf, bound[W_TIME])?;
        let z = tape.add(a, b)?;
        let z = tape.add_row(z, bound[B1])?;
        let z = tape.tanh(z);
        let out = tape.matmul(z, bound[W2])?;
        let out = tape.add_row(out, bound[B2])?;
        let reference = tape.constant(Tensor::new(vec![1, SCHEDULE_DIMS], reference_mean(step).to_vec())?);
        tape.add(reference, out)
    }

    /// Mean of the schedule distribution given pooled denoiser features.
    pub fn policy_mean(&self, pooled: &Tensor, step: Timestep) -> Result<Unconstrained> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let p = tape.constant(pooled.clone().reshape(&[1, pooled.len()])?);
        let m = self.mean_on_tape(&mut tape, &bound, p, step)?;
        Ok(to_array(tape.value(m)))
    }
}

pub(crate) fn to_array(t: &Tensor) -> Unconstrained {
    let mut out = [0.0; SCHEDULE_DIMS];
    out.copy_from_slice(&t.data()[..SCHEDULE_DIMS]);
    out
}

/// Draw `u ~ N(mean, sigma^2 I)` and squash it. `sigma = 0` returns the mean
/// without consuming randomness.
pub fn sample_action(
    mean: &Unconstrained,
    sigma: f64,
    rng: &mut RngState,
) -> Result<(Unconstrained, ScheduleAction)> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be nonnegative, got {sigma}")));
    }
    let mut u = *mean;
    if sigma > 0.0 {
        for v in &mut u {
            *v += sigma * rng.normal();
        }
    }
    Ok((u, squash(&u)))
}

/// Log density of the unconstrained draw `u` under `N(mean, sigma^2 I)`.
pub fn action_log_prob(mean: &Unconstrained, sigma: f64, u: &Unconstrained) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(contract(format!(
            "schedule likelihood needs sigma > 0, got {sigma}"
        )));
    }
    gaussian_log_density(u, mean, sigma)
}

/// Same density recorded on a tape so gradients reach the mean.
pub fn action_log_prob_on_tape(
    tape: &mut Tape,
    mean: Var,
    sigma: f64,
    u: &Unconstrained,
) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(contract(format!(
            "schedule likelihood needs sigma > 0, got {sigma}"
        )));
    }
    let d = SCHEDULE_DIMS as f64;
    let var = sigma * sigma;
    let x = tape.constant(Tensor::new(vec![1, SCHEDULE_DIMS], u.to_vec())?);
    let diff = tape.sub(x, mean)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.sum(sq);
    let scaled = tape.scale(sq, -1.0 / (2.0 * var));
    Ok(tape.offset(scaled, -0.5 * d * (2.0 * std::f64::consts::PI * var).ln()))
}

/// Resample per-step means from one horizon onto another by linear
/// interpolation over normalized time `t / (T - 1)`.
pub fn interpolate_schedule(means: &[Unconstrained], test_steps: usize) -> Result<Vec<Unconstrained>> {
    let train_steps = means.len();
    if train_steps < 2 {
        return Err(invalid("interpolation needs at least two source steps"));
    }
    if test_steps == 0 {
        return Err(invalid("target horizon must be at least one step"));
    }
    if test_steps == train_steps {
        return Ok(means.to_vec());
    }
    let last = (train_steps - 1) as f64;
    Ok((0..test_steps)
        .map(|t| {
            let x = if test_steps == 1 {
                1.0
            } else {
                t as f64 / (test_steps - 1) as f64
            };
            let pos = x * last;
            let i = (pos.floor() as usize).min(train_steps - 2);
            let w = pos - i as f64;
            let mut out = [0.0; SCHEDULE_DIMS];
            for (k, o) in out.iter_mut().enumerate() {
                *o = if w == 0.0 {
                    means[i][k]
                } else if w == 1.0 {
                    means[i + 1][k]
                } else {
                    (1.0 - w) * means[i][k] + w * means[i + 1][k]
                };
            }
            out
        })
        .collect())
}
