//! Experiment commands: pretrain, train, eval and the gamma sweep.
//!
//! Every command writes into one run directory: a manifest (written before
//! work starts, finalized after), a config snapshot, a metrics JSONL stream
//! and the command's products. Metric streams carry no timestamps, so reruns
//! with the same config and seed are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::Config;
use crate::denoiser::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::grpo::{train, RunContext, TrainMode, TrainState};
use crate::numerics::{AdamMoments, RngState};
use crate::pretrain::pretrain;
use crate::sampler::{generate_trajectory, ScheduleSource};
use crate::schedule::{interpolate_schedule, unsquash, PresetSchedule, SchedulePolicy, Unconstrained};
use crate::tasks::{reward_breakdown, RewardBreakdown};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";

/// Rollouts per condition used to average state-dependent policy means
/// before interpolating them to another horizon.
pub const CALIBRATION_ROLLOUTS: usize = 8;

const SOURCES: &[(&str, &str)] = &[
    ("lib.rs", include_str!("lib.rs")),
    ("error.rs", include_str!("error.rs")),
    ("numerics/mod.rs", include_str!("numerics/mod.rs")),
    ("numerics/tensor.rs", include_str!("numerics/tensor.rs")),
    ("numerics/prob.rs", include_str!("numerics/prob.rs")),
    ("numerics/adam.rs", include_str!("numerics/adam.rs")),
    ("numerics/rng.rs", include_str!("numerics/rng.rs")),
    ("numerics/tape.rs", include_str!("numerics/tape.rs")),
    ("params.rs", include_str!("params.rs")),
    ("denoiser.rs", include_str!("denoiser.rs")),
    ("sampler.rs", include_str!("sampler.rs")),
    ("schedule.rs", include_str!("schedule.rs")),
    ("tasks.rs", include_str!("tasks.rs")),
    ("pretrain.rs", include_str!("pretrain.rs")),
    ("grpo.rs", include_str!("grpo.rs")),
    ("config.rs", include_str!("config.rs")),
    ("checkpoint.rs", include_str!("checkpoint.rs")),
    ("harness.rs", include_str!("harness.rs")),
];

/// Content hash of the library sources this binary was built from.
pub fn code_hash() -> String {
    let mut h = Sha256::new();
    for (name, text) in SOURCES {
        h.update(format!("blob {} {}\0", name, text.len()).as_bytes());
        h.update(text.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Precondition(_) | Error::VersionMismatch { .. } | Error::TaskMismatch { .. } => 3,
        Error::Io(_) => 4,
        Error::ContractViolation(_) => 1,
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub seed: u64,
    pub code_hash: String,
    pub task_hash: String,
    pub config: String,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

/// Bookkeeping for one command's files inside the run directory.
struct Run {
    dir: PathBuf,
    prefix: String,
    manifest: Manifest,
}

impl Run {
    /// Create the run directory, snapshot the config and write the initial
    /// manifest. Failing here means nothing else has been touched.
    fn start(config: &Config, out: &Path, command: &str, prefix: &str) -> Result<Self> {
        fs::create_dir_all(out)?;
        let mut run = Run {
            dir: out.to_path_buf(),
            prefix: prefix.to_string(),
            manifest: Manifest {
                command: command.to_string(),
                status: "running".into(),
                seed: config.run.seed,
                code_hash: code_hash(),
                task_hash: config.task.hash(),
                config: config.to_toml(),
                started_at: now(),
                finished_at: None,
                outputs: Vec::new(),
                summary: BTreeMap::new(),
            },
        };
        let cfg = run.output("config.toml");
        fs::write(&cfg, config.to_toml())?;
        run.write_manifest()?;
        Ok(run)
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    /// Register an output file and return its path.
    fn output(&mut self, suffix: &str) -> PathBuf {
        let name = self.name(suffix);
        if !self.manifest.outputs.contains(&name) {
            self.manifest.outputs.push(name.clone());
        }
        self.dir.join(name)
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join(self.name("manifest.json"))
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.manifest_path();
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self.manifest).expect("manifest"))?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.manifest
            .summary
            .insert(key.to_string(), serde_json::to_value(value).expect("summary value"));
    }

    /// Check every required file exists, then mark the manifest complete.
    fn finish(mut self, required: &[&str]) -> Result<Manifest> {
        for suffix in required {
            self.output(suffix);
        }
        let missing: Vec<_> = self
            .manifest
            .outputs
            .iter()
            .filter(|n| !self.dir.join(n).is_file())
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("run audit: missing outputs {missing:?}"),
            )));
        }
        self.manifest.status = "complete".into();
        self.manifest.finished_at = Some(now());
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

struct JsonLines {
    w: BufWriter<fs::File>,
}

impl JsonLines {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            w: BufWriter::new(fs::File::create(path)?),
        })
    }

    fn write(&mut self, record: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut self.w, record).map_err(std::io::Error::from)?;
        self.w.write_all(b"\n")?;
        Ok(())
    }

    fn close(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub heldout_loss: f64,
    pub checkpoint: PathBuf,
    pub manifest: Manifest,
}

pub fn cmd_pretrain(config: &Config, out: &Path) -> Result<PretrainSummary> {
    config.validate()?;
    let mut run = Run::start(config, out, "pretrain", "pretrain")?;
    let seed = config.run.seed;
    let rng = RngState::new(seed);
    let mut denoiser = Denoiser::init(config.denoiser_config(), &mut rng.fork("init"));
    let mut moments = AdamMoments::zeros_like(denoiser.params().tensors());
    let mut metrics = JsonLines::create(&run.output("metrics.jsonl"))?;
    let loss = pretrain(
        &mut denoiser,
        &mut moments,
        &config.task,
        &config.pretrain,
        &rng.fork("pretrain"),
        &mut |m| metrics.write(m),
    )?;
    metrics.close()?;
    let ck_path = out.join(PRETRAIN_CHECKPOINT);
    Checkpoint::from_pretrain(seed, &config.task, &denoiser, &moments, loss).save(&ck_path)?;
    run.manifest.outputs.push(PRETRAIN_CHECKPOINT.into());
    run.note("heldout_loss", loss);
    run.note("half_ln_vocab", 0.5 * (config.task.vocab_size as f64).ln());
    let manifest = run.finish(&["config.toml", "metrics.jsonl"])?;
    Ok(PretrainSummary {
        heldout_loss: loss,
        checkpoint: ck_path,
        manifest,
    })
}

pub fn train_checkpoint_name(mode: TrainMode) -> String {
    format!("train-{mode}.ckpt")
}

fn load_pretrained(config: &Config, out: &Path) -> Result<Checkpoint> {
    let path = out.join(PRETRAIN_CHECKPOINT);
    if !path.is_file() {
        return Err(Error::Precondition(format!(
            "no pretrained checkpoint at {}; run `pretrain` first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path, Some(&config.task))?;
    if ck.meta.stage != Stage::Pretrain {
        return Err(Error::Precondition(format!("{} is not a pretraining checkpoint", path.display())));
    }
    if ck.meta.denoiser != config.denoiser_config() {
        return Err(Error::Precondition("pretrained model shape differs from the [model] section".into()));
    }
    Ok(ck)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: TrainMode,
    pub updates: u64,
    pub env_steps: u64,
    /// Mean rollout reward of the last update.
    pub final_rollout_reward: f64,
    pub checkpoint: PathBuf,
    pub manifest: Manifest,
}

pub fn cmd_train(config: &Config, out: &Path, mode: TrainMode) -> Result<TrainSummary> {
    config.validate()?;
    let base = load_pretrained(config, out)?;
    let prefix = format!("train-{mode}");
    let mut run = Run::start(config, out, &format!("train --mode {mode}"), &prefix)?;
    let seed = config.run.seed;
    let rng = RngState::new(seed);
    let reference = base.denoiser()?;
    let policy = mode
        .uses_schedule_policy()
        .then(|| SchedulePolicy::new(config.policy_config(), &mut rng.fork("policy-init")));
    let mut state = TrainState::new(reference.clone(), policy);
    let tc = config.train_config();
    let rewards = config.reward_spec();
    let train_rng = rng.fork("train");
    let ctx = RunContext {
        task: &config.task,
        rewards: &rewards,
        reference: (tc.kl_beta > 0.0).then_some(&reference),
        rng: &train_rng,
    };
    let mut metrics = JsonLines::create(&run.output("metrics.jsonl"))?;
    let mut rollouts = JsonLines::create(&run.output("rollouts.jsonl"))?;
    let mut first = true;
    let mut last_reward = f64::NAN;
    train(&tc, mode, &mut state, &ctx, &mut |o| {
        for m in &o.metrics {
            metrics.write(m)?;
        }
        if let Some(m) = o.metrics.first() {
            last_reward = m.mean_reward;
        }
        if first {
            for g in &o.groups {
                for t in &g.trajectories {
                    rollouts.write(t)?;
                }
            }
            first = false;
        }
        Ok(())
    })?;
    metrics.close()?;
    rollouts.close()?;
    let ck_path = run.output("ckpt");
    Checkpoint::from_train_state(seed, &config.task, &state, mode, tc.steps).save(&ck_path)?;
    run.note("updates", state.updates);
    run.note("env_steps", state.env_steps);
    run.note("final_rollout_reward", last_reward);
    let manifest = run.finish(&["config.toml", "metrics.jsonl", "rollouts.jsonl", "ckpt"])?;
    Ok(TrainSummary {
        mode,
        updates: state.updates,
        env_steps: state.env_steps,
        final_rollout_reward: last_reward,
        checkpoint: ck_path,
        manifest,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Explicit checkpoint; otherwise the mode's training checkpoint, or the
    /// pretrained one when no mode is given.
    pub checkpoint: Option<PathBuf>,
    pub mode: Option<TrainMode>,
    pub steps: Option<usize>,
    pub sigma: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub mode: Option<TrainMode>,
    pub steps: usize,
    pub train_steps: Option<usize>,
    /// Whether learned means were resampled to a different horizon.
    pub interpolated: bool,
    pub schedule: String,
    pub sigma: f64,
    pub n: usize,
    pub composite: Moments,
    pub matched: Moments,
    pub smooth: Moments,
}

#[derive(Serialize)]
struct EvalRow {
    condition: usize,
    n: usize,
    composite_mean: f64,
    match_mean: f64,
    smooth_mean: f64,
}

/// Per-step σ=0 policy means at `steps`, averaged over calibration rollouts.
fn calibrated_means(
    denoiser: &Denoiser,
    policy: &SchedulePolicy,
    cond: Condition,
    steps: usize,
    rng: &RngState,
) -> Result<Vec<Unconstrained>> {
    let mut acc = vec![[0.0; 4]; steps];
    for k in 0..CALIBRATION_ROLLOUTS {
        let tr = generate_trajectory(
            denoiser,
            ScheduleSource::Policy { policy, sigma: 0.0 },
            cond,
            steps,
            &rng.fork_indexed("rollout", k as u64),
        )?;
        for (a, s) in acc.iter_mut().zip(&tr.steps) {
            let u = s.schedule_u.expect("policy rollouts record u");
            for (x, y) in a.iter_mut().zip(u) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.iter_mut() {
            *x /= CALIBRATION_ROLLOUTS as f64;
        }
    }
    Ok(acc)
}

/// Condition index `i` of an evaluation maps onto class `i mod C`.
pub fn eval_condition(i: usize, num_classes: usize) -> Condition {
    Condition::Class(i % num_classes)
}

pub fn cmd_eval(config: &Config, out: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    config.validate()?;
    let path = match (&opts.checkpoint, opts.mode) {
        (Some(p), _) => p.clone(),
        (None, Some(m)) => out.join(train_checkpoint_name(m)),
        (None, None) => out.join(PRETRAIN_CHECKPOINT),
    };
    if !path.is_file() {
        return Err(Error::Precondition(format!("no checkpoint at {}", path.display())));
    }
    let ck = Checkpoint::load(&path, Some(&config.task))?;
    let steps = opts.steps.unwrap_or_else(|| config.eval_steps());
    if steps == 0 {
        return Err(Error::Config("eval steps must be at least 1".into()));
    }
    let sigma = opts.sigma.unwrap_or(config.eval.sigma);
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("eval sigma must be nonnegative, got {sigma}")));
    }
    let label = match ck.meta.mode {
        Some(m) => m.to_string(),
        None => "pretrain".into(),
    };
    let mut run = Run::start(config, out, "eval", &format!("eval-{label}-t{steps}"))?;
    let denoiser = ck.denoiser()?;
    let policy = ck.policy()?;
    let train_steps = ck.meta.train_steps;
    let preset = PresetSchedule::table1(steps)?;
    let preset_means: Vec<Unconstrained> = (0..steps).map(|t| unsquash(&preset.raw_action(t))).collect();
    let interpolated = policy.is_some() && train_steps != Some(steps);
    let schedule = match (&policy, interpolated) {
        (None, _) => "table1",
        (Some(_), false) => "policy",
        (Some(_), true) => "policy-interpolated",
    };
    let rewards = config.reward_spec();
    let eval_rng = RngState::new(config.run.seed).fork("eval");
    let spc = config.eval.samples_per_condition;
    let mut all: Vec<RewardBreakdown> = Vec::new();
    let mut metrics = JsonLines::create(&run.output("metrics.jsonl"))?;
    for i in 0..config.eval.num_conditions {
        let cond = eval_condition(i, config.task.num_classes);
        let means = match (&policy, interpolated) {
            (Some(p), true) => {
                let src = train_steps.expect("training checkpoints record their horizon");
                let m = calibrated_means(&denoiser, p, cond, src, &eval_rng.fork_indexed("calibration", i as u64))?;
                Some(interpolate_schedule(&m, steps)?)
            }
            _ => None,
        };
        let source = match (&policy, &means) {
            (_, Some(m)) => ScheduleSource::Means { means: m, sigma },
            (Some(p), None) => ScheduleSource::Policy { policy: p, sigma },
            (None, None) if sigma > 0.0 => ScheduleSource::Means {
                means: &preset_means,
                sigma,
            },
            (None, None) => ScheduleSource::Preset(&preset),
        };
        let mut rows = Vec::with_capacity(spc);
        for j in 0..spc {
            let tr = generate_trajectory(
                &denoiser,
                source,
                cond,
                steps,
                &eval_rng.fork_indexed("sample", (i * spc + j) as u64),
            )?;
            rows.push(reward_breakdown(&tr.final_seq, cond, &config.task, &rewards)?);
        }
        let mean = |f: fn(&RewardBreakdown) -> f64| rows.iter().map(f).sum::<f64>() / spc as f64;
        metrics.write(&EvalRow {
            condition: i,
            n: spc,
            composite_mean: mean(|r| r.composite),
            match_mean: mean(|r| r.matched),
            smooth_mean: mean(|r| r.smooth),
        })?;
        all.extend(rows);
    }
    metrics.close()?;
    let col = |f: fn(&RewardBreakdown) -> f64| Moments::of(&all.iter().map(f).collect::<Vec<_>>());
    let report = EvalReport {
        checkpoint: path.strip_prefix(out).unwrap_or(&path).display().to_string(),
        mode: ck.meta.mode,
        steps,
        train_steps,
        interpolated,
        schedule: schedule.into(),
        sigma,
        n: all.len(),
        composite: col(|r| r.composite),
        matched: col(|r| r.matched),
        smooth: col(|r| r.smooth),
    };
    fs::write(
        run.output("report.json"),
        serde_json::to_string_pretty(&report).expect("report") + "\n",
    )?;
    run.note("composite_mean", report.composite.mean);
    run.note("interpolated", interpolated);
    run.finish(&["config.toml", "metrics.jsonl", "report.json"])?;
    Ok(report)
}

pub const SWEEP_HEADER: &str = "gamma,steps,reward_mean,reward_std,n";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub steps: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub n: usize,
}

impl SweepRow {
    /// Monte-Carlo standard error of the mean.
    pub fn std_error(&self) -> f64 {
        self.reward_std / (self.n as f64).sqrt()
    }
}

/// Composite reward of the frozen pretrained model under cosine-gamma
/// presets, one CSV row per (gamma, steps) pair.
pub fn cmd_sweep_gamma(
    config: &Config,
    out: &Path,
    gammas: Option<&[f64]>,
    steps: Option<&[usize]>,
) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let gammas = gammas.unwrap_or(&config.sweep.gammas).to_vec();
    let steps = steps.unwrap_or(&config.sweep.steps).to_vec();
    if gammas.is_empty() || steps.is_empty() {
        return Err(Error::Config("sweep needs at least one gamma and one step count".into()));
    }
    for &g in &gammas {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::Config(format!("gamma must be positive, got {g}")));
        }
    }
    if steps.contains(&0) {
        return Err(Error::Config("sweep steps must be at least 1".into()));
    }
    let base = load_pretrained(config, out)?;
    let mut run = Run::start(config, out, "sweep-gamma", "sweep-gamma")?;
    let denoiser = base.denoiser()?;
    let rewards = config.reward_spec();
    let rng = RngState::new(config.run.seed).fork("sweep");
    let (nc, spc) = (config.sweep.num_conditions, config.sweep.samples_per_condition);
    let mut metrics = JsonLines::create(&run.output("metrics.jsonl"))?;
    let mut rows = Vec::new();
    for &t in &steps {
        for &g in &gammas {
            let preset = PresetSchedule::cosine_gamma(t, g)?;
            let mut vals = Vec::with_capacity(nc * spc);
            for i in 0..nc {
                let cond = eval_condition(i, config.task.num_classes);
                for j in 0..spc {
                    let tr = generate_trajectory(
                        &denoiser,
                        ScheduleSource::Preset(&preset),
                        cond,
                        t,
                        &rng.fork_indexed("sample", (i * spc + j) as u64),
                    )?;
                    vals.push(reward_breakdown(&tr.final_seq, cond, &config.task, &rewards)?.composite);
                }
            }
            let m = Moments::of(&vals);
            let row = SweepRow {
                gamma: g,
                steps: t,
                reward_mean: m.mean,
                reward_std: m.std,
                n: vals.len(),
            };
            metrics.write(&row)?;
            rows.push(row);
        }
    }
    metrics.close()?;
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.gamma, r.steps, r.reward_mean, r.reward_std, r.n));
    }
    fs::write(run.output("csv"), csv)?;
    run.finish(&["config.toml", "metrics.jsonl", "csv"])?;
    Ok(rows)
}
