//! Run configuration: a TOML file with dotted sections, every field required,
//! plus `COGRPO__SECTION__KEY` environment overrides.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::grpo::TrainConfig;
use crate::pretrain::PretrainConfig;
use crate::schedule::SchedulePolicyConfig;
use crate::tasks::{RewardKind, RewardSpec, TaskSpec};

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "COGRPO__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub match_weight: f64,
    pub smooth_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Denoising steps at evaluation; 0 means the training horizon.
    pub steps: usize,
    pub sigma: f64,
    pub num_conditions: usize,
    pub samples_per_condition: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub gammas: Vec<f64>,
    pub steps: Vec<usize>,
    pub num_conditions: usize,
    pub samples_per_condition: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub task: TaskSpec,
    pub rewards: RewardWeights,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub policy: PolicySection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn section_err(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) | Error::Config(m) => cfg_err(format!("[{section}] {m}")),
        other => other,
    }
}

impl Default for Config {
    fn default() -> Self {
        let model = DenoiserConfig::default();
        Self {
            run: RunSection { seed: 0 },
            task: TaskSpec::generate(model.vocab_size, model.seq_len, model.num_classes, 0.2, 0)
                .expect("default task"),
            rewards: RewardWeights {
                match_weight: 0.5,
                smooth_weight: 0.5,
            },
            model: ModelSection {
                hidden: model.hidden,
                layers: model.layers,
            },
            pretrain: PretrainConfig::default(),
            policy: PolicySection { hidden: 16 },
            train: TrainConfig::default(),
            eval: EvalSection {
                steps: 0,
                sigma: 0.0,
                num_conditions: 8,
                samples_per_condition: 50,
            },
            sweep: SweepSection {
                gammas: vec![1.0, 1.5, 2.0],
                steps: vec![16, 48],
                num_conditions: 8,
                samples_per_condition: 75,
            },
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty::<(String, String)>())
    }

    /// Parse `text`, apply `COGRPO__*` entries from `env`, then validate.
    pub fn from_toml_with_env<I, K, V>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: toml::Table = text.parse().map_err(|e| cfg_err(format!("{e}")))?;
        apply_env_overrides(&mut table, env)?;
        let config: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| cfg_err(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Load from `path`, or start from defaults when no file is given.
    pub fn load<I, K, V>(path: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| cfg_err(format!("cannot read config {}: {e}", p.display())))?,
            None => Config::default().to_toml(),
        };
        Self::from_toml_with_env(&text, env).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => cfg_err(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate().map_err(|e| section_err("task", e))?;
        self.reward_spec().validate().map_err(|e| section_err("rewards", e))?;
        if self.model.hidden == 0 || self.model.layers == 0 {
            return Err(cfg_err("[model] hidden and layers must be at least 1"));
        }
        self.pretrain.validate().map_err(|e| section_err("pretrain", e))?;
        if self.policy.hidden == 0 {
            return Err(cfg_err("[policy] hidden must be at least 1"));
        }
        self.train.validate().map_err(|e| section_err("train", e))?;
        if !(self.eval.sigma >= 0.0) || !self.eval.sigma.is_finite() {
            return Err(cfg_err(format!("[eval] sigma must be nonnegative, got {}", self.eval.sigma)));
        }
        if self.eval.num_conditions == 0 || self.eval.samples_per_condition == 0 {
            return Err(cfg_err("[eval] num_conditions and samples_per_condition must be at least 1"));
        }
        if self.sweep.gammas.is_empty() || self.sweep.steps.is_empty() {
            return Err(cfg_err("[sweep] gammas and steps must be nonempty"));
        }
        if let Some(g) = self.sweep.gammas.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return Err(cfg_err(format!("[sweep] gamma must be positive, got {g}")));
        }
        if self.sweep.steps.contains(&0) {
            return Err(cfg_err("[sweep] steps must be at least 1"));
        }
        if self.sweep.num_conditions == 0 || self.sweep.samples_per_condition == 0 {
            return Err(cfg_err("[sweep] num_conditions and samples_per_condition must be at least 1"));
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            vocab_size: self.task.vocab_size,
            seq_len: self.task.seq_len,
            num_classes: self.task.num_classes,
            hidden: self.model.hidden,
            layers: self.model.layers,
        }
    }

    pub fn policy_config(&self) -> SchedulePolicyConfig {
        SchedulePolicyConfig {
            feature_dim: self.model.hidden,
            hidden: self.policy.hidden,
            sigma: self.train.sigma,
        }
    }

    pub fn reward_spec(&self) -> RewardSpec {
        RewardSpec {
            components: vec![
                (RewardKind::Match, self.rewards.match_weight),
                (RewardKind::Smooth, self.rewards.smooth_weight),
            ],
        }
    }

    /// Train section with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.run.seed,
            ..self.train.clone()
        }
    }

    /// Evaluation horizon: the configured one, or the training horizon.
    pub fn eval_steps(&self) -> usize {
        if self.eval.steps == 0 {
            self.train.steps
        } else {
            self.eval.steps
        }
    }
}

fn parse_raw(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Apply `COGRPO__SECTION__KEY=value` pairs to a parsed table. Values are
/// read as TOML literals, falling back to plain strings.
pub fn apply_env_overrides<I, K, V>(table: &mut toml::Table, env: I) -> Result<()>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut pairs: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| {
            k.as_ref()
                .strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase(), v.as_ref().to_string()))
        })
        .collect();
    pairs.sort();
    for (path, raw) in pairs {
        let Some((section, key)) = path.split_once("__") else {
            return Err(cfg_err(format!(
                "override {ENV_PREFIX}{} must name SECTION__KEY",
                path.to_ascii_uppercase()
            )));
        };
        let Some(toml::Value::Table(sec)) = table.get_mut(section) else {
            return Err(cfg_err(format!("override names unknown section [{section}]")));
        };
        sec.insert(key.to_string(), parse_raw(&raw));
    }
    Ok(())
}

/// Reference config with every default and a short note per key.
pub fn reference_config() -> String {
    let c = Config::default();
    let t = &c.train;
    let p = &c.pretrain;
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(w, "# Every key is required. Any key can be overridden from the environment");
    let _ = writeln!(w, "# as {ENV_PREFIX}SECTION__KEY, e.g. {ENV_PREFIX}TRAIN__SIGMA=0.2.");
    let _ = writeln!(w, "\n[run]\n# Master seed; --seed on the command line wins.\nseed = {}", c.run.seed);
    let _ = writeln!(w, "\n[task]");
    let _ = writeln!(w, "vocab_size = {}  # real tokens are 1..=vocab_size, 0 is MASK", c.task.vocab_size);
    let _ = writeln!(w, "seq_len = {}", c.task.seq_len);
    let _ = writeln!(w, "num_classes = {}", c.task.num_classes);
    let _ = writeln!(w, "corruption = {:?}  # per-position noise rate of pretraining data", c.task.corruption);
    let _ = writeln!(w, "# One target pattern per class.");
    let _ = writeln!(w, "patterns = [");
    for pat in &c.task.patterns {
        let _ = writeln!(w, "    {pat:?},");
    }
    let _ = writeln!(w, "]");
    let _ = writeln!(w, "\n[rewards]\n# Nonnegative, summing to 1.");
    let _ = writeln!(w, "match_weight = {:?}\nsmooth_weight = {:?}", c.rewards.match_weight, c.rewards.smooth_weight);
    let _ = writeln!(w, "\n[model]\nhidden = {}\nlayers = {}", c.model.hidden, c.model.layers);
    let _ = writeln!(w, "\n[pretrain]");
    let _ = writeln!(w, "iterations = {}\nbatch_size = {}\nlr = {:?}", p.iterations, p.batch_size, p.lr);
    let _ = writeln!(w, "cond_dropout = {:?}  # probability of training on the null condition", p.cond_dropout);
    let _ = writeln!(w, "eval_batches = {}  # batches averaged for the held-out loss", p.eval_batches);
    let _ = writeln!(w, "\n[policy]\n# Hidden width of the schedule policy head.\nhidden = {}", c.policy.hidden);
    let _ = writeln!(w, "\n[train]");
    let _ = writeln!(w, "group_size_model = {}  # rollouts per condition, model and joint updates", t.group_size_model);
    let _ = writeln!(w, "group_size_schedule = {}  # rollouts per condition, schedule updates", t.group_size_schedule);
    let _ = writeln!(w, "steps = {}  # denoising steps per trajectory", t.steps);
    let _ = writeln!(w, "clip_eps = {:?}\nkl_beta = {:?}", t.clip_eps, t.kl_beta);
    let _ = writeln!(w, "sigma = {:?}  # schedule exploration std, unconstrained space", t.sigma);
    let _ = writeln!(w, "model_updates = {}  # per alternating cycle", t.model_updates);
    let _ = writeln!(w, "schedule_updates = {}  # per alternating cycle", t.schedule_updates);
    let _ = writeln!(w, "cycles = {}", t.cycles);
    let _ = writeln!(w, "lr_model = {:?}\nlr_schedule = {:?}", t.lr_model, t.lr_schedule);
    let _ = writeln!(w, "batch_conditions = {}  # conditions per update", t.batch_conditions);
    let _ = writeln!(w, "epochs_per_batch = {}  # gradient steps per rollout batch", t.epochs_per_batch);
    let _ = writeln!(w, "discount = {:?}  # only 1 is accepted", t.discount);
    let _ = writeln!(w, "\n[eval]");
    let _ = writeln!(w, "steps = {}  # 0 = training horizon", c.eval.steps);
    let _ = writeln!(w, "sigma = {:?}", c.eval.sigma);
    let _ = writeln!(w, "num_conditions = {}\nsamples_per_condition = {}", c.eval.num_conditions, c.eval.samples_per_condition);
    let _ = writeln!(w, "\n[sweep]");
    let _ = writeln!(w, "gammas = {:?}\nsteps = {:?}", c.sweep.gammas, c.sweep.steps);
    let _ = writeln!(w, "num_conditions = {}\nsamples_per_condition = {}", c.sweep.num_conditions, c.sweep.samples_per_condition);
    s
}
