//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::envs::{EnvKind, EnvSpec, RewardConvention, DEFAULT_DEMO_NOISE};
use crate::error::{Error, Result};
use crate::poco::PocoHyper;
use crate::replay::DEFAULT_CAPACITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Concurrent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvSpec,
    /// Chunk length `T`.
    pub chunk_len: usize,
    /// Euler steps `K`.
    pub flow_steps: usize,
    /// Candidates per state `N`.
    pub num_candidates: usize,
    pub gamma: f64,
    pub eta: f64,
    pub beta: f64,
    pub zeta: f64,
    pub batch_size: usize,
    /// Actor step size during pre-training.
    pub offline_lr: f64,
    /// Actor step size during fine-tuning.
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub offline_steps: u64,
    /// Critic-only gradient iterations before the actor is updated.
    pub warmup_steps: u64,
    /// Environment steps of online interaction, warmup included.
    pub online_steps: u64,
    /// Gradient iterations per environment step.
    pub utd_ratio: f64,
    pub eval_every: u64,
    pub eval_trials: usize,
    /// Metrics row interval: gradient steps offline, environment steps online.
    pub log_every: u64,
    /// Stop fine-tuning once the running-20 success reaches this; 0 disables.
    pub stop_success: f64,
    pub num_demos: usize,
    pub demo_noise: f64,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub mode: Mode,
    pub demo_file: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_file: Option<PathBuf>,
    pub eval_file: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(kind: EnvKind) -> Self {
        TrainConfig {
            env: EnvSpec::new(kind),
            chunk_len: 5,
            flow_steps: 10,
            num_candidates: 8,
            gamma: 0.99,
            eta: 0.01,
            beta: 1.0,
            zeta: 0.5,
            batch_size: 64,
            offline_lr: 3e-4,
            actor_lr: 1e-3,
            critic_lr: 3e-4,
            tau: 0.005,
            actor_hidden: vec![32, 32],
            critic_hidden: vec![64, 64],
            offline_steps: 7_000,
            warmup_steps: 1_000,
            online_steps: 100_000,
            utd_ratio: 0.2,
            eval_every: 1_000,
            eval_trials: 50,
            log_every: 1_000,
            stop_success: 0.0,
            num_demos: 50,
            demo_noise: DEFAULT_DEMO_NOISE,
            buffer_capacity: DEFAULT_CAPACITY,
            seed: 0,
            mode: Mode::Sequential,
            demo_file: None,
            checkpoint_dir: None,
            metrics_file: None,
            eval_file: None,
        }
    }

    pub fn hyper(&self) -> PocoHyper {
        PocoHyper {
            eta: self.eta,
            beta: self.beta,
            zeta: self.zeta,
            num_candidates: self.num_candidates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.chunk_len == 0 || self.flow_steps == 0 || self.num_candidates == 0 || self.batch_size == 0 {
            return bad("chunk_len, flow_steps, num_candidates and batch_size must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.tau >= 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in [0, 1]");
        }
        if !(self.offline_lr > 0.0) || !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.utd_ratio > 0.0) || !self.utd_ratio.is_finite() {
            return bad("utd_ratio must be positive");
        }
        if self.eval_every == 0 || self.eval_trials == 0 || self.log_every == 0 {
            return bad("eval_every, eval_trials and log_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.stop_success) {
            return bad("stop_success must lie in [0, 1]");
        }
        if self.num_demos == 0 || !(self.demo_noise >= 0.0) {
            return bad("num_demos must be positive and demo_noise nonnegative");
        }
        if self.actor_hidden.is_empty() || self.critic_hidden.is_empty() {
            return bad("hidden layer lists must be nonempty");
        }
        self.hyper().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "env" => self.env = EnvSpec::new(v.parse::<EnvKind>()?),
            "env_horizon" => self.env.horizon = num(key, v)?,
            "reward" => self.env.reward = v.parse::<RewardConvention>()?,
            "goal_tolerance" => self.env.goal_tolerance = num(key, v)?,
            "expert_gain" => self.env.expert_gain = num(key, v)?,
            "start_half_extent" => {
                let h: f64 = num(key, v)?;
                self.env.start_half_extent = [h, h];
            }
            "chunk_len" => self.chunk_len = num(key, v)?,
            "flow_steps" => self.flow_steps = num(key, v)?,
            "num_candidates" => self.num_candidates = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "eta" => self.eta = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "zeta" => self.zeta = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "offline_lr" => self.offline_lr = num(key, v)?,
            "actor_lr" => self.actor_lr = num(key, v)?,
            "critic_lr" => self.critic_lr = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "actor_hidden" => self.actor_hidden = dims(key, v)?,
            "critic_hidden" => self.critic_hidden = dims(key, v)?,
            "offline_steps" => self.offline_steps = num(key, v)?,
            "warmup_steps" => self.warmup_steps = num(key, v)?,
            "online_steps" => self.online_steps = num(key, v)?,
            "utd_ratio" => self.utd_ratio = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "eval_trials" => self.eval_trials = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "stop_success" => self.stop_success = num(key, v)?,
            "num_demos" => self.num_demos = num(key, v)?,
            "demo_noise" => self.demo_noise = num(key, v)?,
            "buffer_capacity" => self.buffer_capacity = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "mode" => {
                self.mode = match v {
                    "sequential" => Mode::Sequential,
                    "concurrent" => Mode::Concurrent,
                    _ => {
                        return Err(Error::Config(format!(
                            "mode must be sequential or concurrent, got {v:?}"
                        )))
                    }
                }
            }
            "demo_file" => self.demo_file = Some(PathBuf::from(v)),
            "checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(v)),
            "metrics_file" => self.metrics_file = Some(PathBuf::from(v)),
            "eval_file" => self.eval_file = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a config file body on top of the defaults for `point_reach`.
    /// An `env` line resets the geometry to that environment's defaults, so
    /// it should come before geometry overrides.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::new(EnvKind::PointReach);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(message) => Error::Parse { line: i + 1, message },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Render as a config file that parses back to `self`.
    pub fn to_text(&self) -> String {
        let join = |d: &[usize]| d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("env = {}", self.env.kind.name()),
            format!("env_horizon = {}", self.env.horizon),
            format!("reward = {}", self.env.reward.name()),
            format!("goal_tolerance = {}", self.env.goal_tolerance),
            format!("expert_gain = {}", self.env.expert_gain),
            format!("start_half_extent = {}", self.env.start_half_extent[0]),
            format!("chunk_len = {}", self.chunk_len),
            format!("flow_steps = {}", self.flow_steps),
            format!("num_candidates = {}", self.num_candidates),
            format!("gamma = {}", self.gamma),
            format!("eta = {}", self.eta),
            format!("beta = {}", self.beta),
            format!("zeta = {}", self.zeta),
            format!("batch_size = {}", self.batch_size),
            format!("offline_lr = {}", self.offline_lr),
            format!("actor_lr = {}", self.actor_lr),
            format!("critic_lr = {}", self.critic_lr),
            format!("tau = {}", self.tau),
            format!("actor_hidden = {}", join(&self.actor_hidden)),
            format!("critic_hidden = {}", join(&self.critic_hidden)),
            format!("offline_steps = {}", self.offline_steps),
            format!("warmup_steps = {}", self.warmup_steps),
            format!("online_steps = {}", self.online_steps),
            format!("utd_ratio = {}", self.utd_ratio),
            format!("eval_every = {}", self.eval_every),
            format!("eval_trials = {}", self.eval_trials),
            format!("log_every = {}", self.log_every),
            format!("stop_success = {}", self.stop_success),
            format!("num_demos = {}", self.num_demos),
            format!("demo_noise = {}", self.demo_noise),
            format!("buffer_capacity = {}", self.buffer_capacity),
            format!("seed = {}", self.seed),
            format!(
                "mode = {}",
                match self.mode {
                    Mode::Sequential => "sequential",
                    Mode::Concurrent => "concurrent",
                }
            ),
        ];
        let paths = [
            ("demo_file", &self.demo_file),
            ("checkpoint_dir", &self.checkpoint_dir),
            ("metrics_file", &self.metrics_file),
            ("eval_file", &self.eval_file),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                lines.push(format!("{k} = {}", p.display()));
            }
        }
        lines.join("\n") + "\n"
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn dims(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|d| num(key, d.trim())).collect()
}
