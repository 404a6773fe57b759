//! Offline pre-training, critic warmup, online fine-tuning, evaluation and
//! ablation sweeps.

mod concurrent;
pub mod config;
pub mod metrics;

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::critic::{critic_update, stack, ChunkCritic, CriticStepStats, TdBatch};
use crate::envs::{self, EnvSpec, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::flow::{
    repeat_rows, sample_candidates_batch, sample_chunk, sample_chunks, BcObjective, FlowBatch, FlowPolicy,
    VelocityField,
};
use crate::numerics::checkpoint::Checkpoint;
use crate::numerics::{AdamConfig, AdamState, Objective};
use crate::poco::{importance_weights, poco_value_and_grad, weight_entropy, PocoBatch, PocoHyper, PocoStats};
use crate::replay::{ChunkTransition, DemoSet, Episode, ReplayBuffer, StepRecord};

pub use config::{Mode, TrainConfig};
pub use metrics::{EvalRow, MetricsRow, Phase, RunningSuccess};

/// Episodes in the running success window.
pub const SUCCESS_WINDOW: usize = 20;

/// Independent random stream derived from the run seed.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(envs::splitmix(seed ^ h))
}

pub fn new_actor(cfg: &TrainConfig) -> Result<FlowPolicy> {
    FlowPolicy::new(
        STATE_DIM,
        cfg.chunk_len,
        ACTION_DIM,
        cfg.flow_steps,
        &cfg.actor_hidden,
        &mut stream(cfg.seed, "actor-init"),
    )
}

pub fn new_critic(cfg: &TrainConfig) -> Result<ChunkCritic> {
    ChunkCritic::new(
        STATE_DIM,
        cfg.chunk_len,
        ACTION_DIM,
        &cfg.critic_hidden,
        &mut stream(cfg.seed, "critic-init"),
    )
}

/// Check that a loaded actor fits the configured task.
pub fn check_actor(cfg: &TrainConfig, actor: &FlowPolicy) -> Result<()> {
    if actor.state_dim != STATE_DIM || actor.action_dim != ACTION_DIM || actor.horizon != cfg.chunk_len {
        return Err(Error::Config(format!(
            "actor has state/action/chunk dims {}/{}/{}, config needs {STATE_DIM}/{ACTION_DIM}/{}",
            actor.state_dim, actor.action_dim, actor.horizon, cfg.chunk_len
        )));
    }
    Ok(())
}

/// Demonstrations from `demo_file` when set, otherwise freshly collected.
pub fn demos_for(cfg: &TrainConfig) -> Result<DemoSet> {
    match &cfg.demo_file {
        Some(path) => crate::replay::load_demos(path),
        None => collect(cfg),
    }
}

pub fn collect(cfg: &TrainConfig) -> Result<DemoSet> {
    Ok(DemoSet {
        state_dim: STATE_DIM,
        action_dim: ACTION_DIM,
        episodes: envs::collect_demos(&cfg.env, cfg.num_demos, cfg.seed, cfg.demo_noise)?,
    })
}

fn demo_buffer(cfg: &TrainConfig, demos: &DemoSet) -> Result<ReplayBuffer> {
    if demos.episodes.iter().all(|e| e.is_empty()) {
        return Err(Error::Empty("no demonstration steps".into()));
    }
    if demos.state_dim != STATE_DIM || demos.action_dim != ACTION_DIM {
        return Err(Error::Config(format!(
            "demos have state/action dims {}/{}, environment has {STATE_DIM}/{ACTION_DIM}",
            demos.state_dim, demos.action_dim
        )));
    }
    let mut buffer = ReplayBuffer::new(STATE_DIM, ACTION_DIM, cfg.chunk_len, cfg.buffer_capacity)?;
    for e in &demos.episodes {
        buffer.push_episode(e.clone())?;
    }
    Ok(buffer)
}

fn states_and_chunks(transitions: &[ChunkTransition]) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((
        stack(transitions.iter().map(|t| t.state.as_slice()))?,
        stack(transitions.iter().map(|t| t.chunk.as_slice()))?,
    ))
}

/// Flow-matching batch over sampled buffer windows.
pub fn bc_batch<R: rand::Rng + ?Sized>(transitions: &[ChunkTransition], rng: &mut R) -> Result<FlowBatch> {
    let (states, chunks) = states_and_chunks(transitions)?;
    FlowBatch::with_draws(states, chunks, rng)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub success_rate: f64,
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
}

/// Roll out `n_trials` episodes from stratified evaluation starts, all trials
/// advancing together one chunk at a time. Nothing is recorded for training.
pub fn evaluate<F: VelocityField + ?Sized>(
    spec: &EnvSpec,
    field: &F,
    n_trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one trial".into()));
    }
    if field.state_dim() != STATE_DIM || !field.chunk_dim().is_multiple_of(ACTION_DIM) {
        return Err(Error::Shape("policy does not match the environment".into()));
    }
    let horizon = field.chunk_dim() / ACTION_DIM;
    let mut rng = stream(seed, "eval-policy");
    let mut states = envs::stratified_starts(spec, envs::eval_seed(seed, 0), n_trials);
    let mut returns = vec![0.0; n_trials];
    loop {
        let active: Vec<usize> = (0..n_trials).filter(|&i| !states[i].done).collect();
        if active.is_empty() {
            break;
        }
        let rows: Vec<Vec<f64>> = active.iter().map(|&i| states[i].observation(spec)).collect();
        let obs = stack(rows.iter().map(|r| r.as_slice()))?;
        let chunks = sample_chunks(field, obs.view(), &mut rng)?;
        for (row, &i) in active.iter().enumerate() {
            for t in 0..horizon {
                if states[i].done {
                    break;
                }
                let a = chunks.row(row);
                let out = envs::step(
                    spec,
                    &states[i],
                    &a.as_slice().expect("row-major")[t * ACTION_DIM..(t + 1) * ACTION_DIM],
                )?;
                returns[i] += out.reward;
                states[i] = out.state;
            }
        }
    }
    let successes: Vec<bool> = states.iter().map(|s| s.success).collect();
    Ok(EvalReport {
        success_rate: successes.iter().filter(|&&s| s).count() as f64 / n_trials as f64,
        returns,
        successes,
    })
}

fn eval_row(cfg: &TrainConfig, actor: &FlowPolicy, step: u64, phase: Phase) -> Result<EvalRow> {
    let r = evaluate(&cfg.env, actor, cfg.eval_trials, cfg.seed)?;
    Ok(EvalRow {
        global_step: step,
        phase,
        success_rate: r.success_rate,
        mean_return: r.returns.iter().sum::<f64>() / r.returns.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub actor: FlowPolicy,
    pub rows: Vec<MetricsRow>,
    pub eval: Option<EvalRow>,
}

/// Flow-matching regression on demonstration windows. With `evaluate_after`
/// the result is evaluated on `eval_trials` episodes.
pub fn pretrain(cfg: &TrainConfig, demos: &DemoSet, evaluate_after: bool) -> Result<PretrainReport> {
    cfg.validate()?;
    let buffer = demo_buffer(cfg, demos)?;
    let mut actor = new_actor(cfg)?;
    pretrain_actor(cfg, &mut actor, &buffer, evaluate_after)
}

fn offline_row(step: u64, bc: Option<f64>) -> MetricsRow {
    MetricsRow {
        global_step: step,
        phase: Phase::Offline,
        episodes: 0,
        success_rate_20: None,
        critic_loss: None,
        bc_loss: bc,
        surrogate_loss: None,
        weight_entropy: None,
        q_mean: None,
    }
}

fn pretrain_actor(
    cfg: &TrainConfig,
    actor: &mut FlowPolicy,
    buffer: &ReplayBuffer,
    evaluate_after: bool,
) -> Result<PretrainReport> {
    let mut rng = stream(cfg.seed, "pretrain");
    let mut adam = AdamState::new(&actor.params, AdamConfig::default());
    let mut bc = metrics::Mean::default();
    let mut rows = Vec::new();
    for step in 1..=cfg.offline_steps {
        let batch = bc_batch(&buffer.sample_batch(cfg.batch_size, &mut rng)?, &mut rng)?;
        let (loss, grads) = BcObjective {
            policy: actor,
            batch: &batch,
        }
        .value_and_grad(&actor.params)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                phase: Phase::Offline.name().into(),
                message: format!("behavior cloning loss evaluated to {loss}"),
            });
        }
        adam.apply(&mut actor.params, &grads, cfg.offline_lr)?;
        bc.add(loss);
        if step % cfg.log_every == 0 || step == cfg.offline_steps {
            rows.push(offline_row(step, bc.take()));
        }
    }
    let eval = if evaluate_after {
        Some(eval_row(cfg, actor, cfg.offline_steps, Phase::Offline)?)
    } else {
        None
    };
    Ok(PretrainReport {
        actor: actor.clone(),
        rows,
        eval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorStepStats {
    pub poco: PocoStats,
    pub weight_entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterStats {
    pub phase: Phase,
    pub critic: CriticStepStats,
    pub actor: Option<ActorStepStats>,
}

/// Actor, critic and optimizer state, with the warmup/online phase guard.
#[derive(Debug, Clone)]
pub struct Learner {
    pub actor: FlowPolicy,
    pub critic: ChunkCritic,
    actor_adam: AdamState,
    critic_adam: AdamState,
    pub hyper: PocoHyper,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    /// Gradient iterations started so far.
    pub iteration: u64,
}

impl Learner {
    pub fn new(cfg: &TrainConfig, actor: FlowPolicy, critic: ChunkCritic) -> Result<Self> {
        cfg.validate()?;
        check_actor(cfg, &actor)?;
        Ok(Learner {
            actor_adam: AdamState::new(&actor.params, AdamConfig::default()),
            critic_adam: AdamState::new(&critic.params, AdamConfig::default()),
            actor,
            critic,
            hyper: cfg.hyper(),
            gamma: cfg.gamma,
            tau: cfg.tau,
            actor_lr: cfg.actor_lr,
            critic_lr: cfg.critic_lr,
            batch_size: cfg.batch_size,
            warmup_steps: cfg.warmup_steps,
            iteration: 0,
        })
    }

    /// Phase of the most recent iteration.
    pub fn phase(&self) -> Phase {
        if self.iteration <= self.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Online
        }
    }

    /// One gradient iteration: critic only during warmup, critic then actor
    /// afterwards.
    pub fn iterate<R: rand::Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<IterStats> {
        self.iteration += 1;
        let transitions = buffer.sample_batch(self.batch_size, rng)?;
        let phase = self.phase();
        let batch = TdBatch::with_actor(transitions.clone(), &self.actor, rng)?;
        let critic = critic_update(
            &mut self.critic,
            &mut self.critic_adam,
            &batch,
            self.gamma,
            self.critic_lr,
            self.tau,
        )?;
        let actor = match phase {
            Phase::Online => Some(self.actor_step(&transitions, rng)?),
            _ => None,
        };
        Ok(IterStats { phase, critic, actor })
    }

    /// Candidate sampling, critic weighting and one step on the clipped,
    /// weighted objective. Refused while the critic is warming up.
    pub fn actor_step<R: rand::Rng + ?Sized>(
        &mut self,
        transitions: &[ChunkTransition],
        rng: &mut R,
    ) -> Result<ActorStepStats> {
        if self.iteration <= self.warmup_steps {
            return Err(Error::ContractViolation(format!(
                "actor update at iteration {} inside the {}-iteration critic warmup",
                self.iteration, self.warmup_steps
            )));
        }
        let n = self.hyper.num_candidates;
        let (states, chunks) = states_and_chunks(transitions)?;
        let cands = sample_candidates_batch(&self.actor, states.view(), n, rng)?;
        let rep = repeat_rows(states.view(), n);
        let q = self.critic.q_values(rep.view(), cands.view())?;
        let b = states.nrows();
        let mut weights = Array2::zeros((b, n));
        let mut entropy = 0.0;
        for i in 0..b {
            let w = importance_weights(&q[i * n..(i + 1) * n], self.hyper.eta)?;
            entropy += weight_entropy(&w);
            weights.row_mut(i).assign(&ndarray::Array1::from(w));
        }
        let buffer = FlowBatch::with_draws(states, chunks, rng)?;
        let candidates = FlowBatch::with_draws(rep, cands, rng)?;
        let batch = PocoBatch::new(buffer, candidates, weights)?;
        let (stats, grads) = poco_value_and_grad(&self.actor, &self.actor.params, &batch, &self.hyper)?;
        if !stats.loss.is_finite() {
            return Err(Error::NumericalOverflow(format!(
                "actor loss evaluated to {}",
                stats.loss
            )));
        }
        self.actor_adam.apply(&mut self.actor.params, &grads, self.actor_lr)?;
        Ok(ActorStepStats {
            poco: stats,
            weight_entropy: entropy / b as f64,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub actor: FlowPolicy,
    pub critic: ChunkCritic,
    pub rows: Vec<MetricsRow>,
    pub evals: Vec<EvalRow>,
    /// Evaluation success of the starting actor.
    pub initial_success: f64,
    pub episodes: u64,
    pub env_steps: u64,
    pub iterations: u64,
    /// Environment step at which the running success over episodes begun
    /// after the warmup first reached `stop_success`, when it did.
    pub reached_at: Option<u64>,
    pub outcomes: Vec<EpisodeOutcome>,
}

/// How one online episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeOutcome {
    /// Environment steps taken when the episode ended.
    pub env_step: u64,
    pub success: bool,
    /// Whether actor updates had begun when the episode started.
    pub after_warmup: bool,
}

impl FinetuneReport {
    /// First environment step at which the last `SUCCESS_WINDOW` episodes
    /// begun after the warmup succeeded at a rate of at least `threshold`.
    pub fn first_reach(&self, threshold: f64) -> Option<u64> {
        let mut window = RunningSuccess::new(SUCCESS_WINDOW);
        self.outcomes.iter().filter(|o| o.after_warmup).find_map(|o| {
            window.push(o.success);
            (window.is_full() && window.rate().unwrap_or(0.0) >= threshold).then_some(o.env_step)
        })
    }

    pub fn final_success(&self) -> f64 {
        self.evals.last().map_or(self.initial_success, |e| e.success_rate)
    }

    /// Highest running-20 success over logged rows with a full window.
    pub fn best_running_success(&self) -> Option<f64> {
        self.rows.iter().filter_map(|r| r.success_rate_20).reduce(f64::max)
    }
}

/// Accumulates per-iteration statistics into log rows.
#[derive(Debug, Default)]
struct RowBuilder {
    critic_loss: metrics::Mean,
    bc_loss: metrics::Mean,
    surrogate: metrics::Mean,
    entropy: metrics::Mean,
    q_mean: metrics::Mean,
}

impl RowBuilder {
    fn add(&mut self, s: &IterStats) {
        self.critic_loss.add(s.critic.loss);
        self.q_mean.add(s.critic.q_mean);
        if let Some(a) = s.actor {
            self.bc_loss.add(a.poco.bc_loss);
            self.surrogate.add(a.poco.surrogate);
            self.entropy.add(a.weight_entropy);
        }
    }

    fn row(&mut self, global_step: u64, phase: Phase, episodes: u64, success: Option<f64>) -> MetricsRow {
        MetricsRow {
            global_step,
            phase,
            episodes,
            success_rate_20: success,
            critic_loss: self.critic_loss.take(),
            bc_loss: self.bc_loss.take(),
            surrogate_loss: self.surrogate.take(),
            weight_entropy: self.entropy.take(),
            q_mean: self.q_mean.take(),
        }
    }
}

/// Write actor, critic and a text report next to the checkpoints, then turn
/// the failure into [`Error::Diverged`].
fn diverged(cfg: &TrainConfig, learner: &Learner, step: u64, err: Error) -> Error {
    let phase = learner.phase().name().to_string();
    let message = err.to_string();
    if let Some(dir) = &cfg.checkpoint_dir {
        let dump = dir.join("diverged");
        let _ = std::fs::create_dir_all(&dump);
        if let Ok(c) = learner.actor.to_checkpoint() {
            let _ = c.save(dump.join("actor.ckpt"));
        }
        if let Ok(c) = learner.critic.to_checkpoint(learner.tau) {
            let _ = c.save(dump.join("critic.ckpt"));
        }
        let report = format!(
            "env_step = {step}\niteration = {}\nphase = {phase}\nerror = {message}\nactor_finite = {}\ncritic_finite = {}\n",
            learner.iteration,
            learner.actor.params.is_finite(),
            learner.critic.params.is_finite()
        );
        let _ = std::fs::write(dump.join("report.txt"), report);
    }
    Error::Diverged { step, phase, message }
}

/// Critic warmup followed by online fine-tuning, with interaction and
/// learning interleaved in one thread.
pub fn finetune(cfg: &TrainConfig, actor: FlowPolicy, demos: &DemoSet) -> Result<FinetuneReport> {
    cfg.validate()?;
    let buffer = demo_buffer(cfg, demos)?;
    let learner = Learner::new(cfg, actor, new_critic(cfg)?)?;
    match cfg.mode {
        Mode::Sequential => finetune_sequential(cfg, learner, buffer),
        Mode::Concurrent => concurrent::finetune(cfg, learner, buffer),
    }
}

/// One training episode: a chunk is sampled from `field` every `T` steps and
/// executed open loop. Returns the episode and whether it succeeded; at most
/// `budget` steps are taken.
pub fn rollout<F, R>(
    spec: &EnvSpec,
    field: &F,
    seed: u64,
    episode_id: u64,
    budget: u64,
    rng: &mut R,
) -> Result<(Episode, bool)>
where
    F: VelocityField + ?Sized,
    R: rand::Rng + ?Sized,
{
    let horizon = field.chunk_dim() / ACTION_DIM;
    let mut state = envs::reset(spec, seed);
    let mut records = Vec::new();
    while !state.done && (records.len() as u64) < budget {
        let chunk = sample_chunk(field, &state.observation(spec), rng)?;
        for t in 0..horizon {
            if state.done || records.len() as u64 >= budget {
                break;
            }
            let action = chunk.step(t, ACTION_DIM).to_vec();
            let out = envs::step(spec, &state, &action)?;
            records.push(StepRecord {
                state: state.observation(spec),
                action,
                reward: out.reward,
                done: out.done,
                episode_id,
                step_index: records.len(),
            });
            state = out.state;
        }
    }
    Ok((
        Episode {
            records,
            final_state: Some(state.observation(spec)),
        },
        state.success,
    ))
}

fn finetune_sequential(cfg: &TrainConfig, mut learner: Learner, mut buffer: ReplayBuffer) -> Result<FinetuneReport> {
    let spec = &cfg.env;
    let horizon = cfg.chunk_len;
    let mut act_rng = stream(cfg.seed, "interaction");
    let mut upd_rng = stream(cfg.seed, "update");
    let mut running = RunningSuccess::new(SUCCESS_WINDOW);
    // only episodes begun after actor updates started count toward stopping
    let mut tuned = RunningSuccess::new(SUCCESS_WINDOW);
    let mut builder = RowBuilder::default();
    let mut rows = Vec::new();
    let initial = eval_row(cfg, &learner.actor, 0, Phase::Warmup)?;
    let initial_success = initial.success_rate;
    let mut evals = vec![initial];
    let (mut env_steps, mut episodes, mut owed) = (0u64, 0u64, 0.0f64);
    let (mut next_log, mut next_eval) = (cfg.log_every, cfg.eval_every);
    let mut reached_at = None;
    let mut outcomes = Vec::new();
    let mut episode_id = demos_max_id(&buffer) + 1;

    while env_steps < cfg.online_steps && reached_at.is_none() {
        let seed = envs::train_seed(cfg.seed, episodes);
        let mut state = envs::reset(spec, seed);
        let mut records = Vec::new();
        let started_online = learner.phase() == Phase::Online;
        while !state.done && env_steps < cfg.online_steps {
            // one policy query per chunk, executed open loop
            let chunk = sample_chunk(&learner.actor, &state.observation(spec), &mut act_rng)?;
            let mut executed = 0u64;
            for t in 0..horizon {
                if state.done || env_steps >= cfg.online_steps {
                    break;
                }
                let action = chunk.step(t, ACTION_DIM).to_vec();
                let out = envs::step(spec, &state, &action)?;
                records.push(StepRecord {
                    state: state.observation(spec),
                    action,
                    reward: out.reward,
                    done: out.done,
                    episode_id,
                    step_index: records.len(),
                });
                state = out.state;
                env_steps += 1;
                executed += 1;
            }
            if state.done || env_steps >= cfg.online_steps {
                buffer.push_episode(Episode {
                    records: std::mem::take(&mut records),
                    final_state: Some(state.observation(spec)),
                })?;
                running.push(state.success);
                if started_online {
                    tuned.push(state.success);
                }
                outcomes.push(EpisodeOutcome {
                    env_step: env_steps,
                    success: state.success,
                    after_warmup: started_online,
                });
                episodes += 1;
                episode_id += 1;
                if cfg.stop_success > 0.0 && tuned.is_full() && tuned.rate().unwrap_or(0.0) >= cfg.stop_success {
                    reached_at = Some(env_steps);
                }
            }
            owed += cfg.utd_ratio * executed as f64;
            while owed >= 1.0 {
                owed -= 1.0;
                let stats = learner.iterate(&buffer, &mut upd_rng).map_err(|e| match e {
                    Error::NumericalOverflow(_) => diverged(cfg, &learner, env_steps, e),
                    other => other,
                })?;
                builder.add(&stats);
            }
            while env_steps >= next_log {
                rows.push(builder.row(env_steps, learner.phase(), episodes, running.rate()));
                next_log += cfg.log_every;
            }
            while env_steps >= next_eval {
                evals.push(eval_row(cfg, &learner.actor, env_steps, learner.phase())?);
                next_eval += cfg.eval_every;
            }
        }
    }
    if rows.last().is_none_or(|r| r.global_step != env_steps) {
        rows.push(builder.row(env_steps, learner.phase(), episodes, running.rate()));
    }
    if evals.last().is_none_or(|r| r.global_step != env_steps) {
        evals.push(eval_row(cfg, &learner.actor, env_steps, learner.phase())?);
    }
    Ok(FinetuneReport {
        iterations: learner.iteration,
        actor: learner.actor,
        critic: learner.critic,
        rows,
        evals,
        initial_success,
        episodes,
        env_steps,
        reached_at,
        outcomes,
    })
}

fn demos_max_id(buffer: &ReplayBuffer) -> u64 {
    buffer
        .episodes()
        .filter_map(|e| e.records.first())
        .map(|r| r.episode_id)
        .max()
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationParam {
    Zeta,
    Beta,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Zeta => "zeta",
            AblationParam::Beta => "beta",
        }
    }
}

impl std::str::FromStr for AblationParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeta" => Ok(AblationParam::Zeta),
            "beta" => Ok(AblationParam::Beta),
            other => Err(Error::Config(format!("can only sweep zeta or beta, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub value: f64,
    pub report: FinetuneReport,
}

/// One fine-tuning run per value, each from the same actor and seed.
pub fn ablate(
    cfg: &TrainConfig,
    param: AblationParam,
    values: &[f64],
    actor: &FlowPolicy,
    demos: &DemoSet,
) -> Result<Vec<AblationRun>> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one value".into()));
    }
    values
        .iter()
        .map(|&value| {
            let mut c = cfg.clone();
            match param {
                AblationParam::Zeta => c.zeta = value,
                AblationParam::Beta => c.beta = value,
            }
            if let Some(dir) = &cfg.checkpoint_dir {
                c.checkpoint_dir = Some(dir.join(format!("{}_{value}", param.name())));
            }
            Ok(AblationRun {
                value,
                report: finetune(&c, actor.clone(), demos)?,
            })
        })
        .collect()
}

/// Metrics of all runs in one table, keyed by the swept value.
pub fn ablation_csv(param: AblationParam, runs: &[AblationRun]) -> String {
    let mut out = format!("{},{}\n", param.name(), metrics::METRICS_HEADER);
    for run in runs {
        let body = metrics::metrics_csv(&run.report.rows);
        for line in body.lines().skip(1) {
            out.push_str(&format!("{},{line}\n", run.value));
        }
    }
    out
}

/// Save checkpoints and CSVs of a fine-tuning run under `dir`.
pub fn save_finetune(dir: &Path, report: &FinetuneReport, tau: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    report.actor.to_checkpoint()?.save(dir.join("actor.ckpt"))?;
    report.critic.to_checkpoint(tau)?.save(dir.join("critic.ckpt"))?;
    metrics::write_text(&dir.join("metrics.csv"), &metrics::metrics_csv(&report.rows))?;
    metrics::write_text(&dir.join("eval.csv"), &metrics::eval_csv(&report.evals))
}

pub fn load_actor(path: impl AsRef<Path>) -> Result<FlowPolicy> {
    FlowPolicy::from_checkpoint(&Checkpoint::load(path)?)
}
