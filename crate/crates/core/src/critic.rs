//! Chunk-level action-value function trained on multi-step TD targets.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::flow::{sample_chunks, ActionChunk, VelocityField};
use crate::numerics::checkpoint::Checkpoint;
use crate::numerics::{
    backward, forward_batch, forward_trace, polyak_update_in_place, AdamState, MlpSpec, Objective, ParamSet,
};
use crate::replay::ChunkTransition;

/// `Q(s, a_chunk)` with a Polyak-averaged target copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkCritic {
    pub spec: MlpSpec,
    pub params: ParamSet,
    pub target_params: ParamSet,
    pub state_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
}

impl ChunkCritic {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        horizon: usize,
        action_dim: usize,
        hidden_dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if state_dim == 0 || horizon == 0 || action_dim == 0 {
            return Err(Error::InvalidArgument("critic dimensions must be positive".into()));
        }
        let spec = MlpSpec::new(state_dim + horizon * action_dim, hidden_dims, 1, true)?;
        let params = ParamSet::init(&spec, rng);
        Ok(ChunkCritic {
            spec,
            target_params: params.clone(),
            params,
            state_dim,
            horizon,
            action_dim,
        })
    }

    pub fn chunk_dim(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn input(&self, states: ArrayView2<f64>, chunks: ArrayView2<f64>) -> Result<Array2<f64>> {
        if states.ncols() != self.state_dim || chunks.ncols() != self.chunk_dim() || states.nrows() != chunks.nrows() {
            return Err(shape_err(format!(
                "critic input: states {:?}, chunks {:?}",
                states.dim(),
                chunks.dim()
            )));
        }
        concatenate(Axis(1), &[states, chunks]).map_err(|e| shape_err(e.to_string()))
    }

    fn eval(&self, params: &ParamSet, states: ArrayView2<f64>, chunks: ArrayView2<f64>) -> Result<Vec<f64>> {
        let x = self.input(states, chunks)?;
        Ok(forward_batch(&self.spec, params, x.view())?.into_raw_vec_and_offset().0)
    }

    /// Online network values, one per row.
    pub fn q_values(&self, states: ArrayView2<f64>, chunks: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.eval(&self.params, states, chunks)
    }

    pub fn target_q_values(&self, states: ArrayView2<f64>, chunks: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.eval(&self.target_params, states, chunks)
    }

    pub fn q_value(&self, state: &[f64], chunk: &ActionChunk) -> Result<f64> {
        let s = row(state)?;
        let c = row(chunk.as_slice())?;
        Ok(self.q_values(s.view(), c.view())?[0])
    }

    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        polyak_update_in_place(&mut self.target_params, &self.params, tau)
    }

    pub fn to_checkpoint(&self, tau: f64) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", "critic")?;
        ckpt.set_meta("T", self.horizon)?;
        ckpt.set_meta("A", self.action_dim)?;
        ckpt.set_meta("state_dim", self.state_dim)?;
        ckpt.set_meta("tau", tau)?;
        ckpt.put_spec("critic", &self.spec)?;
        ckpt.put_params("critic", &self.params);
        ckpt.put_params("critic_target", &self.target_params);
        Ok(ckpt)
    }

    /// Restore a critic and the averaging rate stored with it.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, f64)> {
        if ckpt.meta("kind")? != "critic" {
            return Err(Error::Checkpoint("not a critic checkpoint".into()));
        }
        let spec = ckpt.spec("critic")?;
        let critic = ChunkCritic {
            params: ckpt.params("critic", &spec)?,
            target_params: ckpt.params("critic_target", &spec)?,
            state_dim: ckpt.meta_parse("state_dim")?,
            horizon: ckpt.meta_parse("T")?,
            action_dim: ckpt.meta_parse("A")?,
            spec,
        };
        if critic.spec.input_dim != critic.state_dim + critic.chunk_dim() || critic.spec.output_dim != 1 {
            return Err(Error::Checkpoint(
                "critic header inconsistent with network shape".into(),
            ));
        }
        Ok((critic, ckpt.meta_parse("tau")?))
    }
}

fn row(v: &[f64]) -> Result<Array2<f64>> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).map_err(|e| shape_err(e.to_string()))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("discount {gamma} outside (0, 1)")));
    }
    Ok(())
}

fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        acc += discount * r;
        discount *= gamma;
    }
    acc
}

fn check_window(rewards: &[f64], terminal: bool, horizon: usize) -> Result<()> {
    if rewards.is_empty() {
        return Err(Error::Empty("reward window".into()));
    }
    if rewards.len() > horizon || (!terminal && rewards.len() != horizon) {
        return Err(shape_err(format!(
            "reward window of length {} (terminal: {terminal}) with chunk horizon {horizon}",
            rewards.len()
        )));
    }
    Ok(())
}

/// `sum_k gamma^k r_k + gamma^T * Qbar(s', a')`, bootstrap dropped on terminal.
pub fn td_target(
    rewards: &[f64],
    terminal: bool,
    next_state: &[f64],
    bootstrap_chunk: &ActionChunk,
    critic: &ChunkCritic,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    check_window(rewards, terminal, critic.horizon)?;
    let ret = discounted_sum(rewards, gamma);
    if terminal {
        return Ok(ret);
    }
    let q = critic.target_q_values(row(next_state)?.view(), row(bootstrap_chunk.as_slice())?.view())?[0];
    Ok(ret + gamma.powi(critic.horizon as i32) * q)
}

/// Transitions plus one bootstrap chunk per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TdBatch {
    pub transitions: Vec<ChunkTransition>,
    pub bootstrap: Vec<ActionChunk>,
}

impl TdBatch {
    pub fn new(transitions: Vec<ChunkTransition>, bootstrap: Vec<ActionChunk>) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::Empty("TD batch".into()));
        }
        if transitions.len() != bootstrap.len() {
            return Err(shape_err("one bootstrap chunk per transition required"));
        }
        Ok(TdBatch { transitions, bootstrap })
    }

    /// Draw bootstrap chunks at every next state from `actor`.
    pub fn with_actor<F, R>(transitions: Vec<ChunkTransition>, actor: &F, rng: &mut R) -> Result<Self>
    where
        F: VelocityField + ?Sized,
        R: Rng + ?Sized,
    {
        if transitions.is_empty() {
            return Err(Error::Empty("TD batch".into()));
        }
        let next = stack(transitions.iter().map(|t| t.next_state.as_slice()))?;
        let chunks = sample_chunks(actor, next.view(), rng)?;
        let bootstrap = chunks.rows().into_iter().map(|r| ActionChunk(r.to_vec())).collect();
        TdBatch::new(transitions, bootstrap)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn states(&self) -> Result<Array2<f64>> {
        stack(self.transitions.iter().map(|t| t.state.as_slice()))
    }

    pub fn chunks(&self) -> Result<Array2<f64>> {
        stack(self.transitions.iter().map(|t| t.chunk.as_slice()))
    }
}

/// Stack equal-length slices into rows.
pub fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Result<Array2<f64>> {
    let rows: Vec<&[f64]> = rows.collect();
    let width = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != width) {
        return Err(shape_err("rows of differing length"));
    }
    let flat: Vec<f64> = rows.concat();
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| shape_err(e.to_string()))
}

/// TD targets for a whole batch, evaluated on the target network.
pub fn td_targets(critic: &ChunkCritic, batch: &TdBatch, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    for t in &batch.transitions {
        check_window(&t.rewards, t.terminal, critic.horizon)?;
    }
    let next = stack(batch.transitions.iter().map(|t| t.next_state.as_slice()))?;
    let boot = stack(batch.bootstrap.iter().map(|c| c.as_slice()))?;
    let q_next = critic.target_q_values(next.view(), boot.view())?;
    let bootstrap_discount = gamma.powi(critic.horizon as i32);
    Ok(batch
        .transitions
        .iter()
        .zip(q_next)
        .map(|(t, q)| {
            let ret = discounted_sum(&t.rewards, gamma);
            if t.terminal {
                ret
            } else {
                ret + bootstrap_discount * q
            }
        })
        .collect())
}

/// Mean squared TD residual against fixed regression targets.
pub struct CriticObjective<'a> {
    pub critic: &'a ChunkCritic,
    pub inputs: Array2<f64>,
    pub targets: Array1<f64>,
}

impl<'a> CriticObjective<'a> {
    pub fn new(critic: &'a ChunkCritic, batch: &TdBatch, gamma: f64) -> Result<Self> {
        let targets = Array1::from(td_targets(critic, batch, gamma)?);
        let inputs = critic.input(batch.states()?.view(), batch.chunks()?.view())?;
        Ok(CriticObjective {
            critic,
            inputs,
            targets,
        })
    }
}

impl Objective for CriticObjective<'_> {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        let q = forward_batch(&self.critic.spec, params, self.inputs.view())?
            .column(0)
            .to_owned();
        let r = q - &self.targets;
        Ok(r.mapv(|x| x * x).sum() / r.len() as f64)
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let (loss, grads, _) = self.evaluate(params)?;
        Ok((loss, grads))
    }
}

impl CriticObjective<'_> {
    /// Loss, gradient and mean predicted value in one forward/backward pass.
    fn evaluate(&self, params: &ParamSet) -> Result<(f64, ParamSet, f64)> {
        let trace = forward_trace(&self.critic.spec, params, self.inputs.view())?;
        let q = trace.output().column(0).to_owned();
        let n = q.len() as f64;
        let q_mean = q.sum() / n;
        let residual = q - &self.targets;
        let loss = residual.mapv(|x| x * x).sum() / n;
        let grad_out = residual.mapv(|r| 2.0 * r / n).insert_axis(Axis(1));
        let mut grads = params.zeros_like();
        backward(params, &trace, grad_out.view(), &mut grads)?;
        Ok((loss, grads, q_mean))
    }
}

pub fn critic_loss(critic: &ChunkCritic, batch: &TdBatch, gamma: f64) -> Result<f64> {
    CriticObjective::new(critic, batch, gamma)?.value(&critic.params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStepStats {
    pub loss: f64,
    pub q_mean: f64,
}

/// One TD regression step on the online network followed by a Polyak update
/// of the target network.
pub fn critic_update(
    critic: &mut ChunkCritic,
    adam: &mut AdamState,
    batch: &TdBatch,
    gamma: f64,
    lr: f64,
    tau: f64,
) -> Result<CriticStepStats> {
    let objective = CriticObjective::new(critic, batch, gamma)?;
    let (loss, grads, q_mean) = objective.evaluate(&critic.params)?;
    if !loss.is_finite() {
        return Err(Error::NumericalOverflow(format!("critic loss evaluated to {loss}")));
    }
    adam.apply(&mut critic.params, &grads, lr)?;
    critic.soft_update(tau)?;
    Ok(CriticStepStats { loss, q_mean })
}

/// Critic-only step with the actor held fixed: bootstrap chunks come from the
/// frozen actor, which is only ever borrowed immutably.
#[allow(clippy::too_many_arguments)]
pub fn sarsa_warmup_step<F, R>(
    critic: &mut ChunkCritic,
    adam: &mut AdamState,
    frozen_actor: &F,
    transitions: Vec<ChunkTransition>,
    gamma: f64,
    lr: f64,
    tau: f64,
    rng: &mut R,
) -> Result<CriticStepStats>
where
    F: VelocityField + ?Sized,
    R: Rng + ?Sized,
{
    let batch = TdBatch::with_actor(transitions, frozen_actor, rng)?;
    critic_update(critic, adam, &batch, gamma, lr, tau)
}
