//! Posterior-guided policy improvement.
//!
//! The E-step is represented by particles: `N` chunks sampled from the current
//! policy, weighted by `softmax(Q / eta)`. The M-step distills them back into
//! the flow policy with a flow-matching loss on each particle, capped at
//! `zeta` so no single particle can pull the field arbitrarily far, anchored
//! by the plain flow-matching loss on buffer data.
//!
//! The discrete posterior helpers at the bottom give the exact reweighted
//! distribution over a finite action set; tests use them as oracles for the
//! particle weights.

use ndarray::{Array2, ArrayView2};

use crate::error::{shape_err, Error, Result};
use crate::flow::{bc_backward, bc_forward, bc_losses, ActionChunk, FlowBatch, FlowDraw, FlowPolicy};
use crate::numerics::{Objective, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PocoHyper {
    /// Weight temperature.
    pub eta: f64,
    /// Posterior guidance scale.
    pub beta: f64,
    /// Clipping threshold on each candidate's flow-matching loss.
    pub zeta: f64,
    pub num_candidates: usize,
}

impl PocoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.zeta >= 0.0) {
            return Err(Error::InvalidArgument(format!("zeta must be >= 0, got {}", self.zeta)));
        }
        if self.num_candidates == 0 {
            return Err(Error::InvalidArgument("need at least one candidate".into()));
        }
        Ok(())
    }
}

/// Self-normalized weights `exp(q_j / eta) / sum_k exp(q_k / eta)`.
pub fn importance_weights(q_values: &[f64], eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {eta}"
        )));
    }
    if q_values.is_empty() {
        return Err(Error::Empty("q-values".into()));
    }
    if q_values.iter().any(|q| !q.is_finite()) {
        return Err(Error::NumericalOverflow("non-finite q-value".into()));
    }
    let logits: Vec<f64> = q_values.iter().map(|q| q / eta).collect();
    Ok(softmax(&logits))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy (nats) of a weight vector.
pub fn weight_entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
}

/// Particle approximation of the reweighted posterior at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCandidates {
    pub chunks: Vec<ActionChunk>,
    pub q_values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedCandidates {
    pub fn new(chunks: Vec<ActionChunk>, q_values: Vec<f64>, eta: f64) -> Result<Self> {
        if chunks.len() != q_values.len() {
            return Err(shape_err("one q-value per candidate required"));
        }
        let weights = importance_weights(&q_values, eta)?;
        Ok(WeightedCandidates {
            chunks,
            q_values,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// `min(loss, zeta)` and its subgradient with respect to `loss`.
///
/// The subgradient is 1 strictly below the threshold and 0 at or above it.
pub fn clipped_bc(loss: f64, zeta: f64) -> (f64, f64) {
    if loss < zeta {
        (loss, 1.0)
    } else {
        (zeta, 0.0)
    }
}

/// Buffer rows and candidate rows for a batch of states.
///
/// `candidates` holds `N` rows per buffer row, grouped by state, and
/// `weights` is `(B, N)`. Weights and candidate chunks are constants: no
/// gradient flows into the critic or the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct PocoBatch {
    pub buffer: FlowBatch,
    pub candidates: FlowBatch,
    pub weights: Array2<f64>,
}

impl PocoBatch {
    pub fn new(buffer: FlowBatch, candidates: FlowBatch, weights: Array2<f64>) -> Result<Self> {
        let b = buffer.len();
        if b == 0 {
            return Err(Error::Empty("poco batch".into()));
        }
        let n = weights.ncols();
        if weights.nrows() != b || candidates.len() != b * n || n == 0 {
            return Err(shape_err(format!(
                "poco batch: {b} buffer rows, {} candidate rows, weights {:?}",
                candidates.len(),
                weights.dim()
            )));
        }
        for row in weights.rows() {
            let total: f64 = row.sum();
            if row.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(
                    "candidate weights must be a distribution per state".into(),
                ));
            }
        }
        Ok(PocoBatch {
            buffer,
            candidates,
            weights,
        })
    }

    pub fn num_candidates(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PocoStats {
    /// Full objective (batch mean).
    pub loss: f64,
    /// Buffer flow-matching term (batch mean).
    pub bc_loss: f64,
    /// `beta * sum_j w_j * clip(L_j)` (batch mean).
    pub surrogate: f64,
    /// Fraction of candidate terms at or above the threshold.
    pub clipped_fraction: f64,
}

fn surrogate_terms(
    cand_losses: &[f64],
    weights: ArrayView2<f64>,
    hyper: &PocoHyper,
    b: usize,
) -> (Vec<f64>, Vec<f64>, usize) {
    let n = weights.ncols();
    let mut per_state = vec![0.0; b];
    let mut coeffs = vec![0.0; cand_losses.len()];
    let mut clipped = 0;
    for i in 0..b {
        let mut acc = 0.0;
        for j in 0..n {
            let w = weights[[i, j]];
            let (value, slope) = clipped_bc(cand_losses[i * n + j], hyper.zeta);
            acc += w * value;
            coeffs[i * n + j] = hyper.beta * w * slope / b as f64;
            if slope == 0.0 {
                clipped += 1;
            }
        }
        per_state[i] = hyper.beta * acc;
    }
    (per_state, coeffs, clipped)
}

fn stats_from(bc: &[f64], surrogate: &[f64], clipped: usize, n_cands: usize) -> PocoStats {
    let b = bc.len() as f64;
    let loss = bc.iter().zip(surrogate).map(|(x, s)| x + s).sum::<f64>() / b;
    PocoStats {
        loss,
        bc_loss: bc.iter().sum::<f64>() / b,
        surrogate: surrogate.iter().sum::<f64>() / b,
        clipped_fraction: if n_cands == 0 {
            0.0
        } else {
            clipped as f64 / n_cands as f64
        },
    }
}

/// Objective value by forward evaluation only.
pub fn poco_value(policy: &FlowPolicy, params: &ParamSet, batch: &PocoBatch, hyper: &PocoHyper) -> Result<PocoStats> {
    hyper.validate()?;
    let b = batch.buffer.len();
    let bc = bc_losses(policy, params, &batch.buffer)?;
    if hyper.beta == 0.0 {
        return Ok(stats_from(&bc, &vec![0.0; b], 0, 0));
    }
    let cand = bc_losses(policy, params, &batch.candidates)?;
    let (surr, _, clipped) = surrogate_terms(&cand, batch.weights.view(), hyper, b);
    Ok(stats_from(&bc, &surr, clipped, cand.len()))
}

/// Objective value and exact gradient with respect to the policy weights.
///
/// With `beta == 0` the candidate rows are never evaluated, so the result is
/// the plain flow-matching loss on the buffer rows, bit for bit.
pub fn poco_value_and_grad(
    policy: &FlowPolicy,
    params: &ParamSet,
    batch: &PocoBatch,
    hyper: &PocoHyper,
) -> Result<(PocoStats, ParamSet)> {
    hyper.validate()?;
    let b = batch.buffer.len();
    let buf = bc_forward(policy, params, &batch.buffer)?;
    let mut grads = bc_backward(params, &buf, &vec![1.0 / b as f64; b])?;
    if hyper.beta == 0.0 {
        return Ok((stats_from(&buf.losses, &vec![0.0; b], 0, 0), grads));
    }
    let cand = bc_forward(policy, params, &batch.candidates)?;
    let (surr, coeffs, clipped) = surrogate_terms(&cand.losses, batch.weights.view(), hyper, b);
    if coeffs.iter().any(|&c| c != 0.0) {
        grads.scaled_add(1.0, &bc_backward(params, &cand, &coeffs)?)?;
    }
    Ok((stats_from(&buf.losses, &surr, clipped, cand.losses.len()), grads))
}

/// The batched objective as an [`Objective`].
pub struct PocoObjective<'a> {
    pub policy: &'a FlowPolicy,
    pub batch: &'a PocoBatch,
    pub hyper: PocoHyper,
}

impl Objective for PocoObjective<'_> {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        Ok(poco_value(self.policy, params, self.batch, &self.hyper)?.loss)
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let (stats, grads) = poco_value_and_grad(self.policy, params, self.batch, &self.hyper)?;
        Ok((stats.loss, grads))
    }
}

fn one_row(v: &[f64]) -> Result<Array2<f64>> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).map_err(|e| shape_err(e.to_string()))
}

/// Objective for a single state: buffer term plus clipped, weighted
/// candidate terms, one independent flow draw each.
pub fn poco_loss(
    policy: &FlowPolicy,
    state: &[f64],
    buffer_chunk: &ActionChunk,
    cands: &WeightedCandidates,
    hyper: &PocoHyper,
    buffer_draw: &FlowDraw,
    candidate_draws: &[FlowDraw],
) -> Result<f64> {
    if candidate_draws.len() != cands.len() || cands.is_empty() {
        return Err(shape_err("one flow draw per candidate required"));
    }
    let n = cands.len();
    let buffer = FlowBatch::new(
        one_row(state)?,
        one_row(buffer_chunk.as_slice())?,
        one_row(&buffer_draw.a0)?,
        ndarray::Array1::from_elem(1, buffer_draw.m),
    )?;
    let states = crate::flow::repeat_rows(buffer.states.view(), n);
    let targets = crate::critic::stack(cands.chunks.iter().map(|c| c.as_slice()))?;
    let noise = crate::critic::stack(candidate_draws.iter().map(|d| d.a0.as_slice()))?;
    let times = candidate_draws.iter().map(|d| d.m).collect();
    let candidates = FlowBatch::new(states, targets, noise, times)?;
    let weights = one_row(&cands.weights)?;
    let batch = PocoBatch::new(buffer, candidates, weights)?;
    Ok(poco_value(policy, &policy.params, &batch, hyper)?.loss)
}

/// A finite action set with prior probabilities and action values.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePosteriorProblem {
    pub prior: Vec<f64>,
    pub q_values: Vec<f64>,
    pub eta: f64,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty(what.into()));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// `q(k) ∝ prior(k) * exp(Q(k) / eta)`, normalized.
pub fn closed_form_posterior(problem: &DiscretePosteriorProblem) -> Result<Vec<f64>> {
    let DiscretePosteriorProblem { prior, q_values, eta } = problem;
    if prior.iter().all(|&p| p == 0.0) {
        return Err(Error::InvalidArgument("prior has no mass".into()));
    }
    check_distribution(prior, "prior")?;
    if prior.len() != q_values.len() {
        return Err(shape_err("prior and q-values differ in length"));
    }
    if !(*eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {eta}"
        )));
    }
    let logits: Vec<f64> = prior
        .iter()
        .zip(q_values)
        .map(|(&p, &q)| if p > 0.0 { p.ln() + q / eta } else { f64::NEG_INFINITY })
        .collect();
    Ok(softmax(&logits))
}

/// `E_q[Q] - eta * KL(q || prior)`, with `0 * ln(0 / .) = 0`.
pub fn e_step_objective(q_dist: &[f64], prior: &[f64], q_values: &[f64], eta: f64) -> Result<f64> {
    if q_dist.len() != prior.len() || prior.len() != q_values.len() {
        return Err(shape_err("distribution lengths differ"));
    }
    check_distribution(q_dist, "candidate distribution")?;
    check_distribution(prior, "prior")?;
    let mut expected = 0.0;
    let mut kl = 0.0;
    for ((&q, &p), &v) in q_dist.iter().zip(prior).zip(q_values) {
        if q == 0.0 {
            continue;
        }
        if p == 0.0 {
            return Err(Error::InvalidArgument(
                "candidate distribution puts mass outside the prior support".into(),
            ));
        }
        expected += q * v;
        kl += q * (q / p).ln();
    }
    Ok(expected - eta * kl)
}
