//! Oracles shared by the integration suites and the acceptance run.

#![allow(dead_code)]

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poco::critic::{sarsa_warmup_step, ChunkCritic, CriticObjective, TdBatch};
use poco::envs::{EnvKind, STATE_DIM};
use poco::flow::{sample_candidates, ActionChunk, BcObjective, FlowBatch, FlowPolicy, VelocityField};
use poco::numerics::{AdamConfig, AdamState, Objective, ParamSet};
use poco::poco::{
    closed_form_posterior, e_step_objective, importance_weights, poco_value, DiscretePosteriorProblem, PocoBatch,
    PocoHyper, PocoObjective,
};
use poco::replay::ChunkTransition;
use poco::trainer::{collect, pretrain, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix<R: Rng>(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Largest relative gap between the analytic gradient and central
/// differences with step `h`. Entries where both are below `floor` are
/// compared against `floor`.
pub fn gradient_gap<O: Objective>(obj: &O, params: &ParamSet, h: f64, floor: f64) -> f64 {
    let (_, grads) = obj.value_and_grad(params).expect("analytic gradient");
    let analytic = grads.to_flat();
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        let mut x = base.clone();
        x[i] = base[i] + h;
        probe.set_flat(&x).unwrap();
        let up = obj.value(&probe).unwrap();
        x[i] = base[i] - h;
        probe.set_flat(&x).unwrap();
        let down = obj.value(&probe).unwrap();
        let fd = (up - down) / (2.0 * h);
        let gap = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
        worst = worst.max(gap);
    }
    worst
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;

fn small_hidden<R: Rng>(rng: &mut R) -> Vec<usize> {
    let layers = rng.random_range(1..=2);
    // two-unit layer norm sits next to its singular point, beyond central-difference accuracy
    (0..layers).map(|_| rng.random_range(4..=16)).collect()
}

fn random_policy<R: Rng>(rng: &mut R) -> FlowPolicy {
    let state_dim = rng.random_range(1..=3);
    let horizon = rng.random_range(1..=3);
    let action_dim = rng.random_range(1..=2);
    FlowPolicy::new(state_dim, horizon, action_dim, 4, &small_hidden(rng), rng).unwrap()
}

fn random_flow_batch<R: Rng>(policy: &FlowPolicy, rows: usize, rng: &mut R) -> FlowBatch {
    let states = matrix(rows, policy.state_dim, -1.0, 1.0, rng);
    let targets = matrix(rows, policy.chunk_dim(), -1.0, 1.0, rng);
    FlowBatch::with_draws(states, targets, rng).unwrap()
}

pub fn bc_instance_gap(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let policy = random_policy(&mut rng);
    let rows = rng.random_range(1..=4);
    let batch = random_flow_batch(&policy, rows, &mut rng);
    gradient_gap(
        &BcObjective {
            policy: &policy,
            batch: &batch,
        },
        &policy.params,
        FD_STEP,
        FD_FLOOR,
    )
}

pub fn critic_instance_gap(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let state_dim = rng.random_range(1..=3);
    let horizon = rng.random_range(1..=3);
    let action_dim = rng.random_range(1..=2);
    let hidden = small_hidden(&mut rng);
    let critic = ChunkCritic::new(state_dim, horizon, action_dim, &hidden, &mut rng).unwrap();
    let rows = rng.random_range(2..=4);
    let transitions: Vec<ChunkTransition> = (0..rows)
        .map(|i| {
            let terminal = rng.random_bool(0.3);
            let len = if terminal {
                rng.random_range(1..=horizon)
            } else {
                horizon
            };
            ChunkTransition {
                state: (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                chunk: ActionChunk((0..horizon * action_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
                rewards: (0..len).map(|_| rng.random_range(-1.0..0.0)).collect(),
                terminal,
                next_state: (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                episode_id: i as u64,
                start_step: 0,
            }
        })
        .collect();
    let bootstrap = (0..rows)
        .map(|_| ActionChunk((0..horizon * action_dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let batch = TdBatch::new(transitions, bootstrap).unwrap();
    let obj = CriticObjective::new(&critic, &batch, 0.99).unwrap();
    gradient_gap(&obj, &critic.params, FD_STEP, FD_FLOOR)
}

/// Random batch with normalized weights; `n` candidates per state.
pub fn random_poco_batch<R: Rng>(policy: &FlowPolicy, b: usize, n: usize, rng: &mut R) -> PocoBatch {
    let buffer = random_flow_batch(policy, b, rng);
    let states = poco::flow::repeat_rows(buffer.states.view(), n);
    let targets = matrix(b * n, policy.chunk_dim(), -1.0, 1.0, rng);
    let candidates = FlowBatch::with_draws(states, targets, rng).unwrap();
    let mut weights = Array2::zeros((b, n));
    for i in 0..b {
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = importance_weights(&q, rng.random_range(0.05..2.0)).unwrap();
        weights.row_mut(i).assign(&Array1::from(w));
    }
    PocoBatch::new(buffer, candidates, weights).unwrap()
}

/// Distance of the closest candidate loss to the clipping threshold.
pub fn clip_margin(policy: &FlowPolicy, batch: &PocoBatch, zeta: f64) -> f64 {
    poco::flow::bc_losses(policy, &policy.params, &batch.candidates)
        .unwrap()
        .iter()
        .map(|l| (l - zeta).abs())
        .fold(f64::INFINITY, f64::min)
}

pub fn poco_instance_gap(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let policy = random_policy(&mut rng);
    let b = rng.random_range(1..=3);
    let n = rng.random_range(1..=4);
    let batch = random_poco_batch(&policy, b, n, &mut rng);
    // keep the threshold away from every candidate loss so differences never straddle the kink
    let mut zeta = rng.random_range(0.0..2.0);
    while clip_margin(&policy, &batch, zeta) < 1e-3 {
        zeta = rng.random_range(0.0..2.0);
    }
    let hyper = PocoHyper {
        eta: 0.1,
        beta: rng.random_range(0.1..3.0),
        zeta,
        num_candidates: n,
    };
    let obj = PocoObjective {
        policy: &policy,
        batch: &batch,
        hyper,
    };
    gradient_gap(&obj, &policy.params, FD_STEP, FD_FLOOR)
}

/// Worst gradient gap per loss over `instances` random instances each.
pub fn gradient_suite(instances: u64) -> [(&'static str, f64); 3] {
    let worst = |f: fn(u64) -> f64| (0..instances).map(f).fold(0.0, f64::max);
    [
        ("bc_loss", worst(bc_instance_gap)),
        ("critic_loss", worst(critic_instance_gap)),
        ("poco_loss", worst(|s| poco_instance_gap(s + 10_000))),
    ]
}

pub fn random_simplex<R: Rng>(m: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| -rng.random_range(1e-12..1.0f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

#[derive(Debug, Default)]
pub struct EStepReport {
    pub violations: usize,
    pub comparisons: usize,
    /// Largest gap between softmax weights and the closed form under a
    /// uniform prior.
    pub weight_gap: f64,
}

/// Closed-form posterior against random competitors on random problems.
pub fn e_step_suite(problems: u64, perturbations: usize) -> EStepReport {
    let mut report = EStepReport::default();
    for p in 0..problems {
        let mut rng = rng(500 + p);
        let m = rng.random_range(2..=8);
        let prior = random_simplex(m, &mut rng);
        let q_values: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let eta = rng.random_range(0.05..5.0);
        let problem = DiscretePosteriorProblem {
            prior: prior.clone(),
            q_values: q_values.clone(),
            eta,
        };
        let best = closed_form_posterior(&problem).unwrap();
        let best_value = e_step_objective(&best, &prior, &q_values, eta).unwrap();
        for k in 0..perturbations {
            // half are nearby perturbations, half are arbitrary points of the simplex
            let competitor = if k % 2 == 0 {
                let scale = rng.random_range(1e-4..1.0);
                let raw: Vec<f64> = best
                    .iter()
                    .map(|w| w * (scale * rng.random_range(-1.0..1.0f64)).exp())
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.iter().map(|x| x / total).collect()
            } else {
                random_simplex(m, &mut rng)
            };
            let value = e_step_objective(&competitor, &prior, &q_values, eta).unwrap();
            report.comparisons += 1;
            if value > best_value {
                report.violations += 1;
            }
        }
        let uniform = vec![1.0 / m as f64; m];
        let discretized = closed_form_posterior(&DiscretePosteriorProblem {
            prior: uniform,
            q_values: q_values.clone(),
            eta,
        })
        .unwrap();
        let weights = importance_weights(&q_values, eta).unwrap();
        for (a, b) in weights.iter().zip(&discretized) {
            report.weight_gap = report.weight_gap.max((a - b).abs());
        }
    }
    report
}

/// Emits the same chunk for every state: the velocity carries any point
/// straight onto `chunk` by flow time 1.
pub struct ConstantChunk {
    pub state_dim: usize,
    pub chunk: Vec<f64>,
}

impl VelocityField for ConstantChunk {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn chunk_dim(&self) -> usize {
        self.chunk.len()
    }

    fn flow_steps(&self) -> usize {
        4
    }

    fn velocity(&self, states: ArrayView2<f64>, chunks: ArrayView2<f64>, m: f64) -> poco::Result<Array2<f64>> {
        let mut v = chunks.to_owned();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (self.chunk[j] - chunks[[i, j]]) / (1.0 - m);
            }
        }
        debug_assert_eq!(states.nrows(), v.nrows());
        Ok(v)
    }
}

/// Three cells in a row; action +1 moves right, -1 moves left (the left wall
/// holds). Stepping right from the last cell reaches the goal with reward 0;
/// every other step costs -1. The evaluated policy always moves right.
pub struct ChainMdp;

impl ChainMdp {
    pub const GAMMA: f64 = 0.99;

    pub fn one_hot(s: usize) -> Vec<f64> {
        let mut v = vec![0.0; 3];
        v[s] = 1.0;
        v
    }

    /// `(next state, reward, terminal)`; action index 0 is left, 1 is right.
    pub fn step(s: usize, a: usize) -> (usize, f64, bool) {
        match (s, a) {
            (2, 1) => (2, 0.0, true),
            (s, 1) => (s + 1, -1.0, false),
            (s, _) => (s.saturating_sub(1), -1.0, false),
        }
    }

    /// Policy evaluation by sweeping the Bellman operator to 1e-10.
    pub fn exact_q() -> [[f64; 2]; 3] {
        let mut q = [[0.0; 2]; 3];
        loop {
            let mut next = q;
            let mut change: f64 = 0.0;
            for s in 0..3 {
                for a in 0..2 {
                    let (s2, r, terminal) = Self::step(s, a);
                    next[s][a] = if terminal { r } else { r + Self::GAMMA * q[s2][1] };
                    change = change.max((next[s][a] - q[s][a]).abs());
                }
            }
            q = next;
            if change < 1e-10 {
                return q;
            }
        }
    }

    pub fn transitions() -> Vec<ChunkTransition> {
        let mut out = Vec::new();
        for s in 0..3 {
            for a in 0..2 {
                let (s2, r, terminal) = Self::step(s, a);
                out.push(ChunkTransition {
                    state: Self::one_hot(s),
                    chunk: ActionChunk(vec![if a == 1 { 1.0 } else { -1.0 }]),
                    rewards: vec![r],
                    terminal,
                    next_state: Self::one_hot(s2),
                    episode_id: 0,
                    start_step: 0,
                });
            }
        }
        out
    }

    /// Critic after SARSA warmup against the always-right policy, with its
    /// values at every `(s, a)`.
    pub fn warmed_up_critic(steps: usize) -> (ChunkCritic, [[f64; 2]; 3]) {
        let mut rng = rng(17);
        let mut critic = ChunkCritic::new(3, 1, 1, &[32, 32], &mut rng).unwrap();
        let mut adam = AdamState::new(&critic.params, AdamConfig::default());
        let policy = ConstantChunk {
            state_dim: 3,
            chunk: vec![1.0],
        };
        let before = critic.clone();
        for _ in 0..steps {
            sarsa_warmup_step(
                &mut critic,
                &mut adam,
                &policy,
                Self::transitions(),
                Self::GAMMA,
                1e-3,
                0.05,
                &mut rng,
            )
            .unwrap();
        }
        assert_ne!(critic, before);
        let mut q = [[0.0; 2]; 3];
        for (s, row) in q.iter_mut().enumerate() {
            for (a, v) in row.iter_mut().enumerate() {
                *v = critic
                    .q_value(&Self::one_hot(s), &ActionChunk(vec![if a == 1 { 1.0 } else { -1.0 }]))
                    .unwrap();
            }
        }
        (critic, q)
    }
}

/// Share of `draws` sampled chunks whose mean first action coordinate is
/// negative and positive, from the bimodal task's start center.
pub fn bimodal_shares(seed: u64, draws: usize) -> (f64, f64) {
    let mut cfg = TrainConfig::new(EnvKind::BimodalReach);
    cfg.seed = seed;
    let demos = collect(&cfg).unwrap();
    let actor = pretrain(&cfg, &demos, false).unwrap().actor;
    let mut state = cfg.env.start_center.to_vec();
    state.push(0.0);
    assert_eq!(state.len(), STATE_DIM);
    let chunks = sample_candidates(&actor, &state, draws, &mut rng(seed + 99)).unwrap();
    let mut left = 0;
    let mut right = 0;
    for c in &chunks {
        let x: f64 = c.as_slice().iter().step_by(2).sum();
        if x < 0.0 {
            left += 1;
        } else if x > 0.0 {
            right += 1;
        }
    }
    (left as f64 / draws as f64, right as f64 / draws as f64)
}

/// Bitwise comparison of loss values and gradients of the guided objective
/// at `beta = 0` against plain flow matching on the buffer rows, step by step
/// along an Adam trajectory.
pub fn beta_zero_reduction(steps: usize) -> bool {
    let mut rng = rng(3);
    let mut a = FlowPolicy::new(3, 2, 2, 4, &[16, 16], &mut rng).unwrap();
    let mut b = a.clone();
    let mut adam_a = AdamState::new(&a.params, AdamConfig::default());
    let mut adam_b = adam_a.clone();
    let hyper = PocoHyper {
        eta: 0.1,
        beta: 0.0,
        zeta: 0.3,
        num_candidates: 4,
    };
    for _ in 0..steps {
        let batch = random_poco_batch(&a, 8, 4, &mut rng);
        let (la, ga) = PocoObjective {
            policy: &a,
            batch: &batch,
            hyper,
        }
        .value_and_grad(&a.params)
        .unwrap();
        let (lb, gb) = BcObjective {
            policy: &b,
            batch: &batch.buffer,
        }
        .value_and_grad(&b.params)
        .unwrap();
        let value = poco_value(&a, &a.params, &batch, &hyper).unwrap().loss;
        if la.to_bits() != lb.to_bits() || value.to_bits() != lb.to_bits() || ga != gb {
            return false;
        }
        adam_a.apply(&mut a.params, &ga, 1e-3).unwrap();
        adam_b.apply(&mut b.params, &gb, 1e-3).unwrap();
        if a.params != b.params {
            return false;
        }
    }
    true
}

#[derive(Debug, Default)]
pub struct SurrogateReport {
    pub evaluations: usize,
    pub out_of_bounds: usize,
    pub reduction_mismatches: usize,
    /// Clipped candidates whose perturbation changed the gradient.
    pub leaking_clipped: usize,
    pub clipped_checked: usize,
}

/// Randomized checks of the clipped term's range, the `beta = 0` reduction
/// and gradient gating through clipped candidates.
pub fn surrogate_suite(evaluations: usize) -> SurrogateReport {
    let mut report = SurrogateReport::default();
    let mut rng = rng(77);
    let policy = FlowPolicy::new(2, 2, 1, 4, &[8], &mut rng).unwrap();
    for k in 0..evaluations {
        let b = rng.random_range(1..=3);
        let n = rng.random_range(1..=4);
        let batch = random_poco_batch(&policy, b, n, &mut rng);
        let hyper = PocoHyper {
            eta: 0.1,
            beta: rng.random_range(0.0..5.0),
            zeta: rng.random_range(0.0..1.5),
            num_candidates: n,
        };
        let stats = poco_value(&policy, &policy.params, &batch, &hyper).unwrap();
        report.evaluations += 1;
        // the weights sum to one only up to rounding
        let ceiling = hyper.beta * hyper.zeta * (1.0 + 1e-12);
        if !(stats.surrogate >= 0.0 && stats.surrogate <= ceiling) {
            report.out_of_bounds += 1;
        }
        let zero = PocoHyper { beta: 0.0, ..hyper };
        let reduced = poco_value(&policy, &policy.params, &batch, &zero).unwrap().loss;
        let plain = BcObjective {
            policy: &policy,
            batch: &batch.buffer,
        }
        .value(&policy.params)
        .unwrap();
        if reduced.to_bits() != plain.to_bits() {
            report.reduction_mismatches += 1;
        }
        if k % 10 == 0 {
            gate_check(&policy, &batch, &hyper, &mut rng, &mut report);
        }
    }
    report
}

fn gate_check<R: Rng>(
    policy: &FlowPolicy,
    batch: &PocoBatch,
    hyper: &PocoHyper,
    rng: &mut R,
    report: &mut SurrogateReport,
) {
    let losses = poco::flow::bc_losses(policy, &policy.params, &batch.candidates).unwrap();
    let obj = PocoObjective {
        policy,
        batch,
        hyper: *hyper,
    };
    let (_, base) = obj.value_and_grad(&policy.params).unwrap();
    for (j, &l) in losses.iter().enumerate() {
        if l < hyper.zeta {
            continue;
        }
        // push the clipped candidate's target further away; it stays clipped
        let mut moved = batch.clone();
        let shift = rng.random_range(0.5..2.0);
        for x in moved.candidates.targets.row_mut(j) {
            *x += shift * (*x - batch.candidates.noise[[j, 0]]).signum();
        }
        let new_losses = poco::flow::bc_losses(policy, &policy.params, &moved.candidates).unwrap();
        if new_losses[j] < hyper.zeta {
            continue;
        }
        let (_, grads) = PocoObjective {
            policy,
            batch: &moved,
            hyper: *hyper,
        }
        .value_and_grad(&policy.params)
        .unwrap();
        report.clipped_checked += 1;
        if grads != base {
            report.leaking_clipped += 1;
        }
    }
}

/// Eval success stays within this many points of the pre-trained score.
pub const COLLAPSE_MARGIN: f64 = 0.20;
pub const COLLAPSE_PATIENCE: usize = 10;

/// Longest run of consecutive values more than `margin` below `reference`.
pub fn longest_shortfall(values: &[f64], reference: f64, margin: f64) -> usize {
    let mut longest = 0;
    let mut current = 0;
    for &v in values {
        if v < reference - margin {
            current += 1;
            longest = longest.max(current);
        } else {
            current = 0;
        }
    }
    longest
}
