//! Deterministic 2-D sparse-reward reaching tasks and their scripted experts.
//!
//! The agent is a point in `[-1, 1]^2` moved by `0.05 * action` per step.
//! `channel_insert` adds axis-aligned walls that leave a narrow channel in
//! front of the goal; motion into a wall stops at its face while the
//! tangential component still applies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::replay::{Episode, StepRecord};

/// Position and elapsed fraction of the time limit.
pub const STATE_DIM: usize = 3;
pub const ACTION_DIM: usize = 2;
/// Expert noise used for demonstrations unless configured otherwise.
pub const DEFAULT_DEMO_NOISE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    PointReach,
    ChannelInsert,
    BimodalReach,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointReach => "point_reach",
            EnvKind::ChannelInsert => "channel_insert",
            EnvKind::BimodalReach => "bimodal_reach",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_reach" => Ok(EnvKind::PointReach),
            "channel_insert" => Ok(EnvKind::ChannelInsert),
            "bimodal_reach" => Ok(EnvKind::BimodalReach),
            other => Err(Error::Config(format!("unknown environment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardConvention {
    /// -1 per step, 0 on the success step.
    NegOneZero,
    /// -0.01 per step, +1 on the success step.
    SuccessBonus,
}

impl RewardConvention {
    pub fn name(self) -> &'static str {
        match self {
            RewardConvention::NegOneZero => "neg_one_zero",
            RewardConvention::SuccessBonus => "success_bonus",
        }
    }

    fn reward(self, success: bool) -> f64 {
        match (self, success) {
            (RewardConvention::NegOneZero, true) => 0.0,
            (RewardConvention::NegOneZero, false) => -1.0,
            (RewardConvention::SuccessBonus, true) => 1.0,
            (RewardConvention::SuccessBonus, false) => -0.01,
        }
    }
}

impl std::str::FromStr for RewardConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg_one_zero" => Ok(RewardConvention::NegOneZero),
            "success_bonus" => Ok(RewardConvention::SuccessBonus),
            other => Err(Error::Config(format!("unknown reward convention {other:?}"))),
        }
    }
}

/// Axis-aligned box; points strictly inside are blocked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] > self.min[i] && p[i] < self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub horizon: usize,
    pub reward: RewardConvention,
    /// Workspace is `[-bound, bound]^2`.
    pub bound: f64,
    pub start_center: [f64; 2],
    pub start_half_extent: [f64; 2],
    pub goals: Vec<[f64; 2]>,
    pub goal_tolerance: f64,
    pub step_gain: f64,
    pub walls: Vec<Rect>,
    /// Point in front of the channel the expert lines up on first.
    pub waypoint: Option<[f64; 2]>,
    /// Proportional gain of the scripted expert.
    pub expert_gain: f64,
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        let base = EnvSpec {
            kind,
            horizon: 40,
            reward: RewardConvention::SuccessBonus,
            bound: 1.0,
            start_center: [-0.5, 0.0],
            start_half_extent: [0.25, 0.25],
            goals: vec![[0.5, 0.0]],
            goal_tolerance: 0.05,
            step_gain: 0.05,
            walls: vec![],
            waypoint: None,
            expert_gain: 3.0,
        };
        match kind {
            EnvKind::PointReach => EnvSpec { horizon: 35, ..base },
            EnvKind::ChannelInsert => {
                let half_width = 0.06;
                EnvSpec {
                    goals: vec![[0.35, 0.0]],
                    walls: vec![
                        Rect {
                            min: [0.0, -1.0],
                            max: [0.3, -half_width],
                        },
                        Rect {
                            min: [0.0, half_width],
                            max: [0.3, 1.0],
                        },
                    ],
                    waypoint: Some([-0.08, 0.0]),
                    ..base
                }
            }
            EnvKind::BimodalReach => EnvSpec {
                start_center: [0.0, -0.4],
                goals: vec![[-0.5, 0.5], [0.5, 0.5]],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("environment horizon must be positive".into()));
        }
        if self.goals.is_empty() || !(self.goal_tolerance > 0.0) || !(self.step_gain > 0.0) {
            return Err(Error::Config(
                "environment needs a goal, a positive tolerance and step gain".into(),
            ));
        }
        let inside = |p: [f64; 2]| p.iter().all(|c| c.abs() <= self.bound);
        for g in &self.goals {
            if !inside(*g) || self.walls.iter().any(|w| w.contains(*g)) {
                return Err(Error::Config(format!("goal {g:?} is outside the free workspace")));
            }
        }
        for corner in self.start_corners() {
            if !inside(corner) || self.walls.iter().any(|w| w.contains(corner)) {
                return Err(Error::Config("start region leaves the free workspace".into()));
            }
        }
        if self.start_half_extent.iter().any(|h| !(*h >= 0.0)) {
            return Err(Error::Config("start region extents must be nonnegative".into()));
        }
        Ok(())
    }

    fn start_corners(&self) -> [[f64; 2]; 4] {
        let [cx, cy] = self.start_center;
        let [hx, hy] = self.start_half_extent;
        [
            [cx - hx, cy - hy],
            [cx - hx, cy + hy],
            [cx + hx, cy - hy],
            [cx + hx, cy + hy],
        ]
    }

    pub fn in_start_region(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| (p[i] - self.start_center[i]).abs() <= self.start_half_extent[i])
    }

    pub fn at_goal(&self, p: [f64; 2]) -> bool {
        self.goals.iter().any(|g| dist(*g, p) <= self.goal_tolerance)
    }

    pub fn state_dim(&self) -> usize {
        STATE_DIM
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub steps: usize,
    pub done: bool,
    pub success: bool,
}

impl EnvState {
    /// `[x, y, steps / H]`; the time feature keeps the task Markov under
    /// the time limit.
    pub fn observation(&self, spec: &EnvSpec) -> Vec<f64> {
        vec![
            self.position[0],
            self.position[1],
            self.steps as f64 / spec.horizon as f64,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Uniform start in the spec's start region, fully determined by `seed`.
pub fn reset(spec: &EnvSpec, seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut position = spec.start_center;
    for (p, &h) in position.iter_mut().zip(&spec.start_half_extent) {
        if h > 0.0 {
            *p += rng.random_range(-h..=h);
        }
    }
    EnvState {
        position,
        steps: 0,
        done: false,
        success: false,
    }
}

/// `n` starts forming a Latin hypercube over the start region: each axis is
/// cut into `n` equal strata and every stratum holds exactly one start.
pub fn stratified_starts(spec: &EnvSpec, seed: u64, n: usize) -> Vec<EnvState> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = [vec![0.0; n], vec![0.0; n]];
    for (axis, c) in coords.iter_mut().enumerate() {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let h = spec.start_half_extent[axis];
        for (i, p) in perm.into_iter().enumerate() {
            let u: f64 = rng.random();
            c[i] = spec.start_center[axis] - h + 2.0 * h * (p as f64 + u) / n as f64;
        }
    }
    (0..n)
        .map(|i| EnvState {
            position: [coords[0][i], coords[1][i]],
            steps: 0,
            done: false,
            success: false,
        })
        .collect()
}

fn blocked(spec: &EnvSpec, p: [f64; 2]) -> Option<&Rect> {
    spec.walls.iter().find(|w| w.contains(p))
}

pub fn step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
    if state.done {
        return Err(Error::ContractViolation("step called on a finished episode".into()));
    }
    if action.len() != ACTION_DIM {
        return Err(Error::Shape(format!(
            "action has {} entries, expected {ACTION_DIM}",
            action.len()
        )));
    }
    let mut p = state.position;
    for axis in 0..2 {
        let a = if action[axis].is_finite() {
            action[axis].clamp(-1.0, 1.0)
        } else {
            0.0
        };
        let delta = spec.step_gain * a;
        let mut q = p;
        q[axis] = (p[axis] + delta).clamp(-spec.bound, spec.bound);
        if let Some(wall) = blocked(spec, q) {
            // stop at the face the motion hit
            q[axis] = if delta > 0.0 { wall.min[axis] } else { wall.max[axis] };
        }
        p = q;
    }
    let steps = state.steps + 1;
    let success = spec.at_goal(p);
    let done = success || steps >= spec.horizon;
    let next = EnvState {
        position: p,
        steps,
        done,
        success,
    };
    Ok(StepOutcome {
        state: next,
        reward: spec.reward.reward(success),
        done,
        success,
    })
}

/// The point the expert is currently steering toward.
pub fn expert_target(spec: &EnvSpec, p: [f64; 2]) -> [f64; 2] {
    match spec.kind {
        EnvKind::BimodalReach => *spec
            .goals
            .iter()
            .min_by(|a, b| dist(**a, p).total_cmp(&dist(**b, p)))
            .expect("validated spec has goals"),
        EnvKind::ChannelInsert => {
            let goal = spec.goals[0];
            match spec.waypoint {
                Some(w) if p[0] < w[0] + 0.05 && (p[1] - w[1]).abs() > 0.02 => [w[0], w[1]],
                _ => goal,
            }
        }
        EnvKind::PointReach => spec.goals[0],
    }
}

/// Proportional controller toward [`expert_target`] plus uniform noise of
/// magnitude `noise_scale`, clamped to `[-1, 1]`.
pub fn expert_action<R: Rng + ?Sized>(spec: &EnvSpec, state: &EnvState, rng: &mut R, noise_scale: f64) -> Vec<f64> {
    let target = expert_target(spec, state.position);
    (0..2)
        .map(|i| {
            let noise = if noise_scale > 0.0 {
                rng.random_range(-noise_scale..=noise_scale)
            } else {
                0.0
            };
            (spec.expert_gain * (target[i] - state.position[i]) + noise).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Roll out the expert from `reset(spec, seed)`.
pub fn expert_episode(spec: &EnvSpec, seed: u64, noise_scale: f64, episode_id: u64) -> Result<(Episode, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = reset(spec, seed);
    let mut records = Vec::new();
    while !state.done {
        let action = expert_action(spec, &state, &mut rng, noise_scale);
        let out = step(spec, &state, &action)?;
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
    let success = state.success;
    Ok((
        Episode {
            records,
            final_state: Some(state.observation(spec)),
        },
        success,
    ))
}

/// `n` successful expert demonstrations; failures are discarded and redrawn.
pub fn collect_demos(spec: &EnvSpec, n: usize, seed: u64, noise_scale: f64) -> Result<Vec<Episode>> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one demonstration".into()));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity(n);
    for attempt in 0..10 * n as u64 {
        let (episode, success) = expert_episode(spec, demo_seed(seed, attempt), noise_scale, out.len() as u64)?;
        if success {
            out.push(episode);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(Error::InvalidArgument(format!(
        "expert reached only {} successes in {} attempts",
        out.len(),
        10 * n
    )))
}

/// Top bit set on every evaluation seed and clear on every training seed.
pub const EVAL_SEED_BIT: u64 = 1 << 63;

/// Seed for the `attempt`-th demonstration rollout under a base seed.
pub fn demo_seed(seed: u64, attempt: u64) -> u64 {
    splitmix(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ attempt) & !EVAL_SEED_BIT
}

/// Seed of the `index`-th training episode.
pub fn train_seed(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ 0x7472_6169_6e00_0000) ^ index) & !EVAL_SEED_BIT
}

/// Seed of the `index`-th evaluation episode; never equal to a training seed.
pub fn eval_seed(seed: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ 0x6576_616c_0000_0000) ^ index) | EVAL_SEED_BIT
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise-free expert as a flow field: the velocity points straight at the
/// chunk obtained by simulating the expert for `horizon` steps, so Euler
/// integration lands on that chunk exactly. Steps after success are zero.
#[derive(Debug, Clone)]
pub struct ScriptedChunks {
    pub spec: EnvSpec,
    pub horizon: usize,
    pub flow_steps: usize,
}

impl ScriptedChunks {
    pub fn plan(&self, position: [f64; 2]) -> Result<Vec<f64>> {
        let mut state = EnvState {
            position,
            steps: 0,
            done: false,
            success: self.spec.at_goal(position),
        };
        let mut chunk = vec![0.0; self.horizon * ACTION_DIM];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 0..self.horizon {
            if state.success {
                break;
            }
            let a = expert_action(&self.spec, &state, &mut rng, 0.0);
            chunk[t * ACTION_DIM..(t + 1) * ACTION_DIM].copy_from_slice(&a);
            state.done = false;
            state.steps = 0;
            state = step(&self.spec, &state, &a)?.state;
        }
        Ok(chunk)
    }
}

impl VelocityField for ScriptedChunks {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn chunk_dim(&self) -> usize {
        self.horizon * ACTION_DIM
    }

    fn flow_steps(&self) -> usize {
        self.flow_steps
    }

    fn velocity(&self, states: ArrayView2<f64>, chunks: ArrayView2<f64>, m: f64) -> Result<Array2<f64>> {
        let mut v = Array2::zeros(chunks.dim());
        for (i, s) in states.rows().into_iter().enumerate() {
            let plan = self.plan([s[0], s[1]])?;
            for j in 0..plan.len() {
                v[[i, j]] = (plan[j] - chunks[[i, j]]) / (1.0 - m);
            }
        }
        Ok(v)
    }
}
