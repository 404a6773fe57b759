mod common;

use ndarray::Array2;
use proptest::prelude::*;

use poco::critic::{td_target, ChunkCritic};
use poco::envs::{self, EnvKind, EnvSpec, RewardConvention};
use poco::flow::{bc_loss, interpolate, sample_chunk, ActionChunk, FlowDraw, FlowPolicy};
use poco::numerics::mlp::layer_norm_rows;
use poco::numerics::{polyak_update, MlpSpec, ParamSet};
use poco::poco::{clipped_bc, importance_weights, weight_entropy};
use poco::replay::{Episode, ReplayBuffer, StepRecord};
use poco::trainer::{Mode, TrainConfig};

fn q_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, 1..12)
}

proptest! {
    #[test]
    fn weights_form_a_distribution(q in q_values(), eta in 1e-3..10.0f64) {
        let w = importance_weights(&q, eta).unwrap();
        prop_assert_eq!(w.len(), q.len());
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let h = weight_entropy(&w);
        prop_assert!(h >= -1e-12 && h <= (q.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn weights_ignore_a_common_shift(q in q_values(), eta in 0.05..10.0f64, shift in -100.0..100.0f64) {
        let a = importance_weights(&q, eta).unwrap();
        let moved: Vec<f64> = q.iter().map(|x| x + shift).collect();
        let b = importance_weights(&moved, eta).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn weights_follow_q_order(q in q_values(), eta in 0.05..10.0f64) {
        let w = importance_weights(&q, eta).unwrap();
        for i in 0..q.len() {
            for j in 0..q.len() {
                if q[i] > q[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn clipping_caps_value_and_gates_slope(loss in 0.0..10.0f64, zeta in 0.0..5.0f64) {
        let (value, slope) = clipped_bc(loss, zeta);
        prop_assert_eq!(value, loss.min(zeta));
        prop_assert_eq!(slope, if loss < zeta { 1.0 } else { 0.0 });
    }

    #[test]
    fn interpolation_hits_endpoints(pair in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..10), m in 0.0..=1.0f64) {
        let (a0, a1): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        prop_assert_eq!(interpolate(&a0, &a1, 0.0).unwrap(), a0.clone());
        prop_assert_eq!(interpolate(&a0, &a1, 1.0).unwrap(), a1.clone());
        let mid = interpolate(&a0, &a1, m).unwrap();
        for ((x, lo), hi) in mid.iter().zip(&a0).zip(&a1) {
            prop_assert!(*x >= lo.min(*hi) - 1e-12 && *x <= lo.max(*hi) + 1e-12);
        }
    }

    #[test]
    fn sampled_chunks_stay_in_bounds(seed in any::<u64>(), state in prop::collection::vec(-5.0..5.0f64, 3)) {
        let mut rng = common::rng(seed);
        let policy = FlowPolicy::new(3, 2, 2, 3, &[8], &mut rng).unwrap();
        let chunk = sample_chunk(&policy, &state, &mut rng).unwrap();
        prop_assert_eq!(chunk.len(), 4);
        prop_assert!(chunk.in_bounds());
    }

    #[test]
    fn flow_loss_is_nonnegative(seed in any::<u64>(), m in 0.0..=1.0f64) {
        let mut rng = common::rng(seed);
        let policy = FlowPolicy::new(2, 2, 1, 3, &[8], &mut rng).unwrap();
        let target = ActionChunk(vec![0.3, -0.7]);
        let draw = FlowDraw::new(m, vec![0.1, 1.5]).unwrap();
        prop_assert!(bc_loss(&policy, &[0.2, 0.4], &target, &draw).unwrap() >= 0.0);
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 4..12), 1..5)) {
        let width = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().cycle().take(width).copied()).collect();
        let x = Array2::from_shape_vec((rows.len(), width), flat).unwrap();
        let (y, _) = layer_norm_rows(&x);
        for (xr, yr) in x.rows().into_iter().zip(y.rows()) {
            let var = xr.var(0.0);
            prop_assume!(var > 1e-3);
            prop_assert!(yr.mean().unwrap().abs() <= 1e-9);
            prop_assert!((yr.var(0.0) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn polyak_target_lags_by_tau(seed in any::<u64>(), tau in 0.0..=1.0f64) {
        let mut rng = common::rng(seed);
        let spec = MlpSpec::new(2, &[4], 1, false).unwrap();
        let target = ParamSet::init(&spec, &mut rng);
        let online = ParamSet::init(&spec, &mut rng);
        let next = polyak_update(&target, &online, tau).unwrap();
        let before = target.max_abs_diff(&online).unwrap();
        let after = next.max_abs_diff(&online).unwrap();
        prop_assert!((after - (1.0 - tau) * before).abs() <= 1e-12);
        for ((t, o), n) in target.to_flat().iter().zip(online.to_flat()).zip(next.to_flat()) {
            prop_assert!((n - ((1.0 - tau) * t + tau * o)).abs() <= 1e-12);
        }
    }

    #[test]
    fn terminal_windows_ignore_the_bootstrap(
        seed in any::<u64>(),
        rewards in prop::collection::vec(-1.0..0.0f64, 1..=3),
        gamma in 0.0..1.0f64,
    ) {
        let mut rng = common::rng(seed);
        let critic = ChunkCritic::new(2, 3, 1, &[8], &mut rng).unwrap();
        let sum: f64 = rewards.iter().enumerate().map(|(k, r)| gamma.powi(k as i32) * r).sum();
        for boot in [[-1.0, 0.0, 1.0], [0.5, 0.5, 0.5]] {
            let t = td_target(&rewards, true, &[0.3, 0.1], &ActionChunk(boot.to_vec()), &critic, gamma).unwrap();
            prop_assert!((t - sum).abs() <= 1e-12);
        }
    }
}

fn episode(id: u64, len: usize, terminal: bool) -> Episode {
    let records = (0..len)
        .map(|i| StepRecord {
            state: vec![i as f64],
            action: vec![id as f64],
            reward: -1.0,
            done: terminal && i + 1 == len,
            episode_id: id,
            step_index: i,
        })
        .collect();
    let mut e = Episode::new(records);
    if !terminal {
        e.final_state = Some(vec![len as f64]);
    }
    e
}

proptest! {
    #[test]
    fn replay_windows_respect_episodes(
        lens in prop::collection::vec((1usize..30, any::<bool>()), 1..12),
        horizon in 1usize..6,
        capacity in 30usize..120,
    ) {
        let mut buffer = ReplayBuffer::new(1, 1, horizon, capacity).unwrap();
        for (id, &(len, terminal)) in lens.iter().enumerate() {
            buffer.push_episode(episode(id as u64, len, terminal)).unwrap();
            prop_assert!(buffer.num_steps() <= capacity);
        }
        let kept: Vec<u64> = buffer.episodes().map(|e| e.records[0].episode_id).collect();
        // the newest episodes survive, whole
        prop_assert!(kept.windows(2).all(|w| w[1] == w[0] + 1));
        prop_assert_eq!(*kept.last().unwrap(), lens.len() as u64 - 1);
        prop_assert_eq!(kept.iter().map(|&id| lens[id as usize].0).sum::<usize>(), buffer.num_steps());
        // a truncated episode's partial tail has no next state to bootstrap from
        let expected_windows: usize = kept
            .iter()
            .map(|&id| match lens[id as usize] {
                (len, true) => len.div_ceil(horizon),
                (len, false) => len / horizon,
            })
            .sum();
        prop_assert_eq!(buffer.num_windows(), expected_windows);
        for w in buffer.windows() {
            prop_assert!(kept.contains(&w.episode_id));
            prop_assert_eq!(w.start_step % horizon, 0);
            prop_assert_eq!(w.chunk.len(), horizon);
            prop_assert!(w.rewards.len() <= horizon);
            let len = lens[w.episode_id as usize].0;
            prop_assert_eq!(w.rewards.len(), horizon.min(len - w.start_step));
            if w.rewards.len() < horizon {
                prop_assert!(w.terminal);
            }
            // every action in the chunk comes from this episode
            for t in 0..w.rewards.len() {
                prop_assert_eq!(w.chunk.step(t, 1)[0], w.episode_id as f64);
            }
        }
    }

    #[test]
    fn random_rollouts_respect_the_environment(
        kind in prop::sample::select(vec![EnvKind::PointReach, EnvKind::ChannelInsert, EnvKind::BimodalReach]),
        seed in any::<u64>(),
        actions in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 60),
    ) {
        let spec = EnvSpec { reward: RewardConvention::NegOneZero, ..EnvSpec::new(kind) };
        let mut state = envs::reset(&spec, seed);
        prop_assert!(spec.in_start_region(state.position));
        let mut total = 0.0;
        let mut last = None;
        for (ax, ay) in actions {
            if state.done {
                break;
            }
            let out = envs::step(&spec, &state, &[ax, ay]).unwrap();
            prop_assert!(out.state.position.iter().all(|p| p.abs() <= spec.bound));
            prop_assert!(out.state.steps <= spec.horizon);
            prop_assert!(spec.walls.iter().all(|w| !w.contains(out.state.position) || on_face(w, out.state.position)));
            total += out.reward;
            last = Some(out);
            state = out.state;
        }
        let last = last.unwrap();
        prop_assert!(total >= -(spec.horizon as f64) && total <= 0.0);
        if state.done {
            prop_assert_eq!(last.success, last.reward == 0.0);
        }
    }

    #[test]
    fn config_text_round_trips(
        kind in prop::sample::select(vec![EnvKind::PointReach, EnvKind::ChannelInsert, EnvKind::BimodalReach]),
        beta in 0.0..20.0f64,
        zeta in 0.0..3.0f64,
        eta in 1e-4..10.0f64,
        gamma in 0.5..1.0f64,
        lr in 1e-6..1e-2f64,
        hidden in prop::collection::vec(1usize..300, 1..4),
        chunk_len in 1usize..10,
        seed in any::<u64>(),
        concurrent in any::<bool>(),
    ) {
        let mut cfg = TrainConfig::new(kind);
        cfg.beta = beta;
        cfg.zeta = zeta;
        cfg.eta = eta;
        cfg.gamma = gamma;
        cfg.actor_lr = lr;
        cfg.critic_lr = lr / 3.0;
        cfg.actor_hidden = hidden.clone();
        cfg.critic_hidden = hidden.iter().rev().copied().collect();
        cfg.chunk_len = chunk_len;
        cfg.seed = seed;
        cfg.env.expert_gain = 1.0 + lr;
        cfg.mode = if concurrent { Mode::Concurrent } else { Mode::Sequential };
        let parsed = TrainConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(parsed, cfg);
    }
}

fn on_face(wall: &poco::envs::Rect, p: [f64; 2]) -> bool {
    (0..2).any(|axis| p[axis] == wall.min[axis] || p[axis] == wall.max[axis])
}
