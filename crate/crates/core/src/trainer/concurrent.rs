//! Fine-tuning with interaction and learning on separate threads.
//!
//! The interaction thread is the only writer of the replay buffer and reads
//! the latest published actor snapshot at the start of every episode. The
//! learner is paced so its iteration count never exceeds `utd_ratio` times
//! the environment steps taken; it does not pause the interaction thread
//! while updating. Rows are stamped with the learner's iteration count.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::metrics::RunningSuccess;
use super::*;

struct Shared {
    buffer: Mutex<ReplayBuffer>,
    snapshot: Mutex<Arc<FlowPolicy>>,
    env_steps: AtomicU64,
    episodes: AtomicU64,
    running: Mutex<RunningSuccess>,
    online: AtomicBool,
    finished: AtomicBool,
}

pub(super) fn finetune(cfg: &TrainConfig, mut learner: Learner, buffer: ReplayBuffer) -> Result<FinetuneReport> {
    let initial = eval_row(cfg, &learner.actor, 0, Phase::Warmup)?;
    let initial_success = initial.success_rate;
    let first_id = demos_max_id(&buffer) + 1;
    let shared = Arc::new(Shared {
        buffer: Mutex::new(buffer),
        snapshot: Mutex::new(Arc::new(learner.actor.clone())),
        env_steps: AtomicU64::new(0),
        episodes: AtomicU64::new(0),
        running: Mutex::new(RunningSuccess::new(SUCCESS_WINDOW)),
        online: AtomicBool::new(false),
        finished: AtomicBool::new(false),
    });

    let actor_side = {
        let shared = Arc::clone(&shared);
        let cfg = cfg.clone();
        std::thread::spawn(move || -> Result<(Option<u64>, Vec<EpisodeOutcome>)> {
            let mut rng = stream(cfg.seed, "interaction");
            let mut reached = None;
            let mut tuned = RunningSuccess::new(SUCCESS_WINDOW);
            let mut outcomes = Vec::new();
            let result = (|| {
                while shared.env_steps.load(Ordering::SeqCst) < cfg.online_steps {
                    let index = shared.episodes.load(Ordering::SeqCst);
                    let started_online = shared.online.load(Ordering::SeqCst);
                    let policy = Arc::clone(&shared.snapshot.lock().expect("snapshot lock"));
                    let budget = cfg.online_steps - shared.env_steps.load(Ordering::SeqCst);
                    let (episode, success) = rollout(
                        &cfg.env,
                        policy.as_ref(),
                        envs::train_seed(cfg.seed, index),
                        first_id + index,
                        budget,
                        &mut rng,
                    )?;
                    let steps = episode.len() as u64;
                    shared.buffer.lock().expect("buffer lock").push_episode(episode)?;
                    let mut running = shared.running.lock().expect("running lock");
                    running.push(success);
                    if started_online {
                        tuned.push(success);
                    }
                    shared.episodes.fetch_add(1, Ordering::SeqCst);
                    let env_step = shared.env_steps.fetch_add(steps, Ordering::SeqCst) + steps;
                    outcomes.push(EpisodeOutcome {
                        env_step,
                        success,
                        after_warmup: started_online,
                    });
                    if cfg.stop_success > 0.0 && tuned.is_full() && tuned.rate().unwrap_or(0.0) >= cfg.stop_success {
                        reached = Some(shared.env_steps.load(Ordering::SeqCst));
                        break;
                    }
                }
                Ok(())
            })();
            shared.finished.store(true, Ordering::SeqCst);
            result.map(|_| (reached, outcomes))
        })
    };

    let mut rng = stream(cfg.seed, "update");
    let mut builder = RowBuilder::default();
    let mut rows = Vec::new();
    let mut evals = vec![initial];
    let log_iters = ((cfg.log_every as f64 * cfg.utd_ratio).ceil() as u64).max(1);
    let eval_iters = ((cfg.eval_every as f64 * cfg.utd_ratio).ceil() as u64).max(1);
    let learn_result = (|| -> Result<()> {
        loop {
            let steps = shared.env_steps.load(Ordering::SeqCst);
            let done = shared.finished.load(Ordering::SeqCst);
            let allowed = (cfg.utd_ratio * steps as f64).floor() as u64;
            if learner.iteration >= allowed {
                if done {
                    return Ok(());
                }
                std::thread::yield_now();
                continue;
            }
            let stats = {
                let buffer = shared.buffer.lock().expect("buffer lock");
                learner.iterate(&buffer, &mut rng)
            }
            .map_err(|e| match e {
                Error::NumericalOverflow(_) => diverged(cfg, &learner, steps, e),
                other => other,
            })?;
            builder.add(&stats);
            if learner.phase() == Phase::Online {
                shared.online.store(true, Ordering::SeqCst);
            }
            *shared.snapshot.lock().expect("snapshot lock") = Arc::new(learner.actor.clone());
            let it = learner.iteration;
            if it.is_multiple_of(log_iters) {
                let rate = shared.running.lock().expect("running lock").rate();
                rows.push(builder.row(it, learner.phase(), shared.episodes.load(Ordering::SeqCst), rate));
            }
            if it.is_multiple_of(eval_iters) {
                evals.push(eval_row(cfg, &learner.actor, it, learner.phase())?);
            }
        }
    })();
    if learn_result.is_err() {
        // stop the interaction thread before reporting
        shared.env_steps.store(u64::MAX / 2, Ordering::SeqCst);
    }
    let (reached_at, outcomes) = actor_side
        .join()
        .map_err(|_| Error::ContractViolation("interaction thread panicked".into()))??;
    learn_result?;

    let it = learner.iteration;
    let rate = shared.running.lock().expect("running lock").rate();
    let episodes = shared.episodes.load(Ordering::SeqCst);
    if rows.last().is_none_or(|r| r.global_step != it) {
        rows.push(builder.row(it, learner.phase(), episodes, rate));
    }
    if evals.last().is_none_or(|r| r.global_step != it) {
        evals.push(eval_row(cfg, &learner.actor, it, learner.phase())?);
    }
    Ok(FinetuneReport {
        iterations: it,
        env_steps: shared.env_steps.load(Ordering::SeqCst),
        actor: learner.actor,
        critic: learner.critic,
        rows,
        evals,
        initial_success,
        episodes,
        reached_at,
        outcomes,
    })
}
