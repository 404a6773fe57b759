//! Episode store that serves chunk-aligned transition windows.
//!
//! Windows start at step indices `0, T, 2T, ...` of each episode and never
//! cross an episode boundary. A window reaching the end of an episode that
//! finished with `done` is terminal and may be shorter than `T`; its chunk is
//! zero-padded. Truncated episodes (no `done`) only yield their last window
//! when the observation after the final step is known.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::flow::ActionChunk;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub episode_id: u64,
    pub step_index: usize,
}

/// One rollout. `final_state` is the observation after the last step, when
/// known.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub records: Vec<StepRecord>,
    pub final_state: Option<Vec<f64>>,
}

impl Episode {
    pub fn new(records: Vec<StepRecord>) -> Self {
        Episode {
            records,
            final_state: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Ended by reaching a terminal state rather than by truncation.
    pub fn is_terminal(&self) -> bool {
        self.records.last().is_some_and(|r| r.done)
    }

    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkTransition {
    pub state: Vec<f64>,
    pub chunk: ActionChunk,
    pub rewards: Vec<f64>,
    pub terminal: bool,
    pub next_state: Vec<f64>,
    pub episode_id: u64,
    /// Step index of the first action in the window.
    pub start_step: usize,
}

/// Cut an episode into chunk-aligned windows.
pub fn episode_windows(episode: &Episode, horizon: usize, action_dim: usize) -> Vec<ChunkTransition> {
    let records = &episode.records;
    let len = records.len();
    let mut out = Vec::with_capacity(len.div_ceil(horizon.max(1)));
    for start in (0..len).step_by(horizon) {
        let end = (start + horizon).min(len);
        let (terminal, next_state) = if end < len {
            (false, records[end].state.clone())
        } else if records[len - 1].done {
            (true, records[len - 1].state.clone())
        } else if end - start == horizon {
            match &episode.final_state {
                Some(s) => (false, s.clone()),
                None => continue,
            }
        } else {
            continue;
        };
        let mut chunk = vec![0.0; horizon * action_dim];
        for (k, r) in records[start..end].iter().enumerate() {
            chunk[k * action_dim..(k + 1) * action_dim].copy_from_slice(&r.action);
        }
        out.push(ChunkTransition {
            state: records[start].state.clone(),
            chunk: ActionChunk(chunk),
            rewards: records[start..end].iter().map(|r| r.reward).collect(),
            terminal,
            next_state,
            episode_id: records[start].episode_id,
            start_step: start,
        });
    }
    out
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    state_dim: usize,
    action_dim: usize,
    horizon: usize,
    capacity: usize,
    episodes: VecDeque<(u64, Episode)>,
    windows: VecDeque<(u64, ChunkTransition)>,
    total_steps: usize,
    next_seq: u64,
}

pub const DEFAULT_CAPACITY: usize = 1_000_000;

impl ReplayBuffer {
    pub fn new(state_dim: usize, action_dim: usize, horizon: usize, capacity: usize) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 || horizon == 0 || capacity == 0 {
            return Err(Error::InvalidArgument(
                "replay dimensions and capacity must be positive".into(),
            ));
        }
        Ok(ReplayBuffer {
            state_dim,
            action_dim,
            horizon,
            capacity,
            episodes: VecDeque::new(),
            windows: VecDeque::new(),
            total_steps: 0,
            next_seq: 0,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_steps(&self) -> usize {
        self.total_steps
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn windows(&self) -> impl Iterator<Item = &ChunkTransition> {
        self.windows.iter().map(|(_, w)| w)
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().map(|(_, e)| e)
    }

    fn validate(&self, episode: &Episode) -> Result<()> {
        let records = &episode.records;
        let id = records[0].episode_id;
        for (i, r) in records.iter().enumerate() {
            if r.step_index != i {
                return Err(Error::InvalidArgument(format!(
                    "episode {id}: record {i} has step index {} (indices must run 0, 1, 2, ...)",
                    r.step_index
                )));
            }
            if r.episode_id != id {
                return Err(Error::InvalidArgument(format!(
                    "episode {id}: record {i} belongs to episode {}",
                    r.episode_id
                )));
            }
            if r.state.len() != self.state_dim || r.action.len() != self.action_dim {
                return Err(shape_err(format!(
                    "episode {id}: record {i} has wrong state or action width"
                )));
            }
            if r.done && i + 1 != records.len() {
                return Err(Error::InvalidArgument(format!(
                    "episode {id}: done flag before the last record"
                )));
            }
        }
        if let Some(s) = &episode.final_state {
            if s.len() != self.state_dim {
                return Err(shape_err(format!("episode {id}: final state has wrong width")));
            }
        }
        if records.len() > self.capacity {
            return Err(Error::InvalidArgument(format!(
                "episode {id} has {} steps, more than the buffer capacity {}",
                records.len(),
                self.capacity
            )));
        }
        Ok(())
    }

    /// Append one episode, evicting whole episodes oldest-first to stay
    /// within capacity. Empty episodes are ignored.
    pub fn push_episode(&mut self, episode: Episode) -> Result<()> {
        if episode.is_empty() {
            return Ok(());
        }
        self.validate(&episode)?;
        while self.total_steps + episode.len() > self.capacity {
            let (seq, old) = self.episodes.pop_front().expect("capacity exceeded with no episodes");
            self.total_steps -= old.len();
            while self.windows.front().is_some_and(|(s, _)| *s == seq) {
                self.windows.pop_front();
            }
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        for w in episode_windows(&episode, self.horizon, self.action_dim) {
            self.windows.push_back((seq, w));
        }
        self.total_steps += episode.len();
        self.episodes.push_back((seq, episode));
        Ok(())
    }

    /// Uniform draws with replacement over all windows.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<ChunkTransition>> {
        if self.windows.is_empty() {
            return Err(Error::Empty("replay buffer has no windows".into()));
        }
        let n = self.windows.len();
        Ok((0..batch_size)
            .map(|_| self.windows[rng.random_range(0..n)].1.clone())
            .collect())
    }

    /// Uniform draws restricted to window indices in `[lo, hi)`.
    pub fn sample_range<R: Rng + ?Sized>(
        &self,
        lo: usize,
        hi: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<ChunkTransition>> {
        if lo >= hi || hi > self.windows.len() {
            return Err(Error::Empty(format!(
                "window range [{lo}, {hi}) of {}",
                self.windows.len()
            )));
        }
        Ok((0..batch_size)
            .map(|_| self.windows[rng.random_range(lo..hi)].1.clone())
            .collect())
    }
}

/// Demonstrations with their dimensions, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub state_dim: usize,
    pub action_dim: usize,
    pub episodes: Vec<Episode>,
}

impl DemoSet {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}

fn fmt_float(out: &mut String, x: f64) {
    // 9 significant digits
    write!(out, " {x:.8e}").expect("write to string");
}

pub fn format_demos(demos: &DemoSet) -> String {
    let mut out = format!(
        "poco-demos v1 state_dim={} action_dim={}\n",
        demos.state_dim, demos.action_dim
    );
    for ep in &demos.episodes {
        for r in &ep.records {
            write!(out, "{} {} {}", r.episode_id, r.step_index, u8::from(r.done)).expect("write to string");
            fmt_float(&mut out, r.reward);
            for &x in r.state.iter().chain(&r.action) {
                fmt_float(&mut out, x);
            }
            out.push('\n');
        }
    }
    out
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let mut parts = line.split(' ');
    if parts.next() != Some("poco-demos") || parts.next() != Some("v1") {
        return Err(parse_err(
            1,
            "expected header `poco-demos v1 state_dim=<d> action_dim=<a>`",
        ));
    }
    let mut field = |key: &str| -> Result<usize> {
        parts
            .next()
            .and_then(|p| p.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| parse_err(1, format!("missing or invalid `{key}<n>` in header")))
    };
    let d = field("state_dim=")?;
    let a = field("action_dim=")?;
    if parts.next().is_some() {
        return Err(parse_err(1, "trailing fields in header"));
    }
    Ok((d, a))
}

pub fn parse_demos(text: &str) -> Result<DemoSet> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let (state_dim, action_dim) = parse_header(header)?;
    let mut episodes: Vec<Episode> = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let fields: Vec<&str> = line.split(' ').collect();
        let expected = 4 + state_dim + action_dim;
        if fields.len() != expected {
            return Err(parse_err(
                lineno,
                format!("expected {expected} fields, found {}", fields.len()),
            ));
        }
        let episode_id: u64 = fields[0].parse().map_err(|_| parse_err(lineno, "bad episode id"))?;
        let step_index: usize = fields[1].parse().map_err(|_| parse_err(lineno, "bad step index"))?;
        let done = match fields[2] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(lineno, format!("done flag must be 0 or 1, found {other:?}"))),
        };
        let floats = fields[3..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| parse_err(lineno, "bad float field"))?;
        let record = StepRecord {
            reward: floats[0],
            state: floats[1..1 + state_dim].to_vec(),
            action: floats[1 + state_dim..].to_vec(),
            done,
            episode_id,
            step_index,
        };
        match episodes.last_mut() {
            Some(ep) if ep.records[0].episode_id == episode_id => {
                let prev = ep.records.last().expect("nonempty");
                if prev.done {
                    return Err(parse_err(lineno, format!("episode {episode_id} continues after done")));
                }
                if step_index != prev.step_index + 1 {
                    return Err(parse_err(
                        lineno,
                        format!("step index {step_index} does not follow {}", prev.step_index),
                    ));
                }
                ep.records.push(record);
            }
            _ => {
                if step_index != 0 {
                    return Err(parse_err(
                        lineno,
                        format!("episode {episode_id} starts at step {step_index}"),
                    ));
                }
                episodes.push(Episode::new(vec![record]));
            }
        }
    }
    Ok(DemoSet {
        state_dim,
        action_dim,
        episodes,
    })
}

pub fn save_demos(path: impl AsRef<Path>, demos: &DemoSet) -> Result<()> {
    std::fs::write(path, format_demos(demos))?;
    Ok(())
}

pub fn load_demos(path: impl AsRef<Path>) -> Result<DemoSet> {
    parse_demos(&std::fs::read_to_string(path)?)
}
