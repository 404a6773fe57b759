//! Metrics rows and their CSV rendering.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

pub const METRICS_HEADER: &str =
    "global_step,phase,episodes,success_rate_20,critic_loss,bc_loss,surrogate_loss,weight_entropy,q_mean";
pub const EVAL_HEADER: &str = "global_step,phase,success_rate,mean_return";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Offline,
    Warmup,
    Online,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Offline => "offline",
            Phase::Warmup => "warmup",
            Phase::Online => "online",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub global_step: u64,
    pub phase: Phase,
    pub episodes: u64,
    pub success_rate_20: Option<f64>,
    pub critic_loss: Option<f64>,
    pub bc_loss: Option<f64>,
    pub surrogate_loss: Option<f64>,
    pub weight_entropy: Option<f64>,
    pub q_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub global_step: u64,
    pub phase: Phase,
    pub success_rate: f64,
    pub mean_return: f64,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.global_step,
            r.phase,
            r.episodes,
            cell(r.success_rate_20),
            cell(r.critic_loss),
            cell(r.bc_loss),
            cell(r.surrogate_loss),
            cell(r.weight_entropy),
            cell(r.q_mean)
        );
    }
    out
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.global_step, r.phase, r.success_rate, r.mean_return
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Success flags of the most recent episodes, at most `window` of them.
#[derive(Debug, Clone)]
pub struct RunningSuccess {
    window: usize,
    recent: VecDeque<bool>,
}

impl RunningSuccess {
    pub fn new(window: usize) -> Self {
        RunningSuccess {
            window,
            recent: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, success: bool) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(success);
    }

    /// `None` until the first episode finishes.
    pub fn rate(&self) -> Option<f64> {
        if self.recent.is_empty() {
            None
        } else {
            Some(self.recent.iter().filter(|&&s| s).count() as f64 / self.recent.len() as f64)
        }
    }

    pub fn is_full(&self) -> bool {
        self.recent.len() == self.window
    }
}

/// Running mean of an optional statistic over one log interval.
#[derive(Debug, Clone, Copy, Default)]
pub struct Mean {
    sum: f64,
    count: u64,
}

impl Mean {
    pub fn add(&mut self, x: f64) {
        self.sum += x;
        self.count += 1;
    }

    /// Mean since the last take, then reset.
    pub fn take(&mut self) -> Option<f64> {
        let out = (self.count > 0).then(|| self.sum / self.count as f64);
        *self = Mean::default();
        out
    }
}
