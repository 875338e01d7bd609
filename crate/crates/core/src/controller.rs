//! Rule-based adaptive time-pressure controller.
//!
//! Keeps the most recent responses in a ring buffer. When mean response time
//! and its recent trend are both above threshold while accuracy is below
//! threshold, the tolerant counter accrues; pressure is delivered only once
//! the tolerant counter reaches `tc` and fewer than `pc` pushes have been
//! made.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUFFER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Mean response time (seconds) that must be exceeded.
    pub rt: f64,
    /// Signed recent-minus-older rt trend that must be exceeded.
    pub delta_rt: f64,
    /// Mean accuracy the buffer must fall below.
    pub accu: f64,
    /// Maximum number of pushes per session.
    pub pc: u32,
    /// Triggers to tolerate before a push.
    pub tc: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            rt: 3.0,
            delta_rt: 0.0,
            accu: 0.9,
            pc: 20,
            tc: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub rt: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mean_rt: f64,
    pub delta_rt: f64,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    buffer: VecDeque<Response>,
    push_counter: u32,
    tolerant_counter: u32,
    thresholds: Thresholds,
}

impl ControllerState {
    pub fn new(thresholds: Thresholds) -> Self {
        Self {
            buffer: VecDeque::with_capacity(BUFFER_LEN),
            push_counter: 0,
            tolerant_counter: 0,
            thresholds,
        }
    }

    pub fn buffer(&self) -> impl ExactSizeIterator<Item = &Response> {
        self.buffer.iter()
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn push_counter(&self) -> u32 {
        self.push_counter
    }

    pub fn tolerant_counter(&self) -> u32 {
        self.tolerant_counter
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    /// Restores counters, e.g. when resuming a persisted session.
    pub fn with_counters(mut self, push: u32, tolerant: u32) -> Self {
        self.push_counter = push;
        self.tolerant_counter = tolerant;
        self
    }

    /// Records one response, evicting the oldest beyond [`BUFFER_LEN`].
    pub fn observe(&mut self, rt: f64, correct: bool) -> Result<()> {
        if !(rt > 0.0 && rt <= 10.0) {
            return Err(Error::invalid(format!("rt must lie in (0, 10] s, got {rt}")));
        }
        if self.buffer.len() == BUFFER_LEN {
            self.buffer.pop_front();
        }
        self.buffer.push_back(Response { rt, correct });
        Ok(())
    }

    /// Buffer statistics; `None` while the buffer is empty.
    pub fn metrics(&self) -> Option<Metrics> {
        let n = self.buffer.len();
        if n == 0 {
            return None;
        }
        let rts: Vec<f64> = self.buffer.iter().map(|r| r.rt).collect();
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let delta_rt = if n < 2 {
            0.0
        } else {
            // odd lengths leave the middle element in the older half
            let half = n / 2;
            mean(&rts[n - half..]) - mean(&rts[..n - half])
        };
        let correct = self.buffer.iter().filter(|r| r.correct).count();
        Some(Metrics {
            mean_rt: mean(&rts),
            delta_rt,
            mean_accuracy: correct as f64 / n as f64,
        })
    }

    /// Decides whether the next trial gets time pressure.
    ///
    /// An empty buffer never delivers.
    pub fn decide(&mut self) -> bool {
        let Some(m) = self.metrics() else {
            return false;
        };
        let th = &self.thresholds;
        let trigger = m.mean_rt > th.rt && m.delta_rt > th.delta_rt && m.mean_accuracy < th.accu;
        if !trigger {
            return false;
        }
        self.tolerant_counter += 1;
        let deliver = self.tolerant_counter >= th.tc && self.push_counter < th.pc;
        if deliver {
            self.push_counter += 1;
            self.tolerant_counter = 0;
        }
        deliver
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Replays a response log, returning the pressure decision made before each
/// trial. The first trial has no history and never receives pressure.
pub fn replay(thresholds: Thresholds, log: &[Response]) -> Result<Vec<bool>> {
    let mut state = ControllerState::new(thresholds);
    let mut out = Vec::with_capacity(log.len());
    for r in log {
        out.push(state.decide());
        state.observe(r.rt, r.correct)?;
    }
    Ok(out)
}
