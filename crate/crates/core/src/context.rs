//! History retention: pinned sink segments plus a sliding window of step
//! summaries, bounded by a character budget.
//!
//! Sinks (the instruction block and the task description) are never
//! evicted. Step segments are kept newest-first until the budget is spent, so
//! the window is always the longest recent suffix that fits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BUDGET_CHARS: usize = 24_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContextError {
    #[error("sink segments need {needed} characters but the budget is {budget}")]
    SinkOverflow { needed: usize, budget: usize },
    #[error("step {index} does not follow step {last}")]
    NonMonotonicStep { index: u64, last: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Sink,
    Step,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistorySegment {
    pub kind: SegmentKind,
    pub step_index: u64,
    pub text: String,
    pub size: usize,
}

impl HistorySegment {
    pub fn sink(text: impl Into<String>) -> Self {
        let text = text.into();
        Self { kind: SegmentKind::Sink, step_index: 0, size: text.chars().count(), text }
    }

    /// A step summary, rendered as `Step <index>: <action>`.
    pub fn step(step_index: u64, action: &str) -> Self {
        let text = format!("Step {step_index}: {action}");
        Self { kind: SegmentKind::Step, step_index, size: text.chars().count(), text }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextState {
    sinks: Vec<HistorySegment>,
    window: Vec<HistorySegment>,
    budget: usize,
    last_step: u64,
}

impl ContextState {
    /// Starts an empty window behind the given sinks.
    pub fn new(sinks: Vec<HistorySegment>, budget: usize) -> Result<Self, ContextError> {
        let state = Self { sinks, window: Vec::new(), budget, last_step: 0 };
        state.check_sinks()?;
        Ok(state)
    }

    /// Rebuilds a state from parts, e.g. a window restored from elsewhere.
    /// The window is not trimmed; call [`ContextState::evict`] for that.
    pub fn from_parts(sinks: Vec<HistorySegment>, window: Vec<HistorySegment>, budget: usize) -> Self {
        let last_step = window.iter().map(|s| s.step_index).max().unwrap_or(0);
        Self { sinks, window, budget, last_step }
    }

    pub fn sinks(&self) -> &[HistorySegment] {
        &self.sinks
    }

    pub fn window(&self) -> &[HistorySegment] {
        &self.window
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn sink_size(&self) -> usize {
        self.sinks.iter().map(|s| s.size).sum()
    }

    pub fn retained_size(&self) -> usize {
        self.sink_size() + self.window.iter().map(|s| s.size).sum::<usize>()
    }

    fn check_sinks(&self) -> Result<(), ContextError> {
        let needed = self.sink_size();
        if needed > self.budget {
            return Err(ContextError::SinkOverflow { needed, budget: self.budget });
        }
        Ok(())
    }

    /// Keeps the longest suffix of the window that fits beside the sinks.
    pub fn evict(&self) -> Result<ContextState, ContextError> {
        self.check_sinks()?;
        let mut room = self.budget - self.sink_size();
        let mut keep = 0;
        for seg in self.window.iter().rev() {
            if seg.size > room {
                break;
            }
            room -= seg.size;
            keep += 1;
        }
        Ok(ContextState {
            sinks: self.sinks.clone(),
            window: self.window[self.window.len() - keep..].to_vec(),
            budget: self.budget,
            last_step: self.last_step,
        })
    }

    pub fn append_step(&self, step_index: u64, action: &str) -> Result<ContextState, ContextError> {
        if step_index <= self.last_step {
            return Err(ContextError::NonMonotonicStep { index: step_index, last: self.last_step });
        }
        let mut next = self.clone();
        next.window.push(HistorySegment::step(step_index, action));
        next.last_step = step_index;
        next.evict()
    }

    /// Window texts joined by newlines, oldest first.
    pub fn render_history(&self) -> String {
        self.window.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n")
    }
}
