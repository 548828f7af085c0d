//! Deterministic replay of application access traces against a
//! [`SimulatedSource`].
//!
//! Each scripted thread runs its steps in order. A step that faults leaves
//! its thread blocked until the faulting page changes, exactly as a real
//! thread would be; other threads keep running.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::sim::{Blocked, SimulatedSource};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepKind {
    Read { len: usize },
    Write { data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub thread: usize,
    pub address: usize,
    pub kind: StepKind,
}

impl Step {
    pub fn read(thread: usize, address: usize, len: usize) -> Self {
        Step {
            thread,
            address,
            kind: StepKind::Read { len },
        }
    }

    pub fn write(thread: usize, address: usize, data: Vec<u8>) -> Self {
        Step {
            thread,
            address,
            kind: StepKind::Write { data },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletedStep {
    pub thread: usize,
    pub address: usize,
    /// Bytes read, or bytes written.
    pub data: Vec<u8>,
    pub is_write: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RunnerError {
    #[error("trace made no progress for {0:?}; blocked threads: {1:?}")]
    Stalled(Duration, Vec<usize>),
}

pub struct ScriptRunner<'a> {
    source: &'a SimulatedSource,
    queues: Vec<VecDeque<Step>>,
    blocked: Vec<Option<(usize, Blocked)>>,
    completed: Vec<CompletedStep>,
}

impl<'a> ScriptRunner<'a> {
    pub fn new(source: &'a SimulatedSource, steps: impl IntoIterator<Item = Step>) -> Self {
        let mut queues: Vec<VecDeque<Step>> = Vec::new();
        for step in steps {
            if queues.len() <= step.thread {
                queues.resize_with(step.thread + 1, VecDeque::new);
            }
            queues[step.thread].push_back(step);
        }
        let n = queues.len();
        ScriptRunner {
            source,
            queues,
            blocked: vec![None; n],
            completed: Vec::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn blocked_threads(&self) -> Vec<usize> {
        (0..self.queues.len()).filter(|&t| self.blocked[t].is_some()).collect()
    }

    /// Completed steps in completion order.
    pub fn completed(&self) -> &[CompletedStep] {
        &self.completed
    }

    pub fn into_completed(self) -> Vec<CompletedStep> {
        self.completed
    }

    /// Gives every thread one chance to complete its next step. Returns the
    /// number of steps completed.
    pub fn advance(&mut self) -> usize {
        let mut progressed = 0;
        for t in 0..self.queues.len() {
            let Some(step) = self.queues[t].front() else {
                continue;
            };
            let range = self
                .source
                .find(step.address)
                .unwrap_or_else(|| panic!("scripted access to unmapped address {:#x}", step.address));
            if let Some((base, b)) = self.blocked[t] {
                if base == range.base() && range.epoch(b.page) == b.epoch {
                    continue;
                }
                self.blocked[t] = None;
            }
            let offset = step.address - range.base();
            let outcome = match &step.kind {
                StepKind::Read { len } => {
                    let mut buf = vec![0u8; *len];
                    range.try_read(offset, &mut buf).map(|_| (buf, false))
                }
                StepKind::Write { data } => range.try_write(offset, data).map(|_| (data.clone(), true)),
            };
            match outcome {
                Ok((data, is_write)) => {
                    let step = self.queues[t].pop_front().expect("front exists");
                    self.completed.push(CompletedStep {
                        thread: t,
                        address: step.address,
                        data,
                        is_write,
                    });
                    progressed += 1;
                }
                Err(b) => self.blocked[t] = Some((range.base(), b)),
            }
        }
        progressed
    }

    /// Advances until every step completed, failing if nothing moves for
    /// `stall_timeout`.
    pub fn run(&mut self, stall_timeout: Duration) -> Result<(), RunnerError> {
        let mut last_progress = Instant::now();
        while !self.is_done() {
            let seen = self.source.changes();
            if self.advance() > 0 {
                last_progress = Instant::now();
                continue;
            }
            if last_progress.elapsed() > stall_timeout {
                return Err(RunnerError::Stalled(stall_timeout, self.blocked_threads()));
            }
            self.source.wait_changes(seen, Duration::from_millis(10));
        }
        Ok(())
    }
}
