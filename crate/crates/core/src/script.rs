//! Deterministic task bodies for simulated threads.
//!
//! A thread's "entry point" is a small script executed one operation per
//! tick. Scripts are data, so scenarios can describe workloads and the
//! scheduler stays a pure function of kernel state plus tuple traffic.

use crate::types::TupleId;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOp {
    /// Burn one tick of CPU.
    Work,
    /// Withdraw from a tuple; suspends the thread when the buffer is empty.
    In { tuple: TupleId },
    /// Deposit a payload into a tuple (local or remote).
    Out { tuple: TupleId, payload: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskScript {
    pub ops: Vec<TaskOp>,
    /// Restart from the first op after the last one; otherwise terminate.
    pub repeat: bool,
}

impl TaskScript {
    pub fn new(ops: Vec<TaskOp>, repeat: bool) -> Self {
        TaskScript { ops, repeat }
    }

    /// The classic event-handler body: withdraw from the event tuple, then
    /// spend `work_ticks` processing, forever.
    pub fn handler(tuple: TupleId, work_ticks: usize) -> Self {
        let mut ops = vec![TaskOp::In { tuple }];
        ops.extend(std::iter::repeat(TaskOp::Work).take(work_ticks));
        TaskScript { ops, repeat: true }
    }

    /// Tuple ids this script touches, for scenario validation.
    pub fn referenced_tuples(&self) -> impl Iterator<Item = TupleId> + '_ {
        self.ops.iter().filter_map(|op| match op {
            TaskOp::Work => None,
            TaskOp::In { tuple } => Some(*tuple),
            TaskOp::Out { tuple, .. } => Some(*tuple),
        })
    }
}
