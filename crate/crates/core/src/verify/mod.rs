//! Property checkers, interleaving exploration and native stress drivers.
//!
//! Checkers consume either a recorded [`TraceEvent`] sequence or the
//! per-process [`Metrics`](crate::Metrics) and return a [`Verdict`]. The
//! explorer drives the algorithm over [`SimMemory`](crate::memory::SimMemory)
//! and checks invariants after every single shared operation.

mod checks;
mod explore;
mod stress;

use std::fmt;

pub use checks::{
    check_bounded_exit, check_concurrent_entering, check_context_switch, check_gme, check_memory,
    contention, merged_metrics, passages, Passage, PassageContention,
};
pub use explore::{
    explore_exhaustive, explore_random, replay, ExploreLimits, ExploreReport, Request, Scenario,
    Violation, World,
};
pub use stress::{run_stress, SessionPattern, StressConfig, StressReport};

use crate::memory::ProcessId;
use crate::reclaim::CLEANUP_QUANTUM;
use crate::trace::TraceEvent;

/// Shared operations of the entry/exit building blocks with node recycling
/// on and ordinary (non-DSM) waiting.
mod cost {
    use super::CLEANUP_QUANTUM;

    /// Hazard scan micro-step: four reads and a write.
    pub const CLEANUP: u64 = CLEANUP_QUANTUM as u64 * 5;
    /// Acquire write, eight field writes, announce write.
    pub const NEW_NODE: u64 = 10;
    /// Read head, publish hazard, re-read head.
    pub const READ_HEAD_ITERATION: u64 = 3;
    /// Three flags can be set, so a flag CAS fails at most twice.
    pub const SET_GUARD: u64 = 5;
    pub const SET_VACANT: u64 = 3;
    /// Session read plus the costlier of the two branches before waiting:
    /// join attempt (state, add, state, subtract, vacate) or conflict
    /// (guard, vacate).
    pub const BEFORE_WAIT: u64 = 1 + max(4 + SET_VACANT, SET_GUARD + SET_VACANT);
    /// Two reads: at most one failed check of an adjourned session.
    pub const WAIT: u64 = 2;
    /// Selection (6), next CAS, next read, hazard, head test, prev write,
    /// number read and write, head CAS.
    pub const APPEND: u64 = 6 + 8;
    /// Final iteration after reading the head: leader (prev read, retire)
    /// or joiner (session, state, add, state, retire).
    pub const FINISH: u64 = max(1 + 3, 4 + 3);
    pub const CLEAR_HAZARDS: u64 = 2;

    const fn max(a: u64, b: u64) -> u64 {
        if a > b {
            a
        } else {
            b
        }
    }
}

/// Entry sections in a homogeneous workload take at most two outer
/// iterations and the head moves at most once, so at most three head-read
/// iterations in total.
pub const ENTRY_STEP_BOUND: u64 = cost::CLEANUP
    + cost::NEW_NODE
    + 3 * cost::READ_HEAD_ITERATION
    + cost::BEFORE_WAIT
    + cost::WAIT
    + 1
    + cost::APPEND
    + cost::FINISH
    + cost::CLEAR_HAZARDS;

/// The head cannot move while the exiting process is still counted in its
/// session, so one head-read iteration suffices. Owner check, leader flag,
/// size decrement, vacate, clear hazards.
pub const EXIT_STEP_BOUND: u64 =
    cost::READ_HEAD_ITERATION + 1 + cost::SET_GUARD + 1 + cost::SET_VACANT + cost::CLEAR_HAZARDS;

/// Something that lets a failure be reproduced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Counterexample {
    None,
    /// The offending window of a recorded trace.
    Events(Vec<TraceEvent>),
    /// A simulated schedule from the initial state, and the seed that
    /// produced it if it was random.
    Schedule { schedule: Vec<ProcessId>, seed: Option<u64> },
}

/// Outcome of one property check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub property: &'static str,
    pub passed: bool,
    pub detail: String,
    pub counterexample: Counterexample,
}

impl Verdict {
    pub fn pass(property: &'static str, detail: String) -> Self {
        Verdict { property, passed: true, detail, counterexample: Counterexample::None }
    }

    pub fn fail(property: &'static str, detail: String, counterexample: Counterexample) -> Self {
        Verdict { property, passed: false, detail, counterexample }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.property, self.detail)
    }
}

/// The input could not be checked at all.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum HarnessError {
    #[error("malformed trace: {0}")]
    Malformed(String),
}
