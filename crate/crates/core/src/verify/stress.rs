//! Native multi-threaded runs with an independent occupancy witness.

use std::hint::black_box;
use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context::ProcessContext;
use crate::error::GmeError;
use crate::gme::{Config, Gme};
use crate::memory::NativeMemory;
use crate::node::SessionId;
use crate::trace::{merge, TraceEvent};

/// How each thread picks the session of its next request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionPattern {
    /// Uniform over `1..=sessions`.
    Uniform,
    /// Every request asks for session 1.
    Homogeneous,
    /// Thread `i` always asks for session `i mod sessions + 1`.
    Fixed,
}

#[derive(Clone, Debug)]
pub struct StressConfig {
    /// Lock configuration; one thread per process.
    pub lock: Config,
    /// Passages per thread.
    pub passages: u64,
    pub sessions: u64,
    pub pattern: SessionPattern,
    pub seed: u64,
    /// Local iterations inside each critical section.
    pub cs_work: u32,
}

impl StressConfig {
    pub fn new(lock: Config, passages: u64, sessions: u64) -> Self {
        StressConfig { lock, passages, sessions, pattern: SessionPattern::Uniform, seed: 0, cs_work: 8 }
    }
}

pub struct StressReport {
    pub gme: Gme<NativeMemory>,
    pub contexts: Vec<ProcessContext>,
    /// Merged trace of all threads, ordered by sequence number.
    pub trace: Vec<TraceEvent>,
    /// Times a thread found a different session inside its instance.
    pub witness_conflicts: u64,
    pub elapsed: Duration,
}

const COUNT_BITS: u32 = 16;
const COUNT_MASK: u64 = (1 << COUNT_BITS) - 1;

/// Occupancy word per instance: session in the high bits, occupant count in
/// the low bits. Kept outside the lock's memory.
struct Witness {
    slots: Vec<AtomicU64>,
    conflicts: AtomicU64,
}

impl Witness {
    /// Returns false if another session is inside.
    fn arrive(&self, instance: usize, session: SessionId) -> bool {
        let slot = &self.slots[instance - 1];
        let mut cur = slot.load(SeqCst);
        loop {
            let (s, c) = (cur >> COUNT_BITS, cur & COUNT_MASK);
            if c > 0 && s != session {
                self.conflicts.fetch_add(1, SeqCst);
                return false;
            }
            let next = session << COUNT_BITS | (c + 1);
            match slot.compare_exchange(cur, next, SeqCst, SeqCst) {
                Ok(_) => return true,
                Err(v) => cur = v,
            }
        }
    }

    fn leave(&self, instance: usize) {
        self.slots[instance - 1].fetch_sub(1, SeqCst);
    }
}

/// Runs `passages` passages on each of `lock.processes` threads and returns
/// the lock, contexts and merged trace.
pub fn run_stress(cfg: &StressConfig) -> Result<StressReport, GmeError> {
    if cfg.sessions == 0 || cfg.sessions >= 1 << (64 - COUNT_BITS) {
        return Err(GmeError::InvalidConfig(format!("{} sessions", cfg.sessions)));
    }
    let gme = Gme::native(cfg.lock.clone())?;
    let contexts = gme.contexts();
    let m = cfg.lock.instances as u32;
    let witness = Witness {
        slots: (0..cfg.lock.instances).map(|_| AtomicU64::new(0)).collect(),
        conflicts: AtomicU64::new(0),
    };
    let start = Instant::now();
    let mut contexts: Vec<ProcessContext> = std::thread::scope(|s| {
        let handles: Vec<_> = contexts
            .into_iter()
            .map(|mut ctx| {
                let (gme, witness) = (&gme, &witness);
                s.spawn(move || {
                    let index = ctx.pid().index() as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (index + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    for _ in 0..cfg.passages {
                        let instance = rng.random_range(1..=m);
                        let session = match cfg.pattern {
                            SessionPattern::Uniform => rng.random_range(1..=cfg.sessions),
                            SessionPattern::Homogeneous => 1,
                            SessionPattern::Fixed => index % cfg.sessions + 1,
                        };
                        gme.enter_blocking(&mut ctx, instance, session).expect("enter rejected");
                        let counted = witness.arrive(instance as usize, session);
                        for i in 0..cfg.cs_work {
                            black_box(i);
                        }
                        if counted {
                            witness.leave(instance as usize);
                        }
                        gme.exit_blocking(&mut ctx, instance).expect("exit rejected");
                    }
                    ctx
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("stress thread panicked")).collect()
    });
    let elapsed = start.elapsed();
    let mut buffers: Vec<Vec<TraceEvent>> = contexts.iter_mut().map(|c| c.take_trace()).collect();
    if let Some(rec) = gme.recorder() {
        buffers.push(rec.take_shared());
    }
    let trace = merge(buffers);
    Ok(StressReport {
        gme,
        contexts,
        trace,
        witness_conflicts: witness.conflicts.load(SeqCst),
        elapsed,
    })
}
