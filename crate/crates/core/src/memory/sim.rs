use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::future::Future;
use std::hash::{Hash, Hasher};
use std::pin::Pin;
use std::task::{Context, Poll, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CellId, ProcessId, Region, SharedMemory, Word};

/// Kind of a simulated cell operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Read,
    Write,
    Cas { success: bool },
    Faa,
}

impl OpKind {
    pub fn is_mutation(self) -> bool {
        !matches!(self, OpKind::Read | OpKind::Cas { success: false })
    }
}

/// The most recent operation executed, with the cell's value before and
/// after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub pid: ProcessId,
    pub kind: OpKind,
    pub cell: CellId,
    pub old: Word,
    pub new: Word,
}

/// Shape of an operation that has been issued but not yet executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Access {
    Read,
    Write,
    /// CAS or FAA.
    Update,
}

/// One entry of the optional access log.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessRecord {
    pub pid: ProcessId,
    pub cell: CellId,
    pub kind: OpKind,
    pub region: Region,
    pub home: Option<ProcessId>,
}

#[derive(Clone, Copy)]
enum Op {
    Read,
    Write(Word),
    Cas(Word, Word),
    Faa(i64),
}

#[derive(Default)]
struct ProcState {
    steps: u64,
    rmrs: u64,
    cached: HashMap<usize, u64>,
    history: u64,
    region: Region,
    last_read: Option<(CellId, Word)>,
    blocked: Option<(CellId, Word)>,
    pending: Option<(CellId, Access)>,
}

#[derive(Default)]
struct State {
    values: Vec<Word>,
    versions: Vec<u64>,
    home: Vec<Option<ProcessId>>,
    procs: Vec<ProcState>,
    last_op: Option<OpRecord>,
    ops: u64,
    log: Option<Vec<AccessRecord>>,
}

impl State {
    fn proc_mut(&mut self, pid: ProcessId) -> &mut ProcState {
        let i = pid.index();
        if self.procs.len() <= i {
            self.procs.resize_with(i + 1, ProcState::default);
        }
        &mut self.procs[i]
    }
}

fn mix(h: u64, x: u64) -> u64 {
    let mut z = (h ^ x).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Single-threaded instrumented memory whose operations suspend until a
/// [`Simulation`] resumes the issuing process.
///
/// Tracks per-cell versions, per-process step and RMR counts (cache-coherent
/// approximation: a read is remote iff the cell changed since this process
/// last touched it), and a running hash of each process's observed results.
#[derive(Default)]
pub struct SimMemory {
    state: RefCell<State>,
}

impl SimMemory {
    pub fn new() -> Self {
        Self::default()
    }

    fn execute(&self, pid: ProcessId, cell: CellId, op: Op) -> Word {
        let mut guard = self.state.borrow_mut();
        let st = &mut *guard;
        let c = cell.0;
        assert!(c < st.values.len(), "cell {cell:?} not allocated");
        let old = st.values[c];
        let (kind, new, result) = match op {
            Op::Read => (OpKind::Read, old, old),
            Op::Write(v) => (OpKind::Write, v, 0),
            Op::Cas(e, v) => {
                if old == e {
                    (OpKind::Cas { success: true }, v, 1)
                } else {
                    (OpKind::Cas { success: false }, old, 0)
                }
            }
            Op::Faa(d) => (OpKind::Faa, old.wrapping_add(d as u64), old),
        };
        if kind.is_mutation() {
            st.values[c] = new;
            st.versions[c] += 1;
        }
        let version = st.versions[c];
        let home = st.home[c];
        st.ops += 1;
        st.last_op = Some(OpRecord { pid, kind, cell, old, new });
        let tag = match kind {
            OpKind::Read => 1,
            OpKind::Write => 2,
            OpKind::Cas { .. } => 3,
            OpKind::Faa => 4,
        };
        let p = st.proc_mut(pid);
        p.pending = None;
        p.steps += 1;
        let cached = p.cached.insert(c, version);
        let remote = match kind {
            OpKind::Read => cached != Some(version),
            _ => true,
        };
        if remote {
            p.rmrs += 1;
        }
        if kind == OpKind::Read {
            p.last_read = Some((cell, old));
        }
        p.history = mix(mix(p.history, tag << 32 | c as u64), result);
        let region = p.region;
        if let Some(log) = st.log.as_mut() {
            log.push(AccessRecord { pid, cell, kind, region, home });
        }
        result
    }

    fn op(&self, pid: ProcessId, cell: CellId, op: Op) -> SimOp<'_> {
        SimOp { mem: self, pid, cell, op, armed: false }
    }

    fn runnable(&self, pid: ProcessId) -> bool {
        let st = self.state.borrow();
        match st.procs.get(pid.index()).and_then(|p| p.blocked) {
            Some((cell, value)) => st.values[cell.0] != value,
            None => true,
        }
    }

    fn unblock(&self, pid: ProcessId) {
        self.state.borrow_mut().proc_mut(pid).blocked = None;
    }

    /// Total operations executed by all processes.
    pub fn ops_executed(&self) -> u64 {
        self.state.borrow().ops
    }

    pub fn steps(&self, pid: ProcessId) -> u64 {
        self.state.borrow().procs.get(pid.index()).map_or(0, |p| p.steps)
    }

    pub fn rmrs(&self, pid: ProcessId) -> u64 {
        self.state.borrow().procs.get(pid.index()).map_or(0, |p| p.rmrs)
    }

    pub fn version(&self, cell: CellId) -> u64 {
        self.state.borrow().versions[cell.0]
    }

    pub fn home(&self, cell: CellId) -> Option<ProcessId> {
        self.state.borrow().home[cell.0]
    }

    /// Hash of every result `pid` has observed, in order.
    pub fn history(&self, pid: ProcessId) -> u64 {
        self.state.borrow().procs.get(pid.index()).map_or(0, |p| p.history)
    }

    /// The operation `pid` will execute when next stepped, if it is
    /// suspended on one (not paused, not finished).
    pub fn pending(&self, pid: ProcessId) -> Option<(CellId, Access)> {
        self.state.borrow().procs.get(pid.index()).and_then(|p| p.pending)
    }

    pub fn last_op(&self) -> Option<OpRecord> {
        self.state.borrow().last_op
    }

    /// Feeds all cell values into `h`.
    pub fn hash_values<H: Hasher>(&self, h: &mut H) {
        self.state.borrow().values.hash(h);
    }

    pub fn enable_access_log(&self) {
        self.state.borrow_mut().log.get_or_insert_with(Vec::new);
    }

    pub fn take_access_log(&self) -> Vec<AccessRecord> {
        self.state.borrow_mut().log.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

impl fmt::Debug for SimMemory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let st = self.state.borrow();
        f.debug_struct("SimMemory").field("cells", &st.values.len()).field("ops", &st.ops).finish()
    }
}

struct SimOp<'a> {
    mem: &'a SimMemory,
    pid: ProcessId,
    cell: CellId,
    op: Op,
    armed: bool,
}

impl Future for SimOp<'_> {
    type Output = Word;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Word> {
        if !self.armed {
            self.armed = true;
            let access = match self.op {
                Op::Read => Access::Read,
                Op::Write(_) => Access::Write,
                Op::Cas(..) | Op::Faa(_) => Access::Update,
            };
            self.mem.state.borrow_mut().proc_mut(self.pid).pending = Some((self.cell, access));
            return Poll::Pending;
        }
        Poll::Ready(self.mem.execute(self.pid, self.cell, self.op))
    }
}

struct SimPause<'a> {
    mem: &'a SimMemory,
    pid: ProcessId,
    armed: bool,
}

impl Future for SimPause<'_> {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.armed {
            return Poll::Ready(());
        }
        self.armed = true;
        let mut st = self.mem.state.borrow_mut();
        let p = st.proc_mut(self.pid);
        p.blocked = p.last_read;
        Poll::Pending
    }
}

impl SharedMemory for SimMemory {
    fn read(&self, pid: ProcessId, cell: CellId) -> impl Future<Output = Word> {
        self.op(pid, cell, Op::Read)
    }

    fn write(&self, pid: ProcessId, cell: CellId, value: Word) -> impl Future<Output = ()> {
        let op = self.op(pid, cell, Op::Write(value));
        async move {
            op.await;
        }
    }

    fn cas(
        &self,
        pid: ProcessId,
        cell: CellId,
        expected: Word,
        new: Word,
    ) -> impl Future<Output = bool> {
        let op = self.op(pid, cell, Op::Cas(expected, new));
        async move { op.await == 1 }
    }

    fn faa(&self, pid: ProcessId, cell: CellId, delta: i64) -> impl Future<Output = Word> {
        self.op(pid, cell, Op::Faa(delta))
    }

    /// Blocks `pid` until the cell it read last holds a different value.
    fn pause(&self, pid: ProcessId, _attempt: u32) -> impl Future<Output = ()> {
        SimPause { mem: self, pid, armed: false }
    }

    fn annotate(&self, pid: ProcessId, region: Region) {
        self.state.borrow_mut().proc_mut(pid).region = region;
    }

    fn set_home(&self, cell: CellId, pid: ProcessId) {
        self.state.borrow_mut().home[cell.0] = Some(pid);
    }

    fn alloc(&self, count: usize) -> CellId {
        let mut st = self.state.borrow_mut();
        let start = st.values.len();
        st.values.resize(start + count, 0);
        st.versions.resize(start + count, 0);
        st.home.resize(start + count, None);
        CellId(start)
    }

    fn poke(&self, cell: CellId, value: Word) {
        self.state.borrow_mut().values[cell.0] = value;
    }

    fn peek(&self, cell: CellId) -> Word {
        self.state.borrow().values[cell.0]
    }

    fn cell_count(&self) -> usize {
        self.state.borrow().values.len()
    }
}

/// An explicit sequence of process choices.
pub type Schedule = Vec<ProcessId>;

/// Where a [`Simulation::run`] gets its choices from.
#[derive(Clone, Debug)]
pub enum ScheduleSource {
    /// Steps the listed processes in order; each must be runnable.
    Explicit(Schedule),
    /// Picks uniformly among runnable processes with ChaCha8 seeded from
    /// the value.
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SimOutcome {
    /// Every process finished.
    Quiescent { steps: u64 },
    /// The step budget ran out first; possible livelock under this schedule.
    BudgetExhausted { steps: u64 },
    /// Some processes remain but all are blocked.
    Deadlock { steps: u64, blocked: Vec<ProcessId> },
    /// An explicit schedule ended before quiescence.
    ScheduleEnded { steps: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum StepError {
    #[error("process {0} is not registered")]
    Unknown(ProcessId),
    #[error("process {0} has finished")]
    Finished(ProcessId),
    #[error("process {0} is blocked")]
    Blocked(ProcessId),
}

struct SimProc<'a> {
    pid: ProcessId,
    program: Option<Pin<Box<dyn Future<Output = ()> + 'a>>>,
}

/// Step controller over a set of process programs.
///
/// Each [`step`](Simulation::step) resumes one process until exactly one
/// cell operation has executed (or the program finishes). Process programs
/// must only await operations of the `SimMemory` passed to the controller.
#[derive(Default)]
pub struct Simulation<'a> {
    procs: Vec<SimProc<'a>>,
    executed: Schedule,
}

const MAX_SILENT_POLLS: usize = 1 << 16;

impl<'a> Simulation<'a> {
    pub fn new() -> Self {
        Simulation { procs: Vec::new(), executed: Vec::new() }
    }

    /// Registers a program and runs it up to its first operation.
    ///
    /// # Panics
    /// If `pid` is already registered.
    pub fn spawn<F>(&mut self, mem: &SimMemory, pid: ProcessId, program: F)
    where
        F: Future<Output = ()> + 'a,
    {
        assert!(self.procs.iter().all(|p| p.pid != pid), "{pid} already spawned");
        mem.state.borrow_mut().proc_mut(pid);
        let mut proc = SimProc { pid, program: Some(Box::pin(program)) };
        let mut cx = Context::from_waker(Waker::noop());
        if proc.program.as_mut().unwrap().as_mut().poll(&mut cx).is_ready() {
            proc.program = None;
        }
        self.procs.push(proc);
    }

    /// Unfinished, unblocked processes in registration order.
    pub fn runnable(&self, mem: &SimMemory) -> Vec<ProcessId> {
        self.procs
            .iter()
            .filter(|p| p.program.is_some() && mem.runnable(p.pid))
            .map(|p| p.pid)
            .collect()
    }

    pub fn is_finished(&self, pid: ProcessId) -> bool {
        self.procs.iter().any(|p| p.pid == pid && p.program.is_none())
    }

    pub fn is_quiescent(&self) -> bool {
        self.procs.iter().all(|p| p.program.is_none())
    }

    pub fn pids(&self) -> Vec<ProcessId> {
        self.procs.iter().map(|p| p.pid).collect()
    }

    /// The choices made so far; replaying them from the same initial state
    /// reproduces the run.
    pub fn executed(&self) -> &[ProcessId] {
        &self.executed
    }

    pub fn step(&mut self, mem: &SimMemory, pid: ProcessId) -> Result<(), StepError> {
        let proc = self.procs.iter_mut().find(|p| p.pid == pid).ok_or(StepError::Unknown(pid))?;
        let program = proc.program.as_mut().ok_or(StepError::Finished(pid))?;
        if !mem.runnable(pid) {
            return Err(StepError::Blocked(pid));
        }
        mem.unblock(pid);
        let before = mem.ops_executed();
        let mut cx = Context::from_waker(Waker::noop());
        for _ in 0..MAX_SILENT_POLLS {
            if program.as_mut().poll(&mut cx).is_ready() {
                proc.program = None;
                break;
            }
            if mem.ops_executed() > before {
                break;
            }
        }
        debug_assert!(mem.ops_executed() <= before + 1);
        self.executed.push(pid);
        Ok(())
    }

    /// Runs until quiescence, deadlock, or `budget` steps.
    pub fn run(
        &mut self,
        mem: &SimMemory,
        source: ScheduleSource,
        budget: u64,
    ) -> Result<SimOutcome, StepError> {
        let mut steps = 0u64;
        match source {
            ScheduleSource::Explicit(schedule) => {
                for pid in schedule {
                    if self.is_quiescent() {
                        break;
                    }
                    if steps >= budget {
                        return Ok(SimOutcome::BudgetExhausted { steps });
                    }
                    self.step(mem, pid)?;
                    steps += 1;
                }
                if self.is_quiescent() {
                    Ok(SimOutcome::Quiescent { steps })
                } else {
                    Ok(SimOutcome::ScheduleEnded { steps })
                }
            }
            ScheduleSource::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                loop {
                    if self.is_quiescent() {
                        return Ok(SimOutcome::Quiescent { steps });
                    }
                    let runnable = self.runnable(mem);
                    if runnable.is_empty() {
                        let blocked = self
                            .procs
                            .iter()
                            .filter(|p| p.program.is_some())
                            .map(|p| p.pid)
                            .collect();
                        return Ok(SimOutcome::Deadlock { steps, blocked });
                    }
                    if steps >= budget {
                        return Ok(SimOutcome::BudgetExhausted { steps });
                    }
                    let pid = runnable[rng.random_range(0..runnable.len())];
                    self.step(mem, pid)?;
                    steps += 1;
                }
            }
        }
    }
}
