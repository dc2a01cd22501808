//! Word-sized shared cells behind one interface, with two backends.
//!
//! Every shared access in the lock goes through [`SharedMemory`]. The
//! operations return futures so that one algorithm body can be driven two
//! ways:
//!
//! * [`NativeMemory`] performs the operation on a real `AtomicU64` when it is
//!   called and hands back an already-completed future. Callers poll it once
//!   with [`run_ready`].
//! * [`SimMemory`] suspends at every operation. A [`Simulation`] resumes one
//!   process at a time, so each scheduler step executes exactly one cell
//!   operation, in an order chosen by an explicit schedule or a seeded RNG.

use std::fmt;
use std::future::Future;
use std::pin::pin;
use std::task::{Context, Poll, Waker};

mod native;
mod sim;

pub use native::NativeMemory;
pub use sim::{
    Access, AccessRecord, OpKind, OpRecord, Schedule, ScheduleSource, SimMemory, SimOutcome, Simulation,
    StepError,
};

/// The machine word stored in a cell.
pub type Word = u64;

/// Index of a cell in a backend's cell table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(pub usize);

impl CellId {
    pub fn offset(self, by: usize) -> CellId {
        CellId(self.0 + by)
    }
}

/// A process identifier in `1..=n`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProcessId(u32);

impl ProcessId {
    /// # Panics
    /// If `id` is zero.
    pub fn new(id: u32) -> Self {
        assert!(id >= 1, "process ids are 1-based");
        ProcessId(id)
    }

    pub fn from_index(index: usize) -> Self {
        ProcessId::new(index as u32 + 1)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Zero-based position, for indexing per-process arrays.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Debug for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// Code region a process is currently executing, used to classify accesses
/// in instrumented runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Region {
    #[default]
    Other,
    /// Inside a busy-wait loop.
    Spin,
}

/// Atomic word-sized shared memory.
///
/// All operations are sequentially consistent. Cells are created zeroed by
/// [`alloc`](SharedMemory::alloc) and never freed while the backend lives.
pub trait SharedMemory {
    fn read(&self, pid: ProcessId, cell: CellId) -> impl Future<Output = Word>;

    fn write(&self, pid: ProcessId, cell: CellId, value: Word) -> impl Future<Output = ()>;

    /// Compare-and-swap; true iff the cell held `expected` and now holds `new`.
    fn cas(
        &self,
        pid: ProcessId,
        cell: CellId,
        expected: Word,
        new: Word,
    ) -> impl Future<Output = bool>;

    /// Fetch-and-add with wrapping two's complement arithmetic; returns the
    /// prior value.
    fn faa(&self, pid: ProcessId, cell: CellId, delta: i64) -> impl Future<Output = Word>;

    /// Called after each failed check of a busy-wait loop. `attempt` counts
    /// failed checks so far in the current wait.
    fn pause(&self, pid: ProcessId, attempt: u32) -> impl Future<Output = ()>;

    /// Marks the code region `pid` is in. Only instrumented backends care.
    fn annotate(&self, _pid: ProcessId, _region: Region) {}

    /// Records that `cell` lives in `pid`'s memory segment (DSM model).
    fn set_home(&self, _cell: CellId, _pid: ProcessId) {}

    /// Allocates `count` contiguous zeroed cells and returns the first.
    fn alloc(&self, count: usize) -> CellId;

    /// Uninstrumented store for initialization and harness bookkeeping.
    fn poke(&self, cell: CellId, value: Word);

    /// Uninstrumented load for assertions and harness bookkeeping.
    fn peek(&self, cell: CellId) -> Word;

    /// Number of cells allocated so far.
    fn cell_count(&self) -> usize;
}

/// Polls a future that must already be complete.
///
/// This is how native callers drive the lock: with [`NativeMemory`] every
/// await point is ready, so one poll runs the whole operation.
///
/// # Panics
/// If the future is pending, which means it was built over a backend that
/// needs a scheduler.
pub fn run_ready<F: Future>(future: F) -> F::Output {
    let mut future = pin!(future);
    let mut cx = Context::from_waker(Waker::noop());
    match future.as_mut().poll(&mut cx) {
        Poll::Ready(value) => value,
        Poll::Pending => panic!("run_ready: future suspended; drive it with a Simulation"),
    }
}
