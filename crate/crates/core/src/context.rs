use crate::memory::ProcessId;
use crate::node::{InstanceId, NodeRef};
use crate::reclaim::NodePool;
use crate::trace::TraceEvent;

/// Per-process counters, updated by the process's own entry and exit
/// sections.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metrics {
    /// Shared-cell operations issued by this process.
    pub ops: u64,
    pub entries: u64,
    pub exits: u64,
    pub entry_ops_total: u64,
    pub exit_ops_total: u64,
    pub max_entry_ops: u64,
    pub max_exit_ops: u64,
    /// Most iterations of the entry section's outer loop in one entry.
    pub max_outer_iterations: u32,
    /// Most failed adjourned-checks in a single wait.
    pub max_spin_failures: u32,
    /// Iterations of the head-reading loop, summed over all calls.
    pub read_head_iterations: u64,
    /// Most iterations of the head-reading loop in one exit section.
    pub max_exit_read_head_iterations: u32,
    /// Reads issued while waiting.
    pub spin_reads: u64,
    /// Reads issued while waiting that targeted a cell outside this
    /// process's home segment.
    pub remote_spin_reads: u64,
}

impl Metrics {
    /// Folds another process's counters into this one, keeping maxima.
    pub fn absorb(&mut self, other: &Metrics) {
        self.ops += other.ops;
        self.entries += other.entries;
        self.exits += other.exits;
        self.entry_ops_total += other.entry_ops_total;
        self.exit_ops_total += other.exit_ops_total;
        self.max_entry_ops = self.max_entry_ops.max(other.max_entry_ops);
        self.max_exit_ops = self.max_exit_ops.max(other.max_exit_ops);
        self.max_outer_iterations = self.max_outer_iterations.max(other.max_outer_iterations);
        self.max_spin_failures = self.max_spin_failures.max(other.max_spin_failures);
        self.read_head_iterations += other.read_head_iterations;
        self.max_exit_read_head_iterations =
            self.max_exit_read_head_iterations.max(other.max_exit_read_head_iterations);
        self.spin_reads += other.spin_reads;
        self.remote_spin_reads += other.remote_spin_reads;
    }
}

/// Private state of one process. Drive it from one thread at a time.
#[derive(Debug)]
pub struct ProcessContext {
    pub(crate) me: ProcessId,
    pub(crate) lock_id: u64,
    pub(crate) snapshot: NodeRef,
    pub(crate) mynode: NodeRef,
    pub(crate) held: Vec<InstanceId>,
    pub(crate) pool: Option<NodePool>,
    pub(crate) metrics: Metrics,
    pub(crate) trace: Vec<TraceEvent>,
    pub(crate) section_ops: u64,
    pub(crate) waiting: bool,
}

impl ProcessContext {
    pub(crate) fn new(me: ProcessId, lock_id: u64, pool: Option<NodePool>) -> Self {
        ProcessContext {
            me,
            lock_id,
            snapshot: NodeRef::NULL,
            mynode: NodeRef::NULL,
            held: Vec::new(),
            pool,
            metrics: Metrics::default(),
            trace: Vec::new(),
            section_ops: 0,
            waiting: false,
        }
    }

    pub fn pid(&self) -> ProcessId {
        self.me
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn reset_metrics(&mut self) {
        self.metrics = Metrics::default();
    }

    /// Instances this process currently holds.
    pub fn held(&self) -> &[InstanceId] {
        &self.held
    }

    pub fn pool(&self) -> Option<&NodePool> {
        self.pool.as_ref()
    }

    /// Events buffered by this context (per-context trace sink).
    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }
}
