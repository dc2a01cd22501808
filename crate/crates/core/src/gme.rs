//! The session list protocol: entry and exit sections, head management and
//! helping.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::context::ProcessContext;
use crate::error::GmeError;
use crate::memory::{run_ready, CellId, NativeMemory, ProcessId, Region, SharedMemory, Word};
use crate::node::{
    next_help_index, Condition, InstanceId, NodeRef, SessionId, CONDITION, INSTANCE,
    INSTANCE_OWNED, NEXT, NODE_FIELDS, NUMBER, OWNER, PREV, SESSION, SESSION_NONE, SIZE, STATE,
};
use crate::reclaim::{NodePool, ReclaimAudit};
use crate::state::{is_adjourned, is_closed, is_retired, CONFLICT, LEADERLESS};
use crate::trace::{TraceKind, TraceRecorder, TraceSink};

static NEXT_LOCK_ID: AtomicU64 = AtomicU64::new(1);

/// Construction parameters and feature switches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    /// Number of processes, `n`.
    pub processes: usize,
    /// Number of independent lock instances, `m`.
    pub instances: usize,
    /// Round-robin helping. Without it a waiting process only ever appends
    /// its own node, which is deadlock-free but not starvation-free.
    pub helping: bool,
    /// Recycle nodes through per-process pools instead of allocating one
    /// per passage.
    pub reclaim: bool,
    /// Wait on a per-process ready slot instead of the session state.
    pub dsm: bool,
    /// Record hazard-slot and retirement history and check every node
    /// acquisition against it. Requires `reclaim`.
    pub audit: bool,
    pub trace: Option<TraceSink>,
    /// Largest valid session id. Session 0 is always invalid.
    pub max_session: SessionId,
}

impl Config {
    pub fn new(processes: usize, instances: usize) -> Self {
        Config {
            processes,
            instances,
            helping: true,
            reclaim: true,
            dsm: false,
            audit: false,
            trace: None,
            max_session: SessionId::MAX,
        }
    }

    pub fn helping(mut self, on: bool) -> Self {
        self.helping = on;
        self
    }

    pub fn reclaim(mut self, on: bool) -> Self {
        self.reclaim = on;
        self
    }

    pub fn dsm(mut self, on: bool) -> Self {
        self.dsm = on;
        self
    }

    pub fn audit(mut self, on: bool) -> Self {
        self.audit = on;
        self
    }

    pub fn trace(mut self, sink: TraceSink) -> Self {
        self.trace = Some(sink);
        self
    }

    pub fn max_session(mut self, max: SessionId) -> Self {
        self.max_session = max;
        self
    }

    pub fn validate(&self) -> Result<(), GmeError> {
        if self.processes == 0 {
            return Err(GmeError::InvalidConfig("need at least one process".into()));
        }
        if self.instances == 0 {
            return Err(GmeError::InvalidConfig("need at least one instance".into()));
        }
        if self.processes >= u32::MAX as usize || self.instances >= u32::MAX as usize {
            return Err(GmeError::InvalidConfig("too many processes or instances".into()));
        }
        if self.audit && !self.reclaim {
            return Err(GmeError::InvalidConfig("audit requires reclaim".into()));
        }
        if self.max_session == SESSION_NONE {
            return Err(GmeError::InvalidConfig("session domain is empty".into()));
        }
        Ok(())
    }

    /// Nodes allocated at initialization with reclamation on.
    pub fn pooled_node_count(&self) -> usize {
        self.instances + 6 * self.processes * self.processes
    }
}

/// Where the lock's shared arrays live.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub heads: CellId,
    pub announce: CellId,
    pub hazards: CellId,
    pub ready: CellId,
    /// First cell of the first node.
    pub nodes_start: CellId,
    /// One past the last cell allocated during initialization.
    pub init_end: CellId,
}

/// A family of `m` group mutual exclusion instances shared by `n`
/// processes over one shared memory.
///
/// Each process takes its [`ProcessContext`] once via
/// [`context`](Gme::context) and passes it to every `enter`/`exit`.
pub struct Gme<M: SharedMemory> {
    mem: M,
    config: Config,
    id: u64,
    layout: Layout,
    pools: Mutex<Vec<Option<Option<NodePool>>>>,
    nodes_allocated: AtomicUsize,
    recorder: Option<TraceRecorder>,
    audit: Option<Mutex<ReclaimAudit>>,
}

impl<M: SharedMemory> std::fmt::Debug for Gme<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gme").field("config", &self.config).field("layout", &self.layout).finish()
    }
}

impl Gme<NativeMemory> {
    pub fn native(config: Config) -> Result<Self, GmeError> {
        Gme::new(config, NativeMemory::new())
    }

    /// Runs the entry section to completion on the calling thread.
    pub fn enter_blocking(
        &self,
        ctx: &mut ProcessContext,
        instance: InstanceId,
        session: SessionId,
    ) -> Result<(), GmeError> {
        run_ready(self.enter(ctx, instance, session))
    }

    pub fn exit_blocking(&self, ctx: &mut ProcessContext, instance: InstanceId) -> Result<(), GmeError> {
        run_ready(self.exit(ctx, instance))
    }
}

impl<M: SharedMemory> Gme<M> {
    /// Builds the lock's shared state inside `mem`.
    ///
    /// Cells already allocated in `mem` are left alone. After this returns,
    /// only the lock may allocate from `mem` (node audits assume nodes are
    /// contiguous).
    pub fn new(config: Config, mem: M) -> Result<Self, GmeError> {
        config.validate()?;
        let n = config.processes;
        let m = config.instances;
        if mem.cell_count() == 0 {
            // Keep cell 0 out of every node so that 0 can mean null.
            mem.alloc(1);
        }
        let heads = mem.alloc(m);
        let announce = mem.alloc(n);
        let hazards = mem.alloc(2 * n);
        let ready = mem.alloc(n);
        for i in 0..n {
            mem.set_home(ready.offset(i), ProcessId::from_index(i));
        }
        let nodes_start = CellId(mem.cell_count());
        let mut gme = Gme {
            mem,
            id: NEXT_LOCK_ID.fetch_add(1, Ordering::Relaxed),
            layout: Layout { heads, announce, hazards, ready, nodes_start, init_end: nodes_start },
            pools: Mutex::new(Vec::new()),
            nodes_allocated: AtomicUsize::new(0),
            recorder: config.trace.map(TraceRecorder::new),
            audit: config.audit.then(|| Mutex::new(ReclaimAudit::new(n))),
            config,
        };
        for i in 0..m {
            let dummy = gme.alloc_node();
            let mem = &gme.mem;
            mem.poke(dummy.field(INSTANCE), i as Word + 1);
            mem.poke(dummy.field(SESSION), SESSION_NONE);
            mem.poke(dummy.field(NUMBER), n as Word);
            mem.poke(dummy.field(STATE), LEADERLESS);
            mem.poke(dummy.field(OWNER), INSTANCE_OWNED);
            mem.poke(dummy.field(CONDITION), Condition::Unsafe.word());
            mem.poke(heads.offset(i), dummy.word());
        }
        let mut pools = Vec::with_capacity(n);
        for i in 0..n {
            let pool = gme.config.reclaim.then(|| {
                let owner = i as Word + 1;
                let make = || {
                    (0..3 * n)
                        .map(|_| {
                            let node = gme.alloc_node();
                            gme.mem.poke(node.field(OWNER), owner);
                            gme.mem.poke(node.field(CONDITION), Condition::Safe.word());
                            node
                        })
                        .collect::<Vec<_>>()
                };
                let first = make();
                let second = make();
                NodePool::new(n, [first, second])
            });
            pools.push(Some(pool));
        }
        gme.pools = Mutex::new(pools);
        gme.layout.init_end = CellId(gme.mem.cell_count());
        Ok(gme)
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn memory(&self) -> &M {
        &self.mem
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn processes(&self) -> usize {
        self.config.processes
    }

    pub fn recorder(&self) -> Option<&TraceRecorder> {
        self.recorder.as_ref()
    }

    /// The hazard/retirement audit, when enabled.
    pub fn audit(&self) -> Option<&Mutex<ReclaimAudit>> {
        self.audit.as_ref()
    }

    /// Nodes allocated so far, including initial heads and pools.
    pub fn nodes_allocated(&self) -> usize {
        self.nodes_allocated.load(Ordering::SeqCst)
    }

    /// Every node allocated so far, in allocation order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeRef> {
        let start = self.layout.nodes_start.0;
        (0..self.nodes_allocated()).map(move |i| NodeRef((start + i * NODE_FIELDS) as Word))
    }

    /// Current head of `instance`, read without instrumentation.
    pub fn head(&self, instance: InstanceId) -> NodeRef {
        NodeRef(self.mem.peek(self.head_cell(instance)))
    }

    /// Hands out the context of process `pid` (1-based). Each context can
    /// be taken once.
    pub fn context(&self, pid: u32) -> Result<ProcessContext, GmeError> {
        if pid == 0 || pid as usize > self.config.processes {
            return Err(GmeError::UnknownProcess(pid));
        }
        let me = ProcessId::new(pid);
        let pool = self.pools.lock().unwrap()[me.index()].take().ok_or(GmeError::ContextTaken(me))?;
        Ok(ProcessContext::new(me, self.id, pool))
    }

    /// All contexts not yet handed out, in process order.
    pub fn contexts(&self) -> Vec<ProcessContext> {
        (1..=self.config.processes as u32).filter_map(|p| self.context(p).ok()).collect()
    }

    pub(crate) fn head_cell(&self, instance: InstanceId) -> CellId {
        self.layout.heads.offset(instance as usize - 1)
    }

    pub(crate) fn announce_cell(&self, pid: Word) -> CellId {
        debug_assert!(pid >= 1 && pid as usize <= self.config.processes, "bad process index {pid}");
        self.layout.announce.offset(pid as usize - 1)
    }

    pub(crate) fn hazard_cell(&self, index: usize) -> CellId {
        self.layout.hazards.offset(index)
    }

    pub(crate) fn ready_cell(&self, pid: ProcessId) -> CellId {
        self.layout.ready.offset(pid.index())
    }

    fn alloc_node(&self) -> NodeRef {
        let base = self.mem.alloc(NODE_FIELDS);
        self.nodes_allocated.fetch_add(1, Ordering::SeqCst);
        NodeRef(base.0 as Word)
    }

    // Instrumented access. Every shared operation of the algorithm goes
    // through one of these four.

    fn count(&self, ctx: &mut ProcessContext, cell: CellId, is_read: bool) {
        ctx.metrics.ops += 1;
        ctx.section_ops += 1;
        if ctx.waiting && is_read {
            ctx.metrics.spin_reads += 1;
            if cell != self.ready_cell(ctx.me) {
                ctx.metrics.remote_spin_reads += 1;
            }
        }
    }

    pub(crate) async fn read(&self, ctx: &mut ProcessContext, cell: CellId) -> Word {
        self.count(ctx, cell, true);
        self.mem.read(ctx.me, cell).await
    }

    pub(crate) async fn write(&self, ctx: &mut ProcessContext, cell: CellId, value: Word) {
        self.count(ctx, cell, false);
        self.mem.write(ctx.me, cell, value).await
    }

    pub(crate) async fn cas(&self, ctx: &mut ProcessContext, cell: CellId, old: Word, new: Word) -> bool {
        self.count(ctx, cell, false);
        self.mem.cas(ctx.me, cell, old, new).await
    }

    pub(crate) async fn faa(&self, ctx: &mut ProcessContext, cell: CellId, delta: i64) -> Word {
        self.count(ctx, cell, false);
        self.mem.faa(ctx.me, cell, delta).await
    }

    pub(crate) fn emit(&self, ctx: &mut ProcessContext, instance: InstanceId, session: SessionId, kind: TraceKind) {
        if let Some(rec) = &self.recorder {
            rec.emit(&mut ctx.trace, ctx.me, instance, session, kind);
        }
    }

    pub(crate) fn begin_wait(&self, ctx: &mut ProcessContext) {
        ctx.waiting = true;
        self.mem.annotate(ctx.me, Region::Spin);
    }

    pub(crate) fn end_wait(&self, ctx: &mut ProcessContext) {
        ctx.waiting = false;
        self.mem.annotate(ctx.me, Region::Other);
    }

    fn check_instance(&self, ctx: &ProcessContext, instance: InstanceId) -> Result<(), GmeError> {
        if ctx.lock_id != self.id {
            return Err(GmeError::ForeignContext);
        }
        if instance == 0 || instance as usize > self.config.instances {
            return Err(GmeError::InvalidInstance(instance));
        }
        Ok(())
    }

    /// Snapshots the head, publishing it as hazard 1 when recycling nodes.
    /// Returns the number of loop iterations.
    pub(crate) async fn read_head(&self, ctx: &mut ProcessContext, instance: InstanceId) -> u32 {
        let head = self.head_cell(instance);
        if !self.config.reclaim {
            ctx.snapshot = NodeRef(self.read(ctx, head).await);
            ctx.metrics.read_head_iterations += 1;
            return 1;
        }
        let mut iterations = 0;
        loop {
            iterations += 1;
            let snap = NodeRef(self.read(ctx, head).await);
            ctx.snapshot = snap;
            self.declare_hazard(ctx, 0, snap).await;
            if self.read(ctx, head).await == snap.word() {
                break;
            }
        }
        ctx.metrics.read_head_iterations += iterations as u64;
        iterations
    }

    /// True iff the head still equals the snapshot.
    pub(crate) async fn test_head(&self, ctx: &mut ProcessContext, instance: InstanceId) -> bool {
        self.read(ctx, self.head_cell(instance)).await == ctx.snapshot.word()
    }

    pub(crate) async fn advance_head(&self, ctx: &mut ProcessContext, instance: InstanceId, successor: NodeRef) {
        let snap = ctx.snapshot.word();
        self.cas(ctx, self.head_cell(instance), snap, successor.word()).await;
    }

    /// Initializes a node for this request and announces it.
    pub(crate) async fn get_new_node(&self, ctx: &mut ProcessContext, instance: InstanceId, session: SessionId) {
        let node = if self.config.reclaim {
            self.acquire_node(ctx).await
        } else {
            self.alloc_node()
        };
        let me = ctx.me.get() as Word;
        self.write(ctx, node.field(OWNER), me).await;
        self.write(ctx, node.field(INSTANCE), instance as Word).await;
        self.write(ctx, node.field(SESSION), session).await;
        self.write(ctx, node.field(SIZE), 1).await;
        self.write(ctx, node.field(NEXT), 0).await;
        self.write(ctx, node.field(PREV), 0).await;
        self.write(ctx, node.field(STATE), 0).await;
        self.write(ctx, node.field(NUMBER), 0).await;
        self.write(ctx, self.announce_cell(me), node.word()).await;
        ctx.mynode = node;
        self.emit(ctx, instance, session, TraceKind::Announce);
    }

    /// Chooses the node to link after the snapshot: the announced node of
    /// the process whose turn it is, if that request is still pending on
    /// this instance, else our own.
    pub(crate) async fn select_next_node(&self, ctx: &mut ProcessContext, instance: InstanceId) -> NodeRef {
        let mine = ctx.mynode;
        if !self.config.helping {
            return mine;
        }
        let snap = ctx.snapshot;
        let number = self.read(ctx, snap.field(NUMBER)).await;
        debug_assert!(number >= 1, "head node without help index");
        let slot = self.announce_cell(number);
        let helpee = NodeRef(self.read(ctx, slot).await);
        if self.config.reclaim {
            self.declare_hazard(ctx, 1, helpee).await;
            if self.read(ctx, slot).await != helpee.word() {
                return mine;
            }
        }
        if helpee.is_null() {
            return mine;
        }
        if self.read(ctx, helpee.field(INSTANCE)).await != instance as Word {
            return mine;
        }
        if is_retired(self.read(ctx, helpee.field(STATE)).await) {
            return mine;
        }
        helpee
    }

    /// Links a successor after the adjourned head and advances the head.
    pub(crate) async fn append_next_node(&self, ctx: &mut ProcessContext, instance: InstanceId) {
        let current = ctx.snapshot;
        let candidate = self.select_next_node(ctx, instance).await;
        if self.cas(ctx, current.field(NEXT), 0, candidate.word()).await {
            let session = self.mem.peek(candidate.field(SESSION));
            self.emit(ctx, instance, session, TraceKind::SessionEstablished);
        }
        let successor = NodeRef(self.read(ctx, current.field(NEXT)).await);
        if self.config.reclaim {
            self.declare_hazard(ctx, 1, successor).await;
        }
        if !self.test_head(ctx, instance).await {
            return;
        }
        self.write(ctx, successor.field(PREV), current.word()).await;
        let number = self.read(ctx, current.field(NUMBER)).await;
        self.write(ctx, successor.field(NUMBER), next_help_index(number, self.config.processes)).await;
        self.advance_head(ctx, instance, successor).await;
        if self.config.dsm {
            let owner = self.read(ctx, successor.field(OWNER)).await;
            if owner >= 1 && owner as usize <= self.config.processes {
                self.notify(ctx, owner, current).await;
            }
        }
    }

    /// Revokes this process's announcement and retires `node`.
    pub(crate) async fn retire_node(&self, ctx: &mut ProcessContext, instance: InstanceId, node: NodeRef) {
        let me = ctx.me.get() as Word;
        self.write(ctx, self.announce_cell(me), 0).await;
        ctx.mynode = NodeRef::NULL;
        if self.config.reclaim {
            self.write(ctx, node.field(OWNER), me).await;
            ctx.pool.as_mut().expect("reclaiming context without pool").replace_at_marker(node);
            if let Some(audit) = &self.audit {
                audit.lock().unwrap().record_retire(node);
            }
        }
        let session = self.mem.peek(node.field(SESSION));
        self.emit(ctx, instance, session, TraceKind::Retire);
        self.mark_as_retired(ctx, node).await;
    }

    async fn wait_adjourned(&self, ctx: &mut ProcessContext, current: NodeRef) -> u32 {
        self.begin_wait(ctx);
        let mut failures = 0;
        while !is_adjourned(self.read(ctx, current.field(STATE)).await) {
            self.mem.pause(ctx.me, failures).await;
            failures += 1;
        }
        self.end_wait(ctx);
        failures
    }

    /// Entry section. Returns once the caller may run its critical section
    /// for `session` on `instance`.
    pub async fn enter(
        &self,
        ctx: &mut ProcessContext,
        instance: InstanceId,
        session: SessionId,
    ) -> Result<(), GmeError> {
        self.check_instance(ctx, instance)?;
        if session == SESSION_NONE || session > self.config.max_session {
            return Err(GmeError::InvalidSession(session));
        }
        if ctx.held.contains(&instance) {
            return Err(GmeError::AlreadyHeld { pid: ctx.me, instance });
        }
        ctx.held.push(instance);
        ctx.section_ops = 0;
        if self.config.reclaim {
            self.start_passage(ctx).await;
        }
        self.get_new_node(ctx, instance, session).await;
        let mynode = ctx.mynode;
        let mut outer = 0u32;
        loop {
            outer += 1;
            self.read_head(ctx, instance).await;
            let current = ctx.snapshot;
            if current == mynode {
                let prev = NodeRef(self.read(ctx, mynode.field(PREV)).await);
                if self.config.dsm {
                    self.notify_all(ctx, prev).await;
                }
                self.retire_node(ctx, instance, prev).await;
                break;
            }
            if self.read(ctx, current.field(SESSION)).await == session {
                if !is_closed(self.read(ctx, current.field(STATE)).await) {
                    self.faa(ctx, current.field(SIZE), 1).await;
                    if !is_closed(self.read(ctx, current.field(STATE)).await) {
                        self.retire_node(ctx, instance, mynode).await;
                        break;
                    }
                    let before = self.faa(ctx, current.field(SIZE), -1).await;
                    assert!(before as i64 >= 1, "session size went negative");
                    self.set_vacant_flag(ctx, current).await;
                }
            } else {
                self.set_guard_flag(ctx, current, CONFLICT).await;
                self.set_vacant_flag(ctx, current).await;
            }
            let failures = if self.config.dsm {
                self.wait_adjourned_dsm(ctx, current).await
            } else {
                self.wait_adjourned(ctx, current).await
            };
            ctx.metrics.max_spin_failures = ctx.metrics.max_spin_failures.max(failures);
            if self.test_head(ctx, instance).await {
                self.append_next_node(ctx, instance).await;
            }
        }
        if self.config.reclaim {
            self.clear_hazards(ctx).await;
        }
        let m = &mut ctx.metrics;
        m.entries += 1;
        m.entry_ops_total += ctx.section_ops;
        m.max_entry_ops = m.max_entry_ops.max(ctx.section_ops);
        m.max_outer_iterations = m.max_outer_iterations.max(outer);
        self.emit(ctx, instance, session, TraceKind::EnterReturn);
        Ok(())
    }

    /// Exit section for a passage entered with [`enter`](Gme::enter).
    pub async fn exit(&self, ctx: &mut ProcessContext, instance: InstanceId) -> Result<(), GmeError> {
        self.check_instance(ctx, instance)?;
        let Some(pos) = ctx.held.iter().position(|&i| i == instance) else {
            return Err(GmeError::NotHeld { pid: ctx.me, instance });
        };
        ctx.held.swap_remove(pos);
        if self.recorder.is_some() {
            let session = self.mem.peek(self.head(instance).field(SESSION));
            self.emit(ctx, instance, session, TraceKind::ExitCall);
        }
        ctx.section_ops = 0;
        let iterations = self.read_head(ctx, instance).await;
        let current = ctx.snapshot;
        if self.read(ctx, current.field(OWNER)).await == ctx.me.get() as Word {
            self.set_guard_flag(ctx, current, LEADERLESS).await;
        }
        let before = self.faa(ctx, current.field(SIZE), -1).await;
        assert!(before as i64 >= 1, "session size went negative");
        if self.set_vacant_flag(ctx, current).await && self.config.dsm {
            self.notify_all(ctx, current).await;
        }
        if self.config.reclaim {
            self.clear_hazards(ctx).await;
        }
        let m = &mut ctx.metrics;
        m.exits += 1;
        m.exit_ops_total += ctx.section_ops;
        m.max_exit_ops = m.max_exit_ops.max(ctx.section_ops);
        m.max_exit_read_head_iterations = m.max_exit_read_head_iterations.max(iterations);
        Ok(())
    }
}
