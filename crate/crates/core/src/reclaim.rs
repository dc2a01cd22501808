//! Node recycling: two pools of `3n` nodes per process, two hazard slots per
//! process, and an incremental scan that finds reusable nodes.
//!
//! A process's passages are grouped into epochs of exactly `n`. During an
//! epoch the active pool serves requests while the passive pool is scanned a
//! few micro-steps per passage: mark every passive node UNKNOWN, demote
//! hazard-referenced ones that this process owns to UNSAFE, then move the
//! remaining UNKNOWN nodes to the tail and mark them SAFE. At the next epoch
//! the pools swap.

use std::collections::HashMap;

use crate::context::ProcessContext;
use crate::gme::Gme;
use crate::memory::{SharedMemory, Word};
use crate::node::{Condition, NodeRef, CONDITION, OWNER};

/// Cleanup micro-steps run at the start of every passage. One epoch needs
/// `8n` micro-steps over `n` passages.
pub const CLEANUP_QUANTUM: usize = 8;

/// Private pool state of one process.
#[derive(Clone, Debug)]
pub struct NodePool {
    n: usize,
    pools: [Vec<NodeRef>; 2],
    which: usize,
    marker: usize,
    passages: usize,
    cursor: usize,
    tail: usize,
    epochs: u64,
}

impl NodePool {
    pub(crate) fn new(n: usize, pools: [Vec<NodeRef>; 2]) -> Self {
        debug_assert!(pools.iter().all(|p| p.len() == 3 * n));
        NodePool { n, pools, which: 0, marker: 0, passages: 0, cursor: 0, tail: 3 * n, epochs: 0 }
    }

    pub fn active(&self) -> &[NodeRef] {
        &self.pools[self.which]
    }

    pub fn passive(&self) -> &[NodeRef] {
        &self.pools[1 - self.which]
    }

    /// Index of the next node to hand out from the active pool.
    pub fn marker(&self) -> usize {
        self.marker
    }

    /// Completed epochs.
    pub fn epochs(&self) -> u64 {
        self.epochs
    }

    /// Both pools' nodes.
    pub fn nodes(&self) -> impl Iterator<Item = NodeRef> + '_ {
        self.pools.iter().flatten().copied()
    }

    fn steps_per_epoch(&self) -> usize {
        8 * self.n
    }

    pub(crate) fn replace_at_marker(&mut self, node: NodeRef) {
        self.pools[self.which][self.marker] = node;
        self.marker += 1;
    }

    fn switch_epoch(&mut self) {
        assert_eq!(self.cursor, self.steps_per_epoch(), "cleanup unfinished at epoch end");
        assert!(
            3 * self.n - self.tail >= self.n,
            "only {} safe nodes for the next epoch",
            3 * self.n - self.tail
        );
        self.marker = self.tail;
        self.which = 1 - self.which;
        self.passages = 0;
        self.cursor = 0;
        self.tail = 3 * self.n;
        self.epochs += 1;
    }
}

enum Micro {
    Mark(NodeRef),
    Scan(usize),
    Partition(usize, NodeRef),
    Done,
}

impl<M: SharedMemory> Gme<M> {
    /// Epoch bookkeeping and one quantum of cleanup, run at the start of
    /// each entry section.
    pub(crate) async fn start_passage(&self, ctx: &mut ProcessContext) {
        let pool = ctx.pool.as_mut().expect("reclaiming context without pool");
        if pool.passages == pool.n {
            pool.switch_epoch();
        }
        pool.passages += 1;
        for _ in 0..CLEANUP_QUANTUM {
            if !self.cleanup_step(ctx).await {
                break;
            }
        }
    }

    fn next_micro(pool: &NodePool) -> Micro {
        let n = pool.n;
        let c = pool.cursor;
        let passive = 1 - pool.which;
        if c < 3 * n {
            Micro::Mark(pool.pools[passive][c])
        } else if c < 5 * n {
            Micro::Scan(c - 3 * n)
        } else if c < 8 * n {
            let i = 8 * n - 1 - c;
            Micro::Partition(i, pool.pools[passive][i])
        } else {
            Micro::Done
        }
    }

    /// Runs one cleanup micro-step; false once the epoch's cleanup is done.
    async fn cleanup_step(&self, ctx: &mut ProcessContext) -> bool {
        let pool = ctx.pool.as_ref().expect("reclaiming context without pool");
        let passive = 1 - pool.which;
        let micro = Self::next_micro(pool);
        let unknown = Condition::Unknown.word();
        match micro {
            Micro::Done => return false,
            Micro::Mark(node) => {
                self.write(ctx, node.field(CONDITION), unknown).await;
            }
            Micro::Scan(slot) => {
                let node = NodeRef(self.read(ctx, self.hazard_cell(slot)).await);
                if !node.is_null()
                    && self.read(ctx, node.field(CONDITION)).await == unknown
                    && self.read(ctx, node.field(OWNER)).await == ctx.me.get() as Word
                    && self.read(ctx, node.field(CONDITION)).await == unknown
                {
                    self.write(ctx, node.field(CONDITION), Condition::Unsafe.word()).await;
                }
            }
            Micro::Partition(i, node) => {
                if self.read(ctx, node.field(CONDITION)).await == unknown {
                    let pool = ctx.pool.as_mut().unwrap();
                    pool.tail -= 1;
                    let tail = pool.tail;
                    pool.pools[passive].swap(i, tail);
                    self.write(ctx, node.field(CONDITION), Condition::Safe.word()).await;
                }
            }
        }
        ctx.pool.as_mut().unwrap().cursor += 1;
        true
    }

    /// Takes the node at the marker of the active pool and marks it UNSAFE.
    ///
    /// # Panics
    /// If the node is not SAFE, which means reclamation accounting broke.
    pub(crate) async fn acquire_node(&self, ctx: &mut ProcessContext) -> NodeRef {
        let pool = ctx.pool.as_ref().expect("reclaiming context without pool");
        let node = pool.pools[pool.which][pool.marker];
        let condition = Condition::from_word(self.memory().peek(node.field(CONDITION)));
        assert_eq!(condition, Some(Condition::Safe), "acquired node {node:?} is not safe");
        if let Some(audit) = self.audit() {
            let mut audit = audit.lock().unwrap();
            audit.check_acquire(ctx.me.get(), node, |slot| self.memory().peek(self.hazard_cell(slot)));
        }
        self.write(ctx, node.field(CONDITION), Condition::Unsafe.word()).await;
        node
    }

    /// Publishes `node` in hazard slot `slot` (0 or 1) of this process.
    pub(crate) async fn declare_hazard(&self, ctx: &mut ProcessContext, slot: usize, node: NodeRef) {
        let index = 2 * ctx.me.index() + slot;
        self.write(ctx, self.hazard_cell(index), node.word()).await;
        if let Some(audit) = self.audit() {
            audit.lock().unwrap().record_hazard(index, node);
        }
    }

    pub(crate) async fn clear_hazards(&self, ctx: &mut ProcessContext) {
        self.declare_hazard(ctx, 0, NodeRef::NULL).await;
        self.declare_hazard(ctx, 1, NodeRef::NULL).await;
    }

    /// Checks that the current heads and every context's pools account for
    /// each node exactly once. Call at quiescence with all
    /// contexts.
    pub fn audit_pools<'a, I>(&self, contexts: I) -> Result<(), String>
    where
        I: IntoIterator<Item = &'a ProcessContext>,
    {
        let mut seen: HashMap<NodeRef, &'static str> = HashMap::new();
        let mut add = |node: NodeRef, place: &'static str| match seen.insert(node, place) {
            Some(prev) => Err(format!("node {node:?} found in {prev} and {place}")),
            None => Ok(()),
        };
        for i in 1..=self.config().instances as u32 {
            add(self.head(i), "a head")?;
        }
        for ctx in contexts {
            let pool = ctx.pool().ok_or("context has no pool")?;
            for node in pool.nodes() {
                add(node, "a pool")?;
            }
        }
        let total = self.nodes_allocated();
        if seen.len() != total {
            return Err(format!("{} of {total} nodes accounted for", seen.len()));
        }
        Ok(())
    }
}

/// A node acquired while some hazard slot had held it continuously since
/// before its last retirement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditViolation {
    pub acquirer: u32,
    pub node: NodeRef,
    pub slot: usize,
    pub declared_at: u64,
    pub retired_at: u64,
}

/// History of hazard declarations and retirements, checked on every node
/// acquisition.
///
/// Timestamps come from a logical clock advanced under the audit lock. A
/// hazard is recorded after its slot write and a retirement before the
/// node's RETIRED store, so a flagged declaration really preceded the
/// retirement. The acquire check also requires the slot to still hold the
/// node, which filters out records that lag a newer write.
#[derive(Debug, Default)]
pub struct ReclaimAudit {
    clock: u64,
    slots: Vec<Option<(NodeRef, u64)>>,
    retired_at: HashMap<NodeRef, u64>,
    violations: Vec<AuditViolation>,
    acquisitions: u64,
    retirements: u64,
}

impl ReclaimAudit {
    pub fn new(n: usize) -> Self {
        ReclaimAudit { slots: vec![None; 2 * n], ..Default::default() }
    }

    pub(crate) fn record_hazard(&mut self, slot: usize, node: NodeRef) {
        self.clock += 1;
        self.slots[slot] = (!node.is_null()).then_some((node, self.clock));
    }

    pub(crate) fn record_retire(&mut self, node: NodeRef) {
        self.clock += 1;
        self.retirements += 1;
        self.retired_at.insert(node, self.clock);
    }

    pub(crate) fn check_acquire(&mut self, acquirer: u32, node: NodeRef, slot_value: impl Fn(usize) -> Word) {
        self.clock += 1;
        self.acquisitions += 1;
        if let Some(retired_at) = self.retired_at.remove(&node) {
            for (slot, held) in self.slots.iter().enumerate() {
                if let Some((held_node, declared_at)) = *held {
                    if held_node == node && declared_at < retired_at && slot_value(slot) == node.word() {
                        self.violations.push(AuditViolation { acquirer, node, slot, declared_at, retired_at });
                    }
                }
            }
        }
    }

    pub fn violations(&self) -> &[AuditViolation] {
        &self.violations
    }

    pub fn acquisitions(&self) -> u64 {
        self.acquisitions
    }

    pub fn retirements(&self) -> u64 {
        self.retirements
    }
}
