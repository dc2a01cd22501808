//! The packed session-state word and the operations on it.

use crate::context::ProcessContext;
use crate::gme::Gme;
use crate::memory::{SharedMemory, Word};
use crate::node::{NodeRef, SIZE, STATE};

pub const LEADERLESS: Word = 1 << 0;
pub const CONFLICT: Word = 1 << 1;
pub const VACANT: Word = 1 << 2;
pub const RETIRED: Word = 1 << 3;

pub const GUARDS: Word = LEADERLESS | CONFLICT;
pub const ALL_FLAGS: Word = LEADERLESS | CONFLICT | VACANT | RETIRED;

/// Both guard flags set: no new process may join.
pub fn is_closed(state: Word) -> bool {
    state & GUARDS == GUARDS
}

/// Closed and empty: the next session may be established.
pub fn is_adjourned(state: Word) -> bool {
    state & VACANT != 0
}

pub fn is_retired(state: Word) -> bool {
    state & RETIRED != 0
}

/// VACANT implies both guards and RETIRED implies everything else.
pub fn is_well_formed(state: Word) -> bool {
    if state & !ALL_FLAGS != 0 {
        return false;
    }
    if is_adjourned(state) && !is_closed(state) {
        return false;
    }
    !is_retired(state) || state == ALL_FLAGS
}

impl<M: SharedMemory> Gme<M> {
    /// Sets `flag` (one of the guards) in `node`'s state.
    pub(crate) async fn set_guard_flag(&self, ctx: &mut ProcessContext, node: NodeRef, flag: Word) {
        debug_assert!(flag == LEADERLESS || flag == CONFLICT);
        loop {
            let state = self.read(ctx, node.field(STATE)).await;
            if state & flag != 0 {
                return;
            }
            if self.cas(ctx, node.field(STATE), state, state | flag).await {
                return;
            }
        }
    }

    /// Sets VACANT if the session is closed and empty. Returns true iff this
    /// call set it.
    pub(crate) async fn set_vacant_flag(&self, ctx: &mut ProcessContext, node: NodeRef) -> bool {
        let state = self.read(ctx, node.field(STATE)).await;
        if !is_closed(state) {
            return false;
        }
        if self.read(ctx, node.field(SIZE)).await != 0 {
            return false;
        }
        self.cas(ctx, node.field(STATE), state, state | VACANT).await
    }

    pub(crate) async fn mark_as_retired(&self, ctx: &mut ProcessContext, node: NodeRef) {
        self.write(ctx, node.field(STATE), ALL_FLAGS).await;
    }
}
