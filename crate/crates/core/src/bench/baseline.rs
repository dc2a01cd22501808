use std::sync::atomic::{AtomicU64, Ordering::SeqCst};

use crate::memory::ProcessId;
use crate::node::SessionId;
use crate::trace::{TraceEvent, TraceKind, TraceRecorder};

use super::BenchLock;

/// FIFO ticket lock that serializes every critical section, whatever the
/// session. Waiters back off like the group lock's native waits.
#[derive(Debug)]
pub struct TicketLock {
    next: AtomicU64,
    serving: AtomicU64,
    recorder: Option<TraceRecorder>,
}

/// Per-thread state of a [`TicketLock`] user.
#[derive(Debug)]
pub struct TicketContext {
    pid: ProcessId,
    session: SessionId,
    trace: Vec<TraceEvent>,
}

impl TicketLock {
    pub fn new(recorder: Option<TraceRecorder>) -> Self {
        TicketLock { next: AtomicU64::new(0), serving: AtomicU64::new(0), recorder }
    }

    pub fn context(&self, index: usize) -> TicketContext {
        TicketContext { pid: ProcessId::from_index(index), session: 0, trace: Vec::new() }
    }

    pub fn lock(&self, ctx: &mut TicketContext, session: SessionId) {
        let ticket = self.next.fetch_add(1, SeqCst);
        let mut attempt = 0u32;
        while self.serving.load(SeqCst) != ticket {
            if attempt < 4 {
                std::hint::spin_loop();
            } else {
                std::thread::yield_now();
            }
            attempt += 1;
        }
        ctx.session = session;
        if let Some(rec) = &self.recorder {
            rec.emit(&mut ctx.trace, ctx.pid, 1, session, TraceKind::EnterReturn);
        }
    }

    pub fn unlock(&self, ctx: &mut TicketContext) {
        if let Some(rec) = &self.recorder {
            rec.emit(&mut ctx.trace, ctx.pid, 1, ctx.session, TraceKind::ExitCall);
        }
        self.serving.fetch_add(1, SeqCst);
    }

    pub fn take_trace(ctx: &mut TicketContext) -> Vec<TraceEvent> {
        std::mem::take(&mut ctx.trace)
    }
}

impl BenchLock for TicketLock {
    type Ctx = TicketContext;

    fn enter(&self, ctx: &mut TicketContext, session: SessionId) {
        self.lock(ctx, session);
    }

    fn exit(&self, ctx: &mut TicketContext) {
        self.unlock(ctx);
    }

    fn events(ctx: &mut TicketContext) -> Vec<TraceEvent> {
        Self::take_trace(ctx)
    }
}
