//! Timestamped passage events.

use std::sync::atomic::{AtomicU64, Ordering::SeqCst};
use std::sync::Mutex;

use crate::memory::ProcessId;
use crate::node::{InstanceId, SessionId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TraceKind {
    /// Request published; emitted right after the announce write.
    Announce,
    /// A node was linked after the head; its session is now established.
    SessionEstablished,
    /// Emitted after the last operation of the entry section.
    EnterReturn,
    /// Emitted before the first operation of the exit section.
    ExitCall,
    Retire,
}

impl TraceKind {
    pub const ALL: [TraceKind; 5] = [
        TraceKind::Announce,
        TraceKind::SessionEstablished,
        TraceKind::EnterReturn,
        TraceKind::ExitCall,
        TraceKind::Retire,
    ];

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub seq: u64,
    pub pid: ProcessId,
    pub instance: InstanceId,
    pub session: SessionId,
    pub kind: TraceKind,
}

/// Where recorded events go.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceSink {
    /// Each context buffers its own events; merge with [`merge`].
    PerContext,
    /// One locked buffer shared by all processes.
    Shared,
}

/// Issues global sequence numbers from one counter and stores events.
#[derive(Debug)]
pub struct TraceRecorder {
    ticket: AtomicU64,
    mask: u8,
    shared: Option<Mutex<Vec<TraceEvent>>>,
}

impl TraceRecorder {
    pub fn new(sink: TraceSink) -> Self {
        TraceRecorder {
            ticket: AtomicU64::new(0),
            mask: TraceKind::ALL.iter().fold(0, |m, k| m | k.bit()),
            shared: (sink == TraceSink::Shared).then(|| Mutex::new(Vec::new())),
        }
    }

    /// Restricts recording to `kinds`.
    pub fn with_kinds(mut self, kinds: &[TraceKind]) -> Self {
        self.mask = kinds.iter().fold(0, |m, k| m | k.bit());
        self
    }

    pub fn records(&self, kind: TraceKind) -> bool {
        self.mask & kind.bit() != 0
    }

    pub(crate) fn emit(
        &self,
        local: &mut Vec<TraceEvent>,
        pid: ProcessId,
        instance: InstanceId,
        session: SessionId,
        kind: TraceKind,
    ) {
        if !self.records(kind) {
            return;
        }
        let seq = self.ticket.fetch_add(1, SeqCst);
        let event = TraceEvent { seq, pid, instance, session, kind };
        match &self.shared {
            Some(buf) => buf.lock().unwrap().push(event),
            None => local.push(event),
        }
    }

    /// Drains the shared buffer, sorted by sequence number.
    pub fn take_shared(&self) -> Vec<TraceEvent> {
        let mut out = self
            .shared
            .as_ref()
            .map(|b| std::mem::take(&mut *b.lock().unwrap()))
            .unwrap_or_default();
        out.sort_by_key(|e| e.seq);
        out
    }

    /// Number of events issued so far.
    pub fn issued(&self) -> u64 {
        self.ticket.load(SeqCst)
    }
}

/// Combines per-process buffers into one trace ordered by sequence number.
pub fn merge<I>(buffers: I) -> Vec<TraceEvent>
where
    I: IntoIterator<Item = Vec<TraceEvent>>,
{
    let mut out: Vec<TraceEvent> = buffers.into_iter().flatten().collect();
    out.sort_by_key(|e| e.seq);
    out
}
