//! Node records and the identifiers stored in their fields.
//!
//! A node is a run of [`NODE_FIELDS`] consecutive cells. A reference to it is
//! the index of its first cell, stored in other cells as a plain word; cell 0
//! is never part of a node, so 0 is the null reference.

use crate::memory::{CellId, Word};

/// Identifies a GME instance, `1..=m`.
pub type InstanceId = u32;

/// Session tag of a request. Requests with equal tags may share the
/// critical section.
pub type SessionId = u64;

/// Session of the initial head nodes. No request may use it.
pub const SESSION_NONE: SessionId = 0;

/// Owner value of a head node created at initialization; no process owns
/// it until a leader claims it as its predecessor.
pub const INSTANCE_OWNED: Word = u64::MAX;

pub const SESSION: usize = 0;
pub const INSTANCE: usize = 1;
pub const NUMBER: usize = 2;
pub const STATE: usize = 3;
pub const SIZE: usize = 4;
pub const PREV: usize = 5;
pub const NEXT: usize = 6;
pub const OWNER: usize = 7;
pub const CONDITION: usize = 8;
pub const NODE_FIELDS: usize = 9;

/// Reference to a node, or null.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef(pub Word);

impl NodeRef {
    pub const NULL: NodeRef = NodeRef(0);

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    pub fn field(self, offset: usize) -> CellId {
        debug_assert!(!self.is_null(), "field access through null node");
        CellId(self.0 as usize + offset)
    }

    pub fn word(self) -> Word {
        self.0
    }
}

/// Reclamation condition of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Condition {
    Unsafe = 1,
    Unknown = 2,
    Safe = 3,
}

impl Condition {
    pub fn word(self) -> Word {
        self as Word
    }

    pub fn from_word(w: Word) -> Option<Condition> {
        match w {
            1 => Some(Condition::Unsafe),
            2 => Some(Condition::Unknown),
            3 => Some(Condition::Safe),
            _ => None,
        }
    }
}

/// Successor of help index `k` among processes `1..=n`; index 0 is the
/// sentinel of a fresh node.
pub fn next_help_index(k: Word, n: usize) -> Word {
    debug_assert!(n >= 1);
    (k % n as Word) + 1
}
