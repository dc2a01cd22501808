//! Group mutual exclusion over word-sized shared cells.
//!
//! A [`Gme`] holds `m` lock instances shared by `n` processes. A process
//! calls [`Gme::enter`] with a session tag, runs its critical section, then
//! calls [`Gme::exit`]. Processes requesting the same session on an instance
//! may be inside together; different sessions are serialized.
//!
//! Each instance keeps a list of session nodes. The head node hosts the
//! current session; a request either joins it (bumping the node's size
//! counter) or waits until it adjourns and links the next node. Waiting
//! processes link each other's announced nodes in round-robin order, so no
//! request starves, and nodes are recycled through small per-process pools
//! guarded by hazard slots.
//!
//! The algorithm is written once against [`memory::SharedMemory`]. With
//! [`memory::NativeMemory`] it runs on real atomics; with
//! [`memory::SimMemory`] every shared access becomes a scheduling point of a
//! deterministic [`memory::Simulation`], which the [`verify`] module uses to
//! explore interleavings.
//!
//! ```
//! use fsgme::{Config, Gme};
//!
//! let lock = Gme::native(Config::new(2, 1)).unwrap();
//! let mut ctx = lock.context(1).unwrap();
//! lock.enter_blocking(&mut ctx, 1, 7).unwrap();
//! // critical section for session 7
//! lock.exit_blocking(&mut ctx, 1).unwrap();
//! ```

pub mod bench;
pub mod context;
mod dsm;
pub mod error;
pub mod gme;
pub mod memory;
pub mod node;
pub mod reclaim;
pub mod state;
pub mod trace;
pub mod verify;

pub use context::{Metrics, ProcessContext};
pub use error::GmeError;
pub use gme::{Config, Gme, Layout};
pub use node::{next_help_index, InstanceId, NodeRef, SessionId, SESSION_NONE};
pub use trace::{TraceEvent, TraceKind, TraceSink};
