use crate::memory::ProcessId;
use crate::node::{InstanceId, SessionId};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GmeError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("session {0} is reserved or outside the configured domain")]
    InvalidSession(SessionId),
    #[error("instance {0} does not exist")]
    InvalidInstance(InstanceId),
    #[error("process {pid} already holds instance {instance}")]
    AlreadyHeld { pid: ProcessId, instance: InstanceId },
    #[error("process {pid} does not hold instance {instance}")]
    NotHeld { pid: ProcessId, instance: InstanceId },
    #[error("process {0} does not exist")]
    UnknownProcess(u32),
    #[error("context for process {0} was already handed out")]
    ContextTaken(ProcessId),
    #[error("context belongs to a different lock")]
    ForeignContext,
}
