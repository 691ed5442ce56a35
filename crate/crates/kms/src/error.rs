use thiserror::Error;

use crate::types::{Ksid, LinkId, NodeId};

#[derive(Debug, Error)]
pub enum KmsError {
    #[error("key id already stored on {scope} with different bytes")]
    IdConflict { scope: String },
    #[error("store quota exceeded on {scope}")]
    StoreFull { scope: String },
    #[error("no key route between {from} and {to}")]
    NoRoute { from: NodeId, to: NodeId },
    #[error("insufficient key material on {scope} ({available} bytes available, {needed} needed)")]
    InsufficientKeyMaterial {
        scope: String,
        available: u64,
        needed: u64,
        /// Suggested retry delay, seconds.
        retry_after: f64,
    },
    #[error("unknown session {0}")]
    UnknownSession(Ksid),
    #[error("session {0} is closed")]
    ClosedSession(Ksid),
    #[error("node {node} is not an endpoint of session {ksid}")]
    NotAnEndpoint { node: NodeId, ksid: Ksid },
    #[error("index {index} out of order (next deliverable index is {next})")]
    OutOfOrderIndex { index: u64, next: u64 },
    #[error("relay starvation on hop {0}: required bytes not available, nothing consumed")]
    RelayStarvation(LinkId),
    #[error("relay path invalid: {0}")]
    InvalidPath(&'static str),
    #[error("combine inputs must have equal length >= the output length")]
    CombineLengthMismatch,
    #[error("combine recipe invalid: {0}")]
    InvalidRecipe(String),
    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: String },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("single-use violation: key block delivered twice")]
    DoubleDelivery,
    #[error("authenticated channel rejected a message (bad MAC)")]
    MacFailure,
    #[error("journal I/O: {0}")]
    Journal(#[from] std::io::Error),
    #[error("journal corrupt: {0}")]
    JournalCorrupt(String),
    #[error("invalid qos: {0}")]
    InvalidQos(&'static str),
    #[error("wire protocol: {0}")]
    Wire(String),
}
