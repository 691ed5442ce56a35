//! Layered key management for the QKD network emulation.
//!
//! Freshly distilled link keys are pushed into per-link stores mirrored at
//! both endpoints; a key-delivery session interface (open / get_key /
//! close over length-prefixed JSON frames) hands chunks to consumers such
//! as the quantum-secure gateways; the global layer composes end-to-end
//! keys across trusted nodes by XOR relay and combines keys from multiple
//! sources through an HMAC-based KDF. All key material is tracked in a
//! global single-use ledger and persisted through an append-only journal.

// Validation guards use `!(x >= 0.0)` so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bus;
mod combine;
mod error;
mod journal;
mod network;
mod service;
mod store;
mod types;
pub mod wire;

pub use bus::{AuthBus, BusMessage};
pub use combine::{combine_keys, ExternalKeySource};
pub use error::KmsError;
pub use journal::{Journal, JournalEvent};
pub use network::{
    monobit_counts, monobit_within_4_sigma, KmsConfig, KmsNetwork, LedgerStats, RelayOutcome,
    Session, DEFAULT_STORE_QUOTA,
};
pub use service::{serve_connection, spawn_tcp_server, GetKeyOutcome, KmsClient, SharedNetwork};
pub use store::{KeyStore, StoreCounts, UsageLedger, UsageTarget};
pub use types::{
    link_scope, pair_scope, zeroize, CombineRecipe, KeyBlock, KeyId, KeySource, KeyStatus, Ksid,
    LinkId, NodeId, Qos, RelayPath,
};
