//! Quantum-secure gateway endpoints.
//!
//! A gateway tunnels application traffic between two sites inside
//! AEAD-authenticated frames, pulling its per-epoch keys from the local
//! key-delivery service and rekeying on a fixed interval. A TCP proxy
//! mode forwards real sockets through the tunnel for the secure
//! file-server demo.

mod error;
mod frame;
mod proxy;
mod tunnel;

pub use error::TunnelError;
pub use frame::{nonce, Direction, TunnelFrame, HEADER_LEN, MAGIC, NONCE_LEN, TAG_LEN, VERSION};
pub use proxy::{pump_duplex, SharedTunnel};
pub use tunnel::{
    establish_pair, handshake, CipherSuite, Tunnel, TunnelConfig, TunnelCounters, TunnelState,
    HANDSHAKE_PING, HANDSHAKE_PONG,
};
