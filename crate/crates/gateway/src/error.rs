use thiserror::Error;

#[derive(Debug, Error)]
pub enum TunnelError {
    #[error("frame does not start with the tunnel magic")]
    BadMagic,
    #[error("unsupported frame version {0}")]
    BadVersion(u8),
    #[error("frame is for session {got}, tunnel is bound to {want}")]
    WrongSession { got: String, want: String },
    #[error("frame truncated or length field inconsistent")]
    Malformed,
    #[error("authentication tag check failed")]
    BadTag,
    #[error("replayed frame (epoch {epoch}, seq {seq})")]
    Replay { epoch: u32, seq: u64 },
    #[error("frame epoch {frame} is stale (current {current}, grace of one epoch)")]
    StaleEpoch { frame: u32, current: u32 },
    #[error("frame epoch {frame} is ahead of the local epoch {current}")]
    FutureEpoch { frame: u32, current: u32 },
    #[error("epoch counter would exceed the hard bound {0}")]
    EpochOverflow(u32),
    #[error("tunnel is hard-stopped")]
    HardStopped,
    #[error("key starvation: KMS cannot serve epoch {epoch} yet (retry in {retry_after_ms} ms)")]
    KeyStarvation { epoch: u32, retry_after_ms: u64 },
    #[error("tunnel establishment failed: {0}")]
    Establish(String),
    #[error("handshake failed: peer key disagrees (tag failure on ping)")]
    HandshakeAuth,
    #[error("kms: {0}")]
    Kms(#[from] qkdsim_kms::KmsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
