//! Tunnel wire format.
//!
//! ```text
//! magic "QGW1" | version (1B) | ksid (16B) | epoch (u32 BE) |
//! seq (u64 BE) | length (u32 BE) | ciphertext+tag (length bytes)
//! ```
//!
//! The 37-byte header is authenticated as AEAD associated data, and the
//! nonce is `epoch BE || seq BE || direction byte` (13 bytes), unique per
//! key by construction: seq is strictly increasing within an epoch and
//! each direction has its own byte.

use crate::error::TunnelError;

pub const MAGIC: [u8; 4] = *b"QGW1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 16 + 4 + 8 + 4;
pub const NONCE_LEN: usize = 13;
/// AES-256-GCM tag length.
pub const TAG_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AtoB = 0,
    BtoA = 1,
}

impl Direction {
    pub fn byte(self) -> u8 {
        self as u8
    }

    pub fn reverse(self) -> Self {
        match self {
            Direction::AtoB => Direction::BtoA,
            Direction::BtoA => Direction::AtoB,
        }
    }
}

/// Parsed frame: header fields plus the ciphertext (with tag).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TunnelFrame {
    pub ksid: [u8; 16],
    pub epoch: u32,
    pub seq: u64,
    pub ciphertext: Vec<u8>,
}

impl TunnelFrame {
    pub fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4] = VERSION;
        h[5..21].copy_from_slice(&self.ksid);
        h[21..25].copy_from_slice(&self.epoch.to_be_bytes());
        h[25..33].copy_from_slice(&self.seq.to_be_bytes());
        h[33..37].copy_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TunnelError> {
        if bytes.len() < HEADER_LEN {
            return Err(if bytes.starts_with(&MAGIC) || MAGIC.starts_with(&bytes[..bytes.len().min(4)]) {
                TunnelError::Malformed
            } else {
                TunnelError::BadMagic
            });
        }
        if bytes[0..4] != MAGIC {
            return Err(TunnelError::BadMagic);
        }
        if bytes[4] != VERSION {
            return Err(TunnelError::BadVersion(bytes[4]));
        }
        let ksid: [u8; 16] = bytes[5..21].try_into().expect("sliced 16");
        let epoch = u32::from_be_bytes(bytes[21..25].try_into().expect("sliced 4"));
        let seq = u64::from_be_bytes(bytes[25..33].try_into().expect("sliced 8"));
        let length = u32::from_be_bytes(bytes[33..37].try_into().expect("sliced 4")) as usize;
        if bytes.len() != HEADER_LEN + length || length < TAG_LEN {
            return Err(TunnelError::Malformed);
        }
        Ok(Self {
            ksid,
            epoch,
            seq,
            ciphertext: bytes[HEADER_LEN..].to_vec(),
        })
    }

    /// Reads one full frame from a stream (header, then body).
    pub fn read_from<R: std::io::Read>(reader: &mut R) -> Result<Self, TunnelError> {
        let mut header = [0u8; HEADER_LEN];
        reader.read_exact(&mut header)?;
        let length = u32::from_be_bytes(header[33..37].try_into().expect("sliced 4")) as usize;
        let mut bytes = header.to_vec();
        bytes.resize(HEADER_LEN + length, 0);
        reader.read_exact(&mut bytes[HEADER_LEN..])?;
        Self::decode(&bytes)
    }
}

pub fn nonce(epoch: u32, seq: u64, direction: Direction) -> [u8; NONCE_LEN] {
    let mut n = [0u8; NONCE_LEN];
    n[0..4].copy_from_slice(&epoch.to_be_bytes());
    n[4..12].copy_from_slice(&seq.to_be_bytes());
    n[12] = direction.byte();
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_is_bit_exact() {
        let frame = TunnelFrame {
            ksid: [7; 16],
            epoch: 0x01020304,
            seq: 0x1122334455667788,
            ciphertext: vec![0xAA; 40],
        };
        let bytes = frame.encode();
        assert_eq!(&bytes[0..4], b"QGW1");
        assert_eq!(bytes[4], 1);
        // big-endian counters at fixed offsets
        assert_eq!(&bytes[21..25], &[1, 2, 3, 4]);
        assert_eq!(&bytes[25..33], &[0x11, 0x22, 0x33, 0x44, 0x55, 0x66, 0x77, 0x88]);
        assert_eq!(&bytes[33..37], &40u32.to_be_bytes());
        let back = TunnelFrame::decode(&bytes).unwrap();
        assert_eq!(frame, back);
    }

    #[test]
    fn malformed_frames_rejected() {
        assert!(matches!(
            TunnelFrame::decode(b"HTTP/1.1 200 OK\r\n\r\nsomebodyelse_entirely_long"),
            Err(TunnelError::BadMagic)
        ));
        let frame = TunnelFrame {
            ksid: [0; 16],
            epoch: 0,
            seq: 0,
            ciphertext: vec![0; TAG_LEN],
        };
        let mut bytes = frame.encode();
        bytes[4] = 9;
        assert!(matches!(
            TunnelFrame::decode(&bytes),
            Err(TunnelError::BadVersion(9))
        ));
        let mut truncated = frame.encode();
        truncated.pop();
        assert!(matches!(
            TunnelFrame::decode(&truncated),
            Err(TunnelError::Malformed)
        ));
    }

    #[test]
    fn nonce_layout() {
        let n = nonce(2, 3, Direction::BtoA);
        assert_eq!(&n[0..4], &[0, 0, 0, 2]);
        assert_eq!(&n[4..12], &[0, 0, 0, 0, 0, 0, 0, 3]);
        assert_eq!(n[12], 1);
        assert_ne!(nonce(2, 3, Direction::AtoB), n);
    }
}
