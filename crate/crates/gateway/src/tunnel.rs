//! The quantum-secure tunnel: AEAD-protected framing over KMS-delivered
//! keys, rekeyed by epoch.
//!
//! Each epoch's 256-bit key is pulled from the key-delivery session as
//! chunk index = epoch. Sealing never emits plaintext: every outbound
//! byte is inside an authenticated frame. On key starvation the tunnel
//! keeps the old epoch and degrades loudly instead of failing open.

use std::collections::{BTreeMap, BTreeSet};

use aes_gcm::aead::generic_array::GenericArray;
use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{aes::Aes256, AesGcm, KeyInit};

use qkdsim_kms::{GetKeyOutcome, KmsClient, Ksid};

use crate::error::TunnelError;
use crate::frame::{nonce, Direction, TunnelFrame, TAG_LEN};

type Cipher = AesGcm<Aes256, aes_gcm::aead::consts::U13>;

pub const HANDSHAKE_PING: &[u8] = b"QGW-PING";
pub const HANDSHAKE_PONG: &[u8] = b"QGW-PONG";

/// AEAD suite of the tunnel. AES-256-GCM is the only deployed suite; the
/// enum pins the suite id into configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CipherSuite {
    #[default]
    Aes256Gcm,
}

impl CipherSuite {
    pub fn key_len(self) -> usize {
        32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunnelConfig {
    pub ksid: Ksid,
    /// Seconds between rekeys (scheduling is the caller's job; the tunnel
    /// only tracks epochs).
    pub rekey_interval: f64,
    pub cipher: CipherSuite,
    /// Accepted reordering depth per epoch before frames count as replays.
    pub replay_window: u64,
    /// Hard stop bound for the epoch counter.
    pub max_epoch: u32,
}

impl TunnelConfig {
    pub fn new(ksid: Ksid) -> Self {
        Self {
            ksid,
            rekey_interval: 120.0,
            cipher: CipherSuite::Aes256Gcm,
            replay_window: 1024,
            max_epoch: u32::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TunnelState {
    Active,
    /// Rekey failed on starvation; traffic continues under the old epoch.
    DegradedNoRekey,
    /// Epoch space exhausted; the tunnel refuses all further traffic.
    HardStopped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TunnelCounters {
    /// Keys pulled from the KMS (epoch 0 included).
    pub epochs_consumed: u64,
    pub frames_sealed: u64,
    pub frames_opened: u64,
    pub plaintext_bytes_sealed: u64,
    pub decrypt_failures: u64,
    pub replays_rejected: u64,
    pub rekey_alarms: u64,
}

#[derive(Debug, Default)]
struct ReplayWindow {
    highest: Option<u64>,
    seen: BTreeSet<u64>,
}

impl ReplayWindow {
    /// Definite-replay pre-check without state change.
    fn is_replay(&self, seq: u64, window: u64) -> bool {
        match self.highest {
            None => false,
            Some(h) => {
                (seq < h && h - seq >= window) || self.seen.contains(&seq)
            }
        }
    }

    fn insert(&mut self, seq: u64, window: u64) {
        self.seen.insert(seq);
        let h = self.highest.map_or(seq, |h| h.max(seq));
        self.highest = Some(h);
        while let Some(&oldest) = self.seen.first() {
            if h.saturating_sub(oldest) >= window {
                self.seen.remove(&oldest);
            } else {
                break;
            }
        }
    }
}

pub struct Tunnel {
    config: TunnelConfig,
    role: Direction,
    client: Option<KmsClient>,
    epoch: u32,
    current: Cipher,
    previous: Option<Cipher>,
    send_seq: u64,
    recv_windows: BTreeMap<u32, ReplayWindow>,
    state: TunnelState,
    counters: TunnelCounters,
}

impl std::fmt::Debug for Tunnel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tunnel")
            .field("ksid", &self.config.ksid)
            .field("role", &self.role)
            .field("epoch", &self.epoch)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

impl Tunnel {
    /// Pulls the epoch-0 key from the key-delivery session and builds the
    /// tunnel endpoint. Key agreement is verified afterwards by the
    /// encrypted ping exchange, not by comparing key bytes.
    pub fn establish(
        mut client: KmsClient,
        config: TunnelConfig,
        role: Direction,
    ) -> Result<Self, TunnelError> {
        let key = match client.get_key(&config.ksid, 0) {
            Ok(GetKeyOutcome::Delivered(k)) => k,
            Ok(GetKeyOutcome::Insufficient { retry_after_ms }) => {
                return Err(TunnelError::Establish(format!(
                    "KMS has no key material for epoch 0 (retry in {retry_after_ms} ms)"
                )))
            }
            Err(e) => return Err(TunnelError::Establish(e.to_string())),
        };
        let mut tunnel = Self::from_key_bytes(&key, config, role)?;
        tunnel.client = Some(client);
        Ok(tunnel)
    }

    /// Builds an endpoint from raw key bytes; no KMS binding, so rekeying
    /// is impossible. Used for fault injection and external key sources.
    pub fn from_key_bytes(
        key: &[u8],
        config: TunnelConfig,
        role: Direction,
    ) -> Result<Self, TunnelError> {
        if key.len() != config.cipher.key_len() {
            return Err(TunnelError::Establish(format!(
                "epoch key must be {} bytes, got {}",
                config.cipher.key_len(),
                key.len()
            )));
        }
        let current = Cipher::new_from_slice(key).expect("length checked");
        Ok(Self {
            config,
            role,
            client: None,
            epoch: 0,
            current,
            previous: None,
            send_seq: 0,
            recv_windows: BTreeMap::new(),
            state: TunnelState::Active,
            counters: TunnelCounters {
                epochs_consumed: 1,
                ..TunnelCounters::default()
            },
        })
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn state(&self) -> TunnelState {
        self.state
    }

    pub fn counters(&self) -> TunnelCounters {
        self.counters
    }

    pub fn role(&self) -> Direction {
        self.role
    }

    /// Advances to the next epoch with a fresh KMS key. On starvation the
    /// old epoch stays live and the tunnel reports degraded operation.
    pub fn rekey(&mut self) -> Result<u32, TunnelError> {
        if self.state == TunnelState::HardStopped {
            return Err(TunnelError::HardStopped);
        }
        let next = match self.epoch.checked_add(1) {
            Some(n) if n <= self.config.max_epoch => n,
            _ => {
                self.state = TunnelState::HardStopped;
                return Err(TunnelError::EpochOverflow(self.config.max_epoch));
            }
        };
        let client = self
            .client
            .as_mut()
            .ok_or_else(|| TunnelError::Establish("tunnel has no KMS binding".into()))?;
        match client.get_key(&self.config.ksid, next as u64) {
            Ok(GetKeyOutcome::Delivered(key)) => {
                if key.len() != self.config.cipher.key_len() {
                    return Err(TunnelError::Establish("bad key length from KMS".into()));
                }
                self.previous = Some(std::mem::replace(
                    &mut self.current,
                    Cipher::new_from_slice(&key).expect("length checked"),
                ));
                self.epoch = next;
                self.send_seq = 0;
                // two-epoch grace: keep windows for {epoch, epoch - 1}
                self.recv_windows.retain(|e, _| *e + 1 >= next);
                self.counters.epochs_consumed += 1;
                self.state = TunnelState::Active;
                Ok(next)
            }
            Ok(GetKeyOutcome::Insufficient { retry_after_ms }) => {
                self.counters.rekey_alarms += 1;
                self.state = TunnelState::DegradedNoRekey;
                Err(TunnelError::KeyStarvation {
                    epoch: next,
                    retry_after_ms,
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Encrypts one payload into a wire frame.
    pub fn seal(&mut self, plaintext: &[u8]) -> Result<Vec<u8>, TunnelError> {
        if self.state == TunnelState::HardStopped {
            return Err(TunnelError::HardStopped);
        }
        let seq = self.send_seq;
        self.send_seq = self
            .send_seq
            .checked_add(1)
            .ok_or(TunnelError::EpochOverflow(self.config.max_epoch))?;
        let mut frame = TunnelFrame {
            ksid: self.config.ksid.0,
            epoch: self.epoch,
            seq,
            ciphertext: Vec::new(),
        };
        // header authenticates as AAD; its length field counts the tag
        let mut header = frame.header();
        header[33..37].copy_from_slice(&((plaintext.len() + TAG_LEN) as u32).to_be_bytes());
        let n = nonce(self.epoch, seq, self.role);
        let ciphertext = self
            .current
            .encrypt(
                GenericArray::from_slice(&n),
                Payload {
                    msg: plaintext,
                    aad: &header,
                },
            )
            .expect("AES-GCM encryption is infallible for in-memory buffers");
        frame.ciphertext = ciphertext;
        self.counters.frames_sealed += 1;
        self.counters.plaintext_bytes_sealed += plaintext.len() as u64;
        Ok(frame.encode())
    }

    /// Authenticates and decrypts one wire frame. Rejections are typed:
    /// bad tag, replay, stale epoch beyond the grace window, future epoch.
    pub fn open(&mut self, bytes: &[u8]) -> Result<Vec<u8>, TunnelError> {
        if self.state == TunnelState::HardStopped {
            return Err(TunnelError::HardStopped);
        }
        let frame = TunnelFrame::decode(bytes)?;
        if frame.ksid != self.config.ksid.0 {
            return Err(TunnelError::WrongSession {
                got: hex_string(&frame.ksid),
                want: self.config.ksid.to_string(),
            });
        }
        let cipher = if frame.epoch == self.epoch {
            &self.current
        } else if frame.epoch + 1 == self.epoch {
            self.previous.as_ref().ok_or(TunnelError::StaleEpoch {
                frame: frame.epoch,
                current: self.epoch,
            })?
        } else if frame.epoch < self.epoch {
            return Err(TunnelError::StaleEpoch {
                frame: frame.epoch,
                current: self.epoch,
            });
        } else {
            return Err(TunnelError::FutureEpoch {
                frame: frame.epoch,
                current: self.epoch,
            });
        };

        let window = self.recv_windows.entry(frame.epoch).or_default();
        if window.is_replay(frame.seq, self.config.replay_window) {
            self.counters.replays_rejected += 1;
            return Err(TunnelError::Replay {
                epoch: frame.epoch,
                seq: frame.seq,
            });
        }

        let n = nonce(frame.epoch, frame.seq, self.role.reverse());
        let plaintext = cipher
            .decrypt(
                GenericArray::from_slice(&n),
                Payload {
                    msg: &frame.ciphertext,
                    aad: &frame.header(),
                },
            )
            .map_err(|_| {
                self.counters.decrypt_failures += 1;
                TunnelError::BadTag
            })?;
        // only authenticated frames advance the replay window
        self.recv_windows
            .entry(frame.epoch)
            .or_default()
            .insert(frame.seq, self.config.replay_window);
        self.counters.frames_opened += 1;
        Ok(plaintext)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Establishes both endpoints over their local KMS clients and runs the
/// encrypted ping/pong handshake that proves key agreement without
/// disclosing key bytes.
pub fn establish_pair(
    client_a: KmsClient,
    client_b: KmsClient,
    config: TunnelConfig,
) -> Result<(Tunnel, Tunnel), TunnelError> {
    let mut a = Tunnel::establish(client_a, config.clone(), Direction::AtoB)?;
    let mut b = Tunnel::establish(client_b, config, Direction::BtoA)?;
    handshake(&mut a, &mut b)?;
    Ok((a, b))
}

/// Ping/pong over already-built endpoints (also used after fault
/// injection in tests).
pub fn handshake(a: &mut Tunnel, b: &mut Tunnel) -> Result<(), TunnelError> {
    let ping = a.seal(HANDSHAKE_PING)?;
    let got = b.open(&ping).map_err(|e| match e {
        TunnelError::BadTag => TunnelError::HandshakeAuth,
        other => other,
    })?;
    if got != HANDSHAKE_PING {
        return Err(TunnelError::HandshakeAuth);
    }
    let pong = b.seal(HANDSHAKE_PONG)?;
    let got = a.open(&pong).map_err(|e| match e {
        TunnelError::BadTag => TunnelError::HandshakeAuth,
        other => other,
    })?;
    if got != HANDSHAKE_PONG {
        return Err(TunnelError::HandshakeAuth);
    }
    Ok(())
}
