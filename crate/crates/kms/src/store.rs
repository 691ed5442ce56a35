//! Key stores and the global single-use ledger.
//!
//! A [`KeyStore`] holds the blocks of one scope: a QKD link (mirrored at
//! both endpoints and fed by the same session, so one store object models
//! the synchronized pair) or a node pair holding end-to-end derived keys.
//! Blocks move `available -> reserved -> consumed`, consumed bytes are
//! scrubbed, and the three populations are conserved.

use std::collections::{BTreeMap, VecDeque};

use sha2::{Digest, Sha256};

use crate::error::KmsError;
use crate::types::{zeroize, KeyBlock, KeyId, KeyStatus, Ksid};

#[derive(Debug, Clone)]
pub struct KeyStore {
    pub scope: String,
    blocks: BTreeMap<KeyId, KeyBlock>,
    /// Push-order digests kept for idempotency checks even after scrubbing.
    digests: BTreeMap<KeyId, [u8; 32]>,
    /// FIFO of available blocks in push order.
    available: VecDeque<KeyId>,
    /// Maximum number of retained (available + reserved) blocks.
    pub quota: usize,
    consumed: u64,
    reserved: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreCounts {
    pub available: u64,
    pub reserved: u64,
    pub consumed: u64,
}

/// Result of a byte reservation: the reserved block ids (concatenating to
/// exactly the requested length) plus the boundary split, if one happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reservation {
    pub ids: Vec<KeyId>,
    pub split: Option<SplitInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitInfo {
    pub parent: KeyId,
    pub at: usize,
    pub tail: KeyId,
}

/// Deterministic id of the tail created when a block is split.
pub fn derive_tail_id(parent: &KeyId) -> KeyId {
    let mut hasher = Sha256::new();
    hasher.update(b"key-block-tail");
    hasher.update(parent.0);
    let digest = hasher.finalize();
    KeyId(digest[..16].try_into().expect("16-byte prefix"))
}

impl KeyStore {
    pub fn new(scope: String, quota: usize) -> Self {
        Self {
            scope,
            blocks: BTreeMap::new(),
            digests: BTreeMap::new(),
            available: VecDeque::new(),
            quota,
            consumed: 0,
            reserved: 0,
        }
    }

    pub fn counts(&self) -> StoreCounts {
        StoreCounts {
            available: self.available.len() as u64,
            reserved: self.reserved,
            consumed: self.consumed,
        }
    }

    pub fn available_bytes(&self) -> u64 {
        self.available
            .iter()
            .map(|id| self.blocks[id].bytes.len() as u64)
            .sum()
    }

    /// Stores a block. A duplicate push with identical bytes is idempotent
    /// (the mirrored far endpoint pushing the same generation result); the
    /// same id with different bytes is a conflict.
    pub fn push(&mut self, key_id: KeyId, bytes: Vec<u8>, created_at: f64) -> Result<(), KmsError> {
        if bytes.is_empty() {
            return Err(KmsError::InvalidRecipe("empty key block".into()));
        }
        let digest: [u8; 32] = Sha256::digest(&bytes).into();
        if let Some(existing) = self.digests.get(&key_id) {
            if *existing == digest {
                return Ok(());
            }
            return Err(KmsError::IdConflict {
                scope: self.scope.clone(),
            });
        }
        if self.available.len() + self.reserved as usize >= self.quota {
            return Err(KmsError::StoreFull {
                scope: self.scope.clone(),
            });
        }
        self.digests.insert(key_id, digest);
        self.blocks.insert(
            key_id,
            KeyBlock {
                key_id,
                bytes,
                link_id: self.scope.clone(),
                created_at,
                status: KeyStatus::Available,
            },
        );
        self.available.push_back(key_id);
        Ok(())
    }

    /// Reserves exactly `n_bytes` FIFO. Whole blocks are taken until the
    /// boundary; a block straddling it is split into a reserved head that
    /// keeps the block id and an available tail under a derived id, so no
    /// key byte is wasted and every byte still has exactly one owner.
    /// Fails without state change when the store cannot cover the request.
    pub fn reserve_bytes(&mut self, n_bytes: u64) -> Result<Reservation, KmsError> {
        let mut covered = 0u64;
        let mut take = 0usize;
        for id in &self.available {
            if covered >= n_bytes {
                break;
            }
            covered += self.blocks[id].bytes.len() as u64;
            take += 1;
        }
        if covered < n_bytes {
            return Err(KmsError::InsufficientKeyMaterial {
                scope: self.scope.clone(),
                available: covered,
                needed: n_bytes,
                retry_after: 1.0,
            });
        }
        let mut split = None;
        if covered > n_bytes {
            let overshoot = (covered - n_bytes) as usize;
            let boundary = self.available[take - 1];
            let at = self.blocks[&boundary].bytes.len() - overshoot;
            split = Some(self.split_block(boundary, at, take - 1));
        }
        let ids: Vec<KeyId> = self.available.drain(..take).collect();
        for id in &ids {
            self.blocks.get_mut(id).expect("reserved block exists").status = KeyStatus::Reserved;
        }
        self.reserved += ids.len() as u64;
        Ok(Reservation { ids, split })
    }

    /// Splits a block at `at` bytes: the head keeps the id, the tail
    /// becomes a fresh available block right behind it in the FIFO.
    fn split_block(&mut self, id: KeyId, at: usize, queue_pos: usize) -> SplitInfo {
        let created_at;
        let tail_bytes;
        {
            let block = self.blocks.get_mut(&id).expect("split block exists");
            created_at = block.created_at;
            tail_bytes = block.bytes.split_off(at);
        }
        let tail_id = derive_tail_id(&id);
        let digest: [u8; 32] = Sha256::digest(&tail_bytes).into();
        self.digests.insert(tail_id, digest);
        self.blocks.insert(
            tail_id,
            KeyBlock {
                key_id: tail_id,
                bytes: tail_bytes,
                link_id: self.scope.clone(),
                created_at,
                status: KeyStatus::Available,
            },
        );
        self.available.insert(queue_pos + 1, tail_id);
        SplitInfo {
            parent: id,
            at,
            tail: tail_id,
        }
    }

    /// Re-applies a recorded split (journal replay path).
    pub fn apply_split(&mut self, parent: KeyId, at: usize) -> Result<SplitInfo, KmsError> {
        let pos = self
            .available
            .iter()
            .position(|a| *a == parent)
            .ok_or_else(|| KmsError::JournalCorrupt(format!("split parent {parent} not available")))?;
        Ok(self.split_block(parent, at, pos))
    }

    /// Concatenated bytes of the given blocks, in order.
    pub fn concat_bytes(&self, ids: &[KeyId]) -> Vec<u8> {
        let mut out = Vec::new();
        for id in ids {
            out.extend_from_slice(&self.blocks[id].bytes);
        }
        out
    }

    /// Reserved -> consumed; bytes are scrubbed.
    pub fn consume(&mut self, ids: &[KeyId]) {
        for id in ids {
            let block = self.blocks.get_mut(id).expect("consumed block exists");
            debug_assert_eq!(block.status, KeyStatus::Reserved);
            block.status = KeyStatus::Consumed;
            zeroize(&mut block.bytes);
            block.bytes.clear();
            self.reserved -= 1;
            self.consumed += 1;
        }
    }

    /// Reserved -> available (front of the FIFO, preserving age order).
    pub fn release(&mut self, ids: &[KeyId]) {
        for id in ids.iter().rev() {
            let block = self.blocks.get_mut(id).expect("released block exists");
            debug_assert_eq!(block.status, KeyStatus::Reserved);
            block.status = KeyStatus::Available;
            self.available.push_front(*id);
            self.reserved -= 1;
        }
    }

    /// Reserves the exact given blocks (journal replay path).
    pub fn reserve_ids(&mut self, ids: &[KeyId]) -> Result<(), KmsError> {
        for id in ids {
            let pos = self
                .available
                .iter()
                .position(|a| a == id)
                .ok_or_else(|| KmsError::JournalCorrupt(format!("block {id} not available")))?;
            self.available.remove(pos);
            self.blocks.get_mut(id).expect("block exists").status = KeyStatus::Reserved;
            self.reserved += 1;
        }
        Ok(())
    }

    /// Registers a consumed block from a tombstone (journal replay path):
    /// the digest keeps idempotency checks working, the bytes stay gone.
    pub fn restore_consumed(&mut self, key_id: KeyId, digest: [u8; 32], created_at: f64) {
        if self.digests.contains_key(&key_id) {
            return;
        }
        self.digests.insert(key_id, digest);
        self.blocks.insert(
            key_id,
            KeyBlock {
                key_id,
                bytes: Vec::new(),
                link_id: self.scope.clone(),
                created_at,
                status: KeyStatus::Consumed,
            },
        );
        self.consumed += 1;
    }

    pub fn digest_of(&self, id: &KeyId) -> Option<&[u8; 32]> {
        self.digests.get(id)
    }

    /// Reserved blocks in id order, for persistence snapshots.
    pub fn reserved_blocks(&self) -> impl Iterator<Item = &KeyBlock> {
        self.blocks
            .values()
            .filter(|b| b.status == KeyStatus::Reserved)
    }

    pub fn block(&self, id: &KeyId) -> Option<&KeyBlock> {
        self.blocks.get(id)
    }

    /// Available blocks in delivery order, for persistence snapshots.
    pub fn available_blocks(&self) -> impl Iterator<Item = &KeyBlock> {
        self.available.iter().map(|id| &self.blocks[id])
    }

    pub fn consumed_ids(&self) -> impl Iterator<Item = &KeyId> {
        self.blocks
            .values()
            .filter(|b| b.status == KeyStatus::Consumed)
            .map(|b| &b.key_id)
    }
}

/// Where a key block ended up; every block is used at most once, anywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UsageTarget {
    Session { ksid: Ksid, index: u64 },
    Relay { event: String },
    Combine { event: String },
}

/// Global single-use ledger over all stores.
#[derive(Debug, Default, Clone)]
pub struct UsageLedger {
    used: BTreeMap<KeyId, UsageTarget>,
    pub double_delivery_attempts: u64,
    /// Chunk digests per (ksid, index), for endpoint-equality auditing.
    chunk_digests: BTreeMap<(Ksid, u64), [u8; 32]>,
    pub endpoint_mismatches: u64,
}

impl UsageLedger {
    /// Records a block's single use. A second use under a different target
    /// is counted and rejected.
    pub fn record(&mut self, key_id: KeyId, target: UsageTarget) -> Result<(), KmsError> {
        match self.used.get(&key_id) {
            None => {
                self.used.insert(key_id, target);
                Ok(())
            }
            Some(existing) if *existing == target => Ok(()),
            Some(_) => {
                self.double_delivery_attempts += 1;
                Err(KmsError::DoubleDelivery)
            }
        }
    }

    /// Audits that both endpoints observed identical bytes for an index.
    pub fn record_chunk(&mut self, ksid: Ksid, index: u64, bytes: &[u8]) {
        let digest: [u8; 32] = Sha256::digest(bytes).into();
        match self.chunk_digests.get(&(ksid, index)) {
            None => {
                self.chunk_digests.insert((ksid, index), digest);
            }
            Some(existing) if *existing == digest => {}
            Some(_) => self.endpoint_mismatches += 1,
        }
    }

    pub fn used_count(&self) -> u64 {
        self.used.len() as u64
    }

    pub fn target_of(&self, key_id: &KeyId) -> Option<&UsageTarget> {
        self.used.get(key_id)
    }

    pub fn iter_used(&self) -> impl Iterator<Item = (&KeyId, &UsageTarget)> {
        self.used.iter()
    }
}

impl UsageTarget {
    pub fn encode(&self) -> String {
        match self {
            UsageTarget::Session { ksid, index } => format!("session:{ksid}:{index}"),
            UsageTarget::Relay { event } => event.clone(),
            UsageTarget::Combine { event } => event.clone(),
        }
    }

    pub fn decode(s: &str) -> Result<Self, KmsError> {
        if let Some(rest) = s.strip_prefix("session:") {
            let (ksid_hex, index) = rest
                .split_once(':')
                .ok_or_else(|| KmsError::JournalCorrupt(format!("bad target {s}")))?;
            return Ok(UsageTarget::Session {
                ksid: Ksid::from_hex(ksid_hex)?,
                index: index
                    .parse()
                    .map_err(|_| KmsError::JournalCorrupt(format!("bad target {s}")))?,
            });
        }
        if s.starts_with("relay:") {
            return Ok(UsageTarget::Relay { event: s.into() });
        }
        if s.starts_with("combine:") {
            return Ok(UsageTarget::Combine { event: s.into() });
        }
        Err(KmsError::JournalCorrupt(format!("bad target {s}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kid(n: u8) -> KeyId {
        KeyId([n; 16])
    }

    #[test]
    fn push_readback_identical() {
        let mut store = KeyStore::new("link:test".into(), 100);
        store.push(kid(1), vec![1, 2, 3, 4], 0.0).unwrap();
        assert_eq!(store.block(&kid(1)).unwrap().bytes, vec![1, 2, 3, 4]);
    }

    #[test]
    fn duplicate_identical_push_is_idempotent() {
        let mut store = KeyStore::new("link:test".into(), 100);
        store.push(kid(1), vec![9; 32], 0.0).unwrap();
        store.push(kid(1), vec![9; 32], 0.0).unwrap();
        assert_eq!(store.counts().available, 1);
        let conflict = store.push(kid(1), vec![8; 32], 0.0);
        assert!(matches!(conflict, Err(KmsError::IdConflict { .. })));
    }

    #[test]
    fn quota_enforced() {
        let mut store = KeyStore::new("link:test".into(), 2);
        store.push(kid(1), vec![1], 0.0).unwrap();
        store.push(kid(2), vec![2], 0.0).unwrap();
        assert!(matches!(
            store.push(kid(3), vec![3], 0.0),
            Err(KmsError::StoreFull { .. })
        ));
    }

    #[test]
    fn reserve_is_fifo_and_exact() {
        let mut store = KeyStore::new("link:test".into(), 100);
        for i in 0..4 {
            store.push(kid(i), vec![i; 10], 0.0).unwrap();
        }
        let err = store.reserve_bytes(100).unwrap_err();
        assert!(matches!(err, KmsError::InsufficientKeyMaterial { .. }));
        assert_eq!(store.counts().available, 4);

        let reservation = store.reserve_bytes(15).unwrap();
        assert_eq!(reservation.ids, vec![kid(0), kid(1)]);
        assert_eq!(store.counts().reserved, 2);
        // exact coverage: the boundary block was split
        assert_eq!(store.concat_bytes(&reservation.ids).len(), 15);
        let split = reservation.split.expect("boundary split");
        assert_eq!(split.parent, kid(1));
        assert_eq!(split.at, 5);
        // the tail is next in line and carries the remaining bytes
        let next = store.reserve_bytes(5).unwrap();
        assert_eq!(next.ids, vec![split.tail]);
        assert!(next.split.is_none());
        assert_eq!(store.concat_bytes(&next.ids), vec![1u8; 5]);
    }

    #[test]
    fn accounting_conserved_through_lifecycle() {
        let mut store = KeyStore::new("link:test".into(), 100);
        for i in 0..6 {
            store.push(kid(i), vec![i; 8], 0.0).unwrap();
        }
        let total = |c: StoreCounts| c.available + c.reserved + c.consumed;
        assert_eq!(total(store.counts()), 6);

        // 20 of 48 bytes: two whole blocks plus a split third
        let reservation = store.reserve_bytes(20).unwrap();
        assert!(reservation.split.is_some());
        assert_eq!(total(store.counts()), 7, "split adds the tail block");
        store.release(&reservation.ids);
        assert_eq!(total(store.counts()), 7);
        assert_eq!(store.counts().available, 7);
        // release preserves FIFO order; the same bytes are handed out again
        let again = store.reserve_bytes(20).unwrap();
        assert_eq!(again.ids, reservation.ids);
        assert!(again.split.is_none(), "head block already has the exact size");
        store.consume(&again.ids);
        assert_eq!(total(store.counts()), 7);
        assert_eq!(store.counts().consumed, 3);
        // consumed bytes are scrubbed
        assert!(store.block(&again.ids[0]).unwrap().bytes.is_empty());
        // no byte lost: available bytes are the original 48 minus 20
        assert_eq!(store.available_bytes(), 28);
    }

    #[test]
    fn ledger_rejects_double_use() {
        let mut ledger = UsageLedger::default();
        let target_a = UsageTarget::Session {
            ksid: Ksid([1; 16]),
            index: 0,
        };
        let target_b = UsageTarget::Session {
            ksid: Ksid([1; 16]),
            index: 1,
        };
        ledger.record(kid(1), target_a.clone()).unwrap();
        ledger.record(kid(1), target_a).unwrap();
        assert!(matches!(
            ledger.record(kid(1), target_b),
            Err(KmsError::DoubleDelivery)
        ));
        assert_eq!(ledger.double_delivery_attempts, 1);
    }

    #[test]
    fn ledger_detects_endpoint_mismatch() {
        let mut ledger = UsageLedger::default();
        let ksid = Ksid([2; 16]);
        ledger.record_chunk(ksid, 0, b"same");
        ledger.record_chunk(ksid, 0, b"same");
        assert_eq!(ledger.endpoint_mismatches, 0);
        ledger.record_chunk(ksid, 0, b"diff");
        assert_eq!(ledger.endpoint_mismatches, 1);
    }
}
