//! The key-management network: per-link stores mirrored at both endpoints,
//! end-to-end pair stores, key-stream sessions, trusted-node XOR relay and
//! multi-source combining.
//!
//! One `KmsNetwork` models the synchronized state of all local KMS
//! instances plus the global KMS: link stores are written identically at
//! both ends of a link (dual delivery), so a single store object per link
//! stands in for the mirrored pair, while the single-use ledger and the
//! chunk-digest audit enforce the contracts that the mirroring must
//! satisfy. All operations go through one object, which makes every store
//! operation linearizable when the network is shared behind a mutex.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use crate::bus::AuthBus;
use crate::combine::{combine_keys, ExternalKeySource};
use crate::error::KmsError;
use crate::journal::{Journal, JournalEvent};
use crate::store::{KeyStore, StoreCounts, UsageLedger, UsageTarget};
use crate::types::{
    link_scope, pair_scope, CombineRecipe, KeyId, KeySource, Ksid, LinkId, NodeId, Qos, RelayPath,
};

/// Default per-store quota (blocks retained).
pub const DEFAULT_STORE_QUOTA: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct KmsConfig {
    pub store_quota: usize,
    /// Seed of the pre-shared bus authentication key.
    pub bus_psk_seed: u64,
    /// Journal path; `None` disables persistence.
    pub persist_path: Option<std::path::PathBuf>,
}

impl Default for KmsConfig {
    fn default() -> Self {
        Self {
            store_quota: DEFAULT_STORE_QUOTA,
            bus_psk_seed: 0,
            persist_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endpoint {
    Source = 0,
    Destination = 1,
}

#[derive(Debug, Clone)]
struct Assignment {
    key_ids: Vec<KeyId>,
    chunk: Vec<u8>,
    delivered: [bool; 2],
    /// Set once the block usage is written to the ledger (first delivery).
    recorded: bool,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub ksid: Ksid,
    pub source: NodeId,
    pub destination: NodeId,
    pub qos: Qos,
    backing_scope: String,
    open: bool,
    next_index: u64,
    assignments: BTreeMap<u64, Assignment>,
}

impl Session {
    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn next_index(&self) -> u64 {
        self.next_index
    }
}

/// Result of one relay establishment.
#[derive(Debug, Clone)]
pub struct RelayOutcome {
    pub event_id: String,
    pub key_id: KeyId,
    pub n_bytes: usize,
    /// Public relay messages (one per interior node), for auditing.
    pub transcript: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LedgerStats {
    pub used_blocks: u64,
    pub double_delivery_attempts: u64,
    pub endpoint_mismatches: u64,
}

#[derive(Debug)]
pub struct KmsNetwork {
    config: KmsConfig,
    nodes: BTreeSet<NodeId>,
    links: BTreeMap<LinkId, (NodeId, NodeId)>,
    stores: BTreeMap<String, KeyStore>,
    sessions: BTreeMap<Ksid, Session>,
    externals: BTreeMap<String, ExternalKeySource>,
    external_seeds: BTreeMap<String, u64>,
    ledger: UsageLedger,
    bus: AuthBus,
    relay_transcript: Vec<u8>,
    session_counter: u64,
    relay_counter: u64,
    combine_counter: u64,
    journal: Option<Journal>,
}

fn derive_id(parts: &[&[u8]]) -> [u8; 16] {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_be_bytes());
        hasher.update(p);
    }
    let digest = hasher.finalize();
    digest[..16].try_into().expect("16-byte prefix")
}

impl KmsNetwork {
    pub fn new(config: KmsConfig) -> Result<Self, KmsError> {
        let mut psk = [0u8; 32];
        psk[..8].copy_from_slice(&config.bus_psk_seed.to_be_bytes());
        let digest: [u8; 32] = Sha256::digest(psk).into();
        let journal = match &config.persist_path {
            Some(path) => Some(Journal::open(path)?),
            None => None,
        };
        Ok(Self {
            config,
            nodes: BTreeSet::new(),
            links: BTreeMap::new(),
            stores: BTreeMap::new(),
            sessions: BTreeMap::new(),
            externals: BTreeMap::new(),
            external_seeds: BTreeMap::new(),
            ledger: UsageLedger::default(),
            bus: AuthBus::new(digest),
            relay_transcript: Vec::new(),
            session_counter: 0,
            relay_counter: 0,
            combine_counter: 0,
            journal,
        })
    }

    fn log(&mut self, event: JournalEvent) -> Result<(), KmsError> {
        if let Some(journal) = &mut self.journal {
            journal.append(&event)?;
        }
        Ok(())
    }

    fn log_counters(&mut self) -> Result<(), KmsError> {
        let event = JournalEvent::CountersSet {
            session: self.session_counter,
            relay: self.relay_counter,
            combine: self.combine_counter,
        };
        self.log(event)
    }

    /// Byte reservation plus its journal footprint (split, then reserve).
    fn reserve_and_log(&mut self, scope: &str, n_bytes: u64) -> Result<Vec<KeyId>, KmsError> {
        let reservation = self.store_mut(scope).reserve_bytes(n_bytes)?;
        if let Some(split) = reservation.split {
            self.log(JournalEvent::Split {
                scope: scope.to_string(),
                key_id: split.parent.to_string(),
                at: split.at as u64,
                tail_id: split.tail.to_string(),
            })?;
        }
        self.log(JournalEvent::Reserve {
            scope: scope.to_string(),
            key_ids: reservation.ids.iter().map(|k| k.to_string()).collect(),
        })?;
        Ok(reservation.ids)
    }

    /// Rebuilds dynamic state (stores, sessions, ledger) from the journal
    /// at the configured persistence path. Topology (nodes, links, relay
    /// paths, external sources) is configuration and must have been
    /// re-registered before the call.
    pub fn load_journal(&mut self) -> Result<(), KmsError> {
        let path = match &self.config.persist_path {
            Some(p) => p.clone(),
            None => return Ok(()),
        };
        let events = Journal::read_events(&path)?;
        for event in events {
            self.apply(event)?;
        }
        Ok(())
    }

    fn apply(&mut self, event: JournalEvent) -> Result<(), KmsError> {
        let parse_ids = |ids: &[String]| -> Result<Vec<KeyId>, KmsError> {
            ids.iter().map(|s| KeyId::from_hex(s)).collect()
        };
        match event {
            JournalEvent::Push {
                scope,
                key_id,
                bytes,
                created_at,
            } => {
                let id = KeyId::from_hex(&key_id)?;
                let bytes = hex::decode(bytes).map_err(|e| KmsError::JournalCorrupt(e.to_string()))?;
                self.store_mut(&scope).push(id, bytes, created_at)?;
            }
            JournalEvent::Reserve { scope, key_ids } => {
                let ids = parse_ids(&key_ids)?;
                self.store_mut(&scope).reserve_ids(&ids)?;
            }
            JournalEvent::Consume { scope, key_ids } => {
                let ids = parse_ids(&key_ids)?;
                self.store_mut(&scope).consume(&ids);
            }
            JournalEvent::Release { scope, key_ids } => {
                let ids = parse_ids(&key_ids)?;
                self.store_mut(&scope).release(&ids);
            }
            JournalEvent::Tombstone {
                scope,
                key_id,
                digest,
            } => {
                let id = KeyId::from_hex(&key_id)?;
                let digest: [u8; 32] = hex::decode(digest)
                    .ok()
                    .and_then(|v| v.try_into().ok())
                    .ok_or_else(|| KmsError::JournalCorrupt("bad digest".into()))?;
                self.store_mut(&scope).restore_consumed(id, digest, 0.0);
            }
            JournalEvent::Split {
                scope,
                key_id,
                at,
                tail_id,
            } => {
                let parent = KeyId::from_hex(&key_id)?;
                let split = self.store_mut(&scope).apply_split(parent, at as usize)?;
                if split.tail.to_string() != tail_id {
                    return Err(KmsError::JournalCorrupt("split tail id mismatch".into()));
                }
            }
            JournalEvent::Use { key_id, target } => {
                let id = KeyId::from_hex(&key_id)?;
                self.ledger.record(id, UsageTarget::decode(&target)?)?;
            }
            JournalEvent::SessionOpen {
                ksid,
                source,
                destination,
                chunk_size,
                max_bps,
                min_bps,
                ttl,
                backing_scope,
            } => {
                let ksid = Ksid::from_hex(&ksid)?;
                self.sessions.insert(
                    ksid,
                    Session {
                        ksid,
                        source: NodeId(source),
                        destination: NodeId(destination),
                        qos: Qos {
                            key_chunk_size: chunk_size,
                            max_bps,
                            min_bps,
                            ttl,
                        },
                        backing_scope,
                        open: true,
                        next_index: 0,
                        assignments: BTreeMap::new(),
                    },
                );
            }
            JournalEvent::Assign {
                ksid,
                index,
                key_ids,
                chunk,
            } => {
                let ksid = Ksid::from_hex(&ksid)?;
                let key_ids = parse_ids(&key_ids)?;
                let chunk =
                    hex::decode(chunk).map_err(|e| KmsError::JournalCorrupt(e.to_string()))?;
                let session = self
                    .sessions
                    .get_mut(&ksid)
                    .ok_or(KmsError::UnknownSession(ksid))?;
                session.assignments.insert(
                    index,
                    Assignment {
                        key_ids,
                        chunk,
                        delivered: [false, false],
                        recorded: false,
                    },
                );
                session.next_index = session.next_index.max(index + 1);
            }
            JournalEvent::Deliver {
                ksid,
                index,
                endpoint,
            } => {
                let ksid = Ksid::from_hex(&ksid)?;
                let session = self
                    .sessions
                    .get_mut(&ksid)
                    .ok_or(KmsError::UnknownSession(ksid))?;
                let assignment = session
                    .assignments
                    .get_mut(&index)
                    .ok_or_else(|| KmsError::JournalCorrupt("deliver without assign".into()))?;
                assignment.delivered[endpoint as usize] = true;
                assignment.recorded = true;
                let chunk = assignment.chunk.clone();
                self.ledger.record_chunk(ksid, index, &chunk);
            }
            JournalEvent::SessionClose { ksid } => {
                let ksid = Ksid::from_hex(&ksid)?;
                if let Some(session) = self.sessions.get_mut(&ksid) {
                    session.open = false;
                }
            }
            JournalEvent::ExternalAdvance { id, counter } => {
                if let Some(src) = self.externals.get_mut(&id) {
                    src.advance_to(counter);
                }
            }
            JournalEvent::CountersSet {
                session,
                relay,
                combine,
            } => {
                self.session_counter = self.session_counter.max(session);
                self.relay_counter = self.relay_counter.max(relay);
                self.combine_counter = self.combine_counter.max(combine);
            }
        }
        Ok(())
    }

    /// Rewrites the journal as the minimal event sequence reproducing the
    /// current state.
    pub fn compact(&mut self) -> Result<(), KmsError> {
        if self.journal.is_none() {
            return Ok(());
        }
        let mut events = Vec::new();
        for (scope, store) in &self.stores {
            for block in store.available_blocks() {
                events.push(JournalEvent::Push {
                    scope: scope.clone(),
                    key_id: block.key_id.to_string(),
                    bytes: hex::encode(&block.bytes),
                    created_at: block.created_at,
                });
            }
            for block in store.reserved_blocks() {
                events.push(JournalEvent::Push {
                    scope: scope.clone(),
                    key_id: block.key_id.to_string(),
                    bytes: hex::encode(&block.bytes),
                    created_at: block.created_at,
                });
                events.push(JournalEvent::Reserve {
                    scope: scope.clone(),
                    key_ids: vec![block.key_id.to_string()],
                });
            }
            for id in store.consumed_ids() {
                let digest = store.digest_of(id).expect("consumed blocks keep digests");
                events.push(JournalEvent::Tombstone {
                    scope: scope.clone(),
                    key_id: id.to_string(),
                    digest: hex::encode(digest),
                });
            }
        }
        for (id, target) in self.ledger.iter_used() {
            events.push(JournalEvent::Use {
                key_id: id.to_string(),
                target: target.encode(),
            });
        }
        for session in self.sessions.values() {
            if !session.open {
                continue;
            }
            events.push(JournalEvent::SessionOpen {
                ksid: session.ksid.to_string(),
                source: session.source.0.clone(),
                destination: session.destination.0.clone(),
                chunk_size: session.qos.key_chunk_size,
                max_bps: session.qos.max_bps,
                min_bps: session.qos.min_bps,
                ttl: session.qos.ttl,
                backing_scope: session.backing_scope.clone(),
            });
            for (index, assignment) in &session.assignments {
                events.push(JournalEvent::Assign {
                    ksid: session.ksid.to_string(),
                    index: *index,
                    key_ids: assignment.key_ids.iter().map(|k| k.to_string()).collect(),
                    chunk: hex::encode(&assignment.chunk),
                });
                for (endpoint, delivered) in assignment.delivered.iter().enumerate() {
                    if *delivered {
                        events.push(JournalEvent::Deliver {
                            ksid: session.ksid.to_string(),
                            index: *index,
                            endpoint: endpoint as u8,
                        });
                    }
                }
            }
        }
        for (id, src) in &self.externals {
            events.push(JournalEvent::ExternalAdvance {
                id: id.clone(),
                counter: src.counter(),
            });
        }
        events.push(JournalEvent::CountersSet {
            session: self.session_counter,
            relay: self.relay_counter,
            combine: self.combine_counter,
        });
        self.journal
            .as_mut()
            .expect("checked above")
            .rewrite(&events)
    }

    // ---- topology -------------------------------------------------------

    pub fn add_node(&mut self, id: NodeId) -> Result<(), KmsError> {
        if !self.nodes.insert(id.clone()) {
            return Err(KmsError::DuplicateId {
                kind: "node",
                id: id.0,
            });
        }
        Ok(())
    }

    pub fn add_link(&mut self, link: LinkId, a: NodeId, b: NodeId) -> Result<(), KmsError> {
        for node in [&a, &b] {
            if !self.nodes.contains(node) {
                return Err(KmsError::UnknownId {
                    kind: "node",
                    id: node.0.clone(),
                });
            }
        }
        if self.links.contains_key(&link) {
            return Err(KmsError::DuplicateId {
                kind: "link",
                id: link.0,
            });
        }
        let scope = link_scope(&link);
        let quota = self.config.store_quota;
        self.stores
            .entry(scope.clone())
            .or_insert_with(|| KeyStore::new(scope, quota));
        self.links.insert(link, (a, b));
        Ok(())
    }

    pub fn register_external(&mut self, id: impl Into<String>, seed: u64) {
        let id = id.into();
        self.external_seeds.insert(id.clone(), seed);
        self.externals
            .entry(id.clone())
            .or_insert_with(|| ExternalKeySource::new(id, seed));
    }

    pub fn link_endpoints(&self, link: &LinkId) -> Option<&(NodeId, NodeId)> {
        self.links.get(link)
    }

    fn store_mut(&mut self, scope: &str) -> &mut KeyStore {
        let quota = self.config.store_quota;
        self.stores
            .entry(scope.to_string())
            .or_insert_with(|| KeyStore::new(scope.to_string(), quota))
    }

    pub fn store_counts(&self) -> BTreeMap<String, StoreCounts> {
        self.stores
            .iter()
            .map(|(scope, s)| (scope.clone(), s.counts()))
            .collect()
    }

    pub fn available_bytes(&self, scope: &str) -> u64 {
        self.stores.get(scope).map_or(0, |s| s.available_bytes())
    }

    pub fn ledger_stats(&self) -> LedgerStats {
        LedgerStats {
            used_blocks: self.ledger.used_count(),
            double_delivery_attempts: self.ledger.double_delivery_attempts,
            endpoint_mismatches: self.ledger.endpoint_mismatches,
        }
    }

    pub fn bus_mac_failures(&self) -> u64 {
        self.bus.mac_failures
    }

    pub fn relay_transcript(&self) -> &[u8] {
        &self.relay_transcript
    }

    // ---- key ingestion --------------------------------------------------

    /// Stores freshly generated link key material. Both endpoints of the
    /// link push the same (id, bytes) pair; the second push is idempotent.
    pub fn push_key(
        &mut self,
        link: &LinkId,
        bytes: Vec<u8>,
        key_id: KeyId,
        now: f64,
    ) -> Result<(), KmsError> {
        if !self.links.contains_key(link) {
            return Err(KmsError::UnknownId {
                kind: "link",
                id: link.0.clone(),
            });
        }
        let scope = link_scope(link);
        let event = JournalEvent::Push {
            scope: scope.clone(),
            key_id: key_id.to_string(),
            bytes: hex::encode(&bytes),
            created_at: now,
        };
        self.store_mut(&scope).push(key_id, bytes, now)?;
        self.log(event)
    }

    /// Stores an end-to-end key shared by a node pair (used by relay and
    /// combine outputs, and directly in tests).
    pub fn push_pair_key(
        &mut self,
        a: &NodeId,
        b: &NodeId,
        bytes: Vec<u8>,
        key_id: KeyId,
        now: f64,
    ) -> Result<(), KmsError> {
        let scope = pair_scope(a, b);
        let event = JournalEvent::Push {
            scope: scope.clone(),
            key_id: key_id.to_string(),
            bytes: hex::encode(&bytes),
            created_at: now,
        };
        self.store_mut(&scope).push(key_id, bytes, now)?;
        self.log(event)
    }

    // ---- sessions (ETSI-004-style open / get_key / close) ---------------

    fn route(&self, source: &NodeId, destination: &NodeId) -> Option<String> {
        // Direct link first (lowest link id wins for determinism), then an
        // end-to-end pair store fed by relay/combine.
        for (link, (a, b)) in &self.links {
            if (a == source && b == destination) || (a == destination && b == source) {
                return Some(link_scope(link));
            }
        }
        let scope = pair_scope(source, destination);
        if self.stores.contains_key(&scope) {
            return Some(scope);
        }
        None
    }

    pub fn open_connect(
        &mut self,
        source: &NodeId,
        destination: &NodeId,
        qos: Qos,
    ) -> Result<Ksid, KmsError> {
        qos.validate()?;
        for node in [source, destination] {
            if !self.nodes.contains(node) {
                return Err(KmsError::NoRoute {
                    from: source.clone(),
                    to: destination.clone(),
                });
            }
        }
        let backing_scope = self.route(source, destination).ok_or(KmsError::NoRoute {
            from: source.clone(),
            to: destination.clone(),
        })?;
        // Minimum-rate admission: the store must hold at least one chunk
        // and one second's worth of the floor rate.
        let needed = (qos.key_chunk_size as u64).max(qos.min_bps / 8);
        let available = self.available_bytes(&backing_scope);
        if qos.min_bps > 0 && available < needed {
            return Err(KmsError::InsufficientKeyMaterial {
                scope: backing_scope,
                available,
                needed,
                retry_after: 1.0,
            });
        }

        let ksid = Ksid(derive_id(&[
            b"ksid",
            &self.session_counter.to_be_bytes(),
            source.0.as_bytes(),
            destination.0.as_bytes(),
        ]));
        self.session_counter += 1;
        self.log_counters()?;
        let session = Session {
            ksid,
            source: source.clone(),
            destination: destination.clone(),
            qos,
            backing_scope: backing_scope.clone(),
            open: true,
            next_index: 0,
            assignments: BTreeMap::new(),
        };
        self.sessions.insert(ksid, session);
        self.log(JournalEvent::SessionOpen {
            ksid: ksid.to_string(),
            source: source.0.clone(),
            destination: destination.0.clone(),
            chunk_size: qos.key_chunk_size,
            max_bps: qos.max_bps,
            min_bps: qos.min_bps,
            ttl: qos.ttl,
            backing_scope,
        })?;
        Ok(ksid)
    }

    pub fn session(&self, ksid: &Ksid) -> Option<&Session> {
        self.sessions.get(ksid)
    }

    fn endpoint_of(session: &Session, node: &NodeId) -> Result<Endpoint, KmsError> {
        if *node == session.source {
            Ok(Endpoint::Source)
        } else if *node == session.destination {
            Ok(Endpoint::Destination)
        } else {
            Err(KmsError::NotAnEndpoint {
                node: node.clone(),
                ksid: session.ksid,
            })
        }
    }

    /// Delivers the key chunk for `index` to `requester`. Both endpoints
    /// receive identical bytes per index; re-requesting a delivered index
    /// from the same endpoint replays the same bytes.
    pub fn get_key(
        &mut self,
        requester: &NodeId,
        ksid: &Ksid,
        index: u64,
    ) -> Result<Vec<u8>, KmsError> {
        let session = self
            .sessions
            .get(ksid)
            .ok_or(KmsError::UnknownSession(*ksid))?;
        if !session.open {
            return Err(KmsError::ClosedSession(*ksid));
        }
        let endpoint = Self::endpoint_of(session, requester)?;
        let scope = session.backing_scope.clone();
        let chunk_size = session.qos.key_chunk_size as u64;
        let next = session.next_index;

        if !session.assignments.contains_key(&index) {
            if index != next {
                return Err(KmsError::OutOfOrderIndex { index, next });
            }
            let key_ids = self.reserve_and_log(&scope, chunk_size)?;
            let chunk = self.stores[&scope].concat_bytes(&key_ids);
            debug_assert_eq!(chunk.len() as u64, chunk_size);
            self.log(JournalEvent::Assign {
                ksid: ksid.to_string(),
                index,
                key_ids: key_ids.iter().map(|k| k.to_string()).collect(),
                chunk: hex::encode(&chunk),
            })?;
            let session = self.sessions.get_mut(ksid).expect("session exists");
            session.assignments.insert(
                index,
                Assignment {
                    key_ids,
                    chunk,
                    delivered: [false, false],
                    recorded: false,
                },
            );
            session.next_index += 1;
        }

        let session = self.sessions.get_mut(ksid).expect("session exists");
        let assignment = session.assignments.get_mut(&index).expect("assignment exists");
        let chunk = assignment.chunk.clone();
        let key_ids = assignment.key_ids.clone();
        let already = assignment.delivered[endpoint as usize];
        if already {
            // replay-safe re-delivery
            return Ok(chunk);
        }
        assignment.delivered[endpoint as usize] = true;
        let first_delivery = !assignment.recorded;
        assignment.recorded = true;
        let both = assignment.delivered == [true, true];

        if first_delivery {
            for id in &key_ids {
                self.ledger.record(
                    *id,
                    UsageTarget::Session {
                        ksid: *ksid,
                        index,
                    },
                )?;
                self.log(JournalEvent::Use {
                    key_id: id.to_string(),
                    target: format!("session:{ksid}:{index}"),
                })?;
            }
        }
        self.ledger.record_chunk(*ksid, index, &chunk);
        self.log(JournalEvent::Deliver {
            ksid: ksid.to_string(),
            index,
            endpoint: endpoint as u8,
        })?;
        if both {
            self.store_mut(&scope).consume(&key_ids);
            self.log(JournalEvent::Consume {
                scope,
                key_ids: key_ids.iter().map(|k| k.to_string()).collect(),
            })?;
        }
        Ok(chunk)
    }

    /// Closes a session. Idempotent for known sessions; assignments no
    /// endpoint ever fetched return their blocks to the store, partially
    /// delivered ones are consumed so their bytes can never serve anyone
    /// else.
    pub fn close(&mut self, ksid: &Ksid) -> Result<(), KmsError> {
        let session = self
            .sessions
            .get_mut(ksid)
            .ok_or(KmsError::UnknownSession(*ksid))?;
        if !session.open {
            return Ok(());
        }
        session.open = false;
        let scope = session.backing_scope.clone();
        let mut to_release = Vec::new();
        let mut to_consume = Vec::new();
        for assignment in session.assignments.values() {
            match (assignment.recorded, assignment.delivered) {
                (false, _) => to_release.extend(assignment.key_ids.iter().copied()),
                (true, [true, true]) => {} // already consumed
                (true, _) => to_consume.extend(assignment.key_ids.iter().copied()),
            }
        }
        if !to_release.is_empty() {
            self.store_mut(&scope).release(&to_release);
            self.log(JournalEvent::Release {
                scope: scope.clone(),
                key_ids: to_release.iter().map(|k| k.to_string()).collect(),
            })?;
        }
        if !to_consume.is_empty() {
            self.store_mut(&scope).consume(&to_consume);
            self.log(JournalEvent::Consume {
                scope,
                key_ids: to_consume.iter().map(|k| k.to_string()).collect(),
            })?;
        }
        self.log(JournalEvent::SessionClose {
            ksid: ksid.to_string(),
        })
    }

    // ---- trusted-node relay ----------------------------------------------

    /// Validates hop adjacency and returns the interior nodes in order.
    pub fn validate_path(&self, path: &RelayPath) -> Result<Vec<NodeId>, KmsError> {
        if path.hops.len() < 2 {
            return Err(KmsError::InvalidPath("relay requires at least two hops"));
        }
        let mut interior = Vec::new();
        for hop in &path.hops {
            if !self.links.contains_key(hop) {
                return Err(KmsError::InvalidPath("unknown link in path"));
            }
        }
        let mut prev = self.links[&path.hops[0]].clone();
        let first_shared;
        {
            let next = &self.links[&path.hops[1]];
            first_shared = if prev.0 == next.0 || prev.0 == next.1 {
                prev.0.clone()
            } else if prev.1 == next.0 || prev.1 == next.1 {
                prev.1.clone()
            } else {
                return Err(KmsError::InvalidPath("adjacent hops share no node"));
            };
        }
        let start = if prev.0 == first_shared {
            prev.1.clone()
        } else {
            prev.0.clone()
        };
        let mut junction = first_shared;
        for pair in path.hops.windows(2) {
            let next = self.links[&pair[1]].clone();
            let shared = if prev.0 == next.0 || prev.0 == next.1 {
                prev.0.clone()
            } else if prev.1 == next.0 || prev.1 == next.1 {
                prev.1.clone()
            } else {
                return Err(KmsError::InvalidPath("adjacent hops share no node"));
            };
            interior.push(shared.clone());
            junction = shared;
            prev = next;
        }
        let end = if prev.0 == junction {
            prev.1.clone()
        } else {
            prev.0.clone()
        };
        if start == end {
            return Err(KmsError::InvalidPath("path endpoints coincide"));
        }
        let declared = (path.endpoints.0.clone(), path.endpoints.1.clone());
        if declared != (start.clone(), end.clone()) && declared != (end, start) {
            return Err(KmsError::InvalidPath("declared endpoints do not match hops"));
        }
        Ok(interior)
    }

    /// Establishes `n_bits` of end-to-end key across the path: endpoint A
    /// keeps its first-hop key, each interior node publishes the XOR of its
    /// two adjacent hop keys over the authenticated bus, and endpoint C
    /// unrolls the chain from its last-hop key. Atomic: on starvation of
    /// any hop nothing is consumed.
    pub fn xor_relay_establish(
        &mut self,
        path: &RelayPath,
        n_bits: u64,
        now: f64,
    ) -> Result<RelayOutcome, KmsError> {
        let interior = self.validate_path(path)?;
        let n_bytes = n_bits.div_ceil(8) as usize;

        // Phase 1: admission check on every hop before touching anything.
        for hop in &path.hops {
            let scope = link_scope(hop);
            if self.available_bytes(&scope) < n_bytes as u64 {
                return Err(KmsError::RelayStarvation(hop.clone()));
            }
        }
        // Phase 2: reserve everywhere (cannot fail after the check above).
        let mut reservations: Vec<(String, Vec<KeyId>, Vec<u8>)> = Vec::new();
        for hop in &path.hops {
            let scope = link_scope(hop);
            let ids = self.reserve_and_log(&scope, n_bytes as u64)?;
            let key = self.stores[&scope].concat_bytes(&ids);
            debug_assert_eq!(key.len(), n_bytes);
            reservations.push((scope, ids, key));
        }

        let event_id = format!("relay:{}:{}", path.id, self.relay_counter);
        self.relay_counter += 1;
        self.log_counters()?;

        // Interior nodes publish c_i = k_i XOR k_{i+1}.
        let mut transcript = Vec::with_capacity(interior.len());
        for (i, node) in interior.iter().enumerate() {
            let k_i = &reservations[i].2;
            let k_next = &reservations[i + 1].2;
            let c: Vec<u8> = k_i.iter().zip(k_next).map(|(a, b)| a ^ b).collect();
            let msg = self.bus.send(node.clone(), event_id.clone(), c);
            let delivered = self.bus.deliver(&msg).cloned();
            match delivered {
                Some(m) => transcript.push(m.payload),
                None => {
                    // Authenticated channel rejected the message: abort and
                    // hand every hop its keys back.
                    for (scope, ids, _) in &reservations {
                        self.store_mut(scope).release(ids);
                        self.log(JournalEvent::Release {
                            scope: scope.clone(),
                            key_ids: ids.iter().map(|k| k.to_string()).collect(),
                        })?;
                    }
                    return Err(KmsError::MacFailure);
                }
            }
        }

        // Endpoint C reconstructs the first-hop key from its own last-hop
        // key and the public chain.
        let mut reconstructed = reservations.last().expect("hops checked").2.clone();
        for c in transcript.iter().rev() {
            for (byte, m) in reconstructed.iter_mut().zip(c) {
                *byte ^= m;
            }
        }
        let final_key = reservations[0].2.clone();
        debug_assert_eq!(reconstructed, final_key);

        // Hop keys are spent; interior nodes keep only link keys (now
        // consumed) and the public transcript.
        for (scope, ids, key) in &mut reservations {
            for id in ids.iter() {
                self.ledger.record(
                    *id,
                    UsageTarget::Relay {
                        event: event_id.clone(),
                    },
                )?;
                self.log(JournalEvent::Use {
                    key_id: id.to_string(),
                    target: event_id.clone(),
                })?;
            }
            crate::types::zeroize(key);
            self.store_mut(scope).consume(ids);
            self.log(JournalEvent::Consume {
                scope: scope.clone(),
                key_ids: ids.iter().map(|k| k.to_string()).collect(),
            })?;
        }

        let key_id = KeyId(derive_id(&[b"relay-key", event_id.as_bytes()]));
        let (a, c) = (&path.endpoints.0.clone(), &path.endpoints.1.clone());
        self.push_pair_key(a, c, final_key, key_id, now)?;
        for m in &transcript {
            self.relay_transcript.extend_from_slice(m);
        }
        Ok(RelayOutcome {
            event_id,
            key_id,
            n_bytes,
            transcript,
        })
    }

    // ---- combining --------------------------------------------------------

    /// Pulls one chunk from every input source, combines them, and pushes
    /// the derived key into the endpoints' pair store. Atomic over inputs.
    pub fn execute_combine(&mut self, recipe: &CombineRecipe, now: f64) -> Result<KeyId, KmsError> {
        recipe.validate()?;
        let chunk_len = recipe.out_bytes() as u64;
        let (ea, eb) = (&recipe.endpoints.0, &recipe.endpoints.1);

        // Resolve every input scope and check admission first.
        let mut scopes: Vec<Option<String>> = Vec::new();
        for input in &recipe.inputs {
            match input {
                KeySource::QkdLink(link) => {
                    let (a, b) = self.links.get(link).ok_or(KmsError::UnknownId {
                        kind: "link",
                        id: link.0.clone(),
                    })?;
                    let spans = (a == ea && b == eb) || (a == eb && b == ea);
                    if !spans {
                        return Err(KmsError::InvalidRecipe(format!(
                            "link {link} does not connect {ea} and {eb}"
                        )));
                    }
                    scopes.push(Some(link_scope(link)));
                }
                KeySource::Pair => scopes.push(Some(pair_scope(ea, eb))),
                KeySource::External(id) => {
                    if !self.externals.contains_key(id) {
                        return Err(KmsError::UnknownId {
                            kind: "external source",
                            id: id.clone(),
                        });
                    }
                    scopes.push(None);
                }
            }
        }
        for scope in scopes.iter().flatten() {
            if self.available_bytes(scope) < chunk_len {
                return Err(KmsError::InsufficientKeyMaterial {
                    scope: scope.clone(),
                    available: self.available_bytes(scope),
                    needed: chunk_len,
                    retry_after: 1.0,
                });
            }
        }

        let event_id = format!("combine:{}:{}", recipe.id, self.combine_counter);
        self.combine_counter += 1;
        self.log_counters()?;

        let mut chunks = Vec::with_capacity(recipe.inputs.len());
        let mut spent: Vec<(String, Vec<KeyId>)> = Vec::new();
        for (input, scope) in recipe.inputs.iter().zip(&scopes) {
            match (input, scope) {
                (KeySource::External(id), None) => {
                    let src = self.externals.get_mut(id).expect("checked above");
                    chunks.push(src.pull(chunk_len as usize));
                    let counter = src.counter();
                    self.log(JournalEvent::ExternalAdvance {
                        id: id.clone(),
                        counter,
                    })?;
                }
                (_, Some(scope)) => {
                    let scope = scope.clone();
                    let ids = self.reserve_and_log(&scope, chunk_len)?;
                    let chunk = self.stores[&scope].concat_bytes(&ids);
                    debug_assert_eq!(chunk.len() as u64, chunk_len);
                    chunks.push(chunk);
                    spent.push((scope, ids));
                }
                _ => unreachable!("scope resolution covered all variants"),
            }
        }

        let combined = combine_keys(recipe, &chunks)?;
        for (scope, ids) in &spent {
            for id in ids {
                self.ledger.record(
                    *id,
                    UsageTarget::Combine {
                        event: event_id.clone(),
                    },
                )?;
                self.log(JournalEvent::Use {
                    key_id: id.to_string(),
                    target: event_id.clone(),
                })?;
            }
            self.store_mut(scope).consume(ids);
            self.log(JournalEvent::Consume {
                scope: scope.clone(),
                key_ids: ids.iter().map(|k| k.to_string()).collect(),
            })?;
        }

        let key_id = KeyId(derive_id(&[b"combine-key", event_id.as_bytes()]));
        self.push_pair_key(ea, eb, combined, key_id, now)?;
        Ok(key_id)
    }
}

/// Monobit statistic of a byte string: (ones, total bits).
pub fn monobit_counts(bytes: &[u8]) -> (u64, u64) {
    let ones = bytes.iter().map(|b| b.count_ones() as u64).sum();
    (ones, bytes.len() as u64 * 8)
}

/// Frequency test at 4 sigma: |ones - n/2| <= 4 * sqrt(n/4).
pub fn monobit_within_4_sigma(bytes: &[u8]) -> bool {
    let (ones, n) = monobit_counts(bytes);
    if n == 0 {
        return true;
    }
    let deviation = (ones as f64 - n as f64 / 2.0).abs();
    deviation <= 4.0 * (n as f64 / 4.0).sqrt()
}
