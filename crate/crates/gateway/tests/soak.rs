//! Tunnel soak against a live key-management network: rekey boundaries,
//! starvation handling, epoch exhaustion, and the nonce-uniqueness audit.

use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use qkdsim_core::rng::StreamRng;
use qkdsim_gateway::{
    establish_pair, Direction, Tunnel, TunnelConfig, TunnelError, TunnelFrame, TunnelState,
};
use qkdsim_kms::{
    KeyId, KmsClient, KmsConfig, KmsNetwork, LinkId, NodeId, Qos, SharedNetwork,
};

fn network_with_keys(blocks: usize) -> (SharedNetwork, StreamRng) {
    let mut rng = StreamRng::new(0x6A7E);
    let mut net = KmsNetwork::new(KmsConfig::default()).unwrap();
    net.add_node(NodeId::from("A")).unwrap();
    net.add_node(NodeId::from("B")).unwrap();
    net.add_link(LinkId::from("ab"), NodeId::from("A"), NodeId::from("B"))
        .unwrap();
    for _ in 0..blocks {
        let mut id = [0u8; 16];
        rng.fill(&mut id);
        let mut bytes = vec![0u8; 32];
        rng.fill(&mut bytes);
        net.push_key(&LinkId::from("ab"), bytes, KeyId(id), 0.0)
            .unwrap();
    }
    (Arc::new(Mutex::new(net)), rng)
}

fn open_session(net: &SharedNetwork) -> qkdsim_kms::Ksid {
    net.lock()
        .unwrap()
        .open_connect(&NodeId::from("A"), &NodeId::from("B"), Qos::default())
        .unwrap()
}

#[test]
fn traffic_across_rekey_boundaries_loses_nothing() {
    let (net, _) = network_with_keys(64);
    let ksid = open_session(&net);
    let config = TunnelConfig::new(ksid);
    let (mut a, mut b) = establish_pair(
        KmsClient::local(Arc::clone(&net), NodeId::from("A")),
        KmsClient::local(Arc::clone(&net), NodeId::from("B")),
        config,
    )
    .unwrap();

    let mut nonces: HashSet<(u32, u64, u8)> = HashSet::new();
    let mut in_flight: Vec<Vec<u8>> = Vec::new();
    let mut opened = 0u64;
    for epoch_round in 0..20 {
        for i in 0..50 {
            let payload = format!("epoch {epoch_round} frame {i}");
            let frame_bytes = a.seal(payload.as_bytes()).unwrap();
            let frame = TunnelFrame::decode(&frame_bytes).unwrap();
            assert!(
                nonces.insert((frame.epoch, frame.seq, Direction::AtoB as u8)),
                "nonce reuse at epoch {} seq {}",
                frame.epoch,
                frame.seq
            );
            in_flight.push(frame_bytes);
        }
        // hold the last few frames across the rekey boundary
        let deliver_now = in_flight.split_off(in_flight.len().min(3));
        for frame in deliver_now {
            b.open(&frame).unwrap();
            opened += 1;
        }
        a.rekey().unwrap();
        b.rekey().unwrap();
        // in-flight frames from the previous epoch still decrypt (grace)
        for frame in in_flight.drain(..) {
            b.open(&frame).unwrap();
            opened += 1;
        }
    }
    assert_eq!(opened, 20 * 50);
    assert_eq!(b.counters().decrypt_failures, 0);
    assert_eq!(b.counters().replays_rejected, 0);
    // epoch 0 + 20 rekeys on each side
    assert_eq!(a.counters().epochs_consumed, 21);
    assert_eq!(a.epoch(), 20);
    // chunks never collide across epochs: ledger clean
    let stats = net.lock().unwrap().ledger_stats();
    assert_eq!(stats.double_delivery_attempts, 0);
    assert_eq!(stats.endpoint_mismatches, 0);
}

#[test]
fn frames_two_epochs_old_are_rejected() {
    let (net, _) = network_with_keys(16);
    let ksid = open_session(&net);
    let (mut a, mut b) = establish_pair(
        KmsClient::local(Arc::clone(&net), NodeId::from("A")),
        KmsClient::local(Arc::clone(&net), NodeId::from("B")),
        TunnelConfig::new(ksid),
    )
    .unwrap();
    let stale = a.seal(b"from epoch 0").unwrap();
    for _ in 0..2 {
        a.rekey().unwrap();
        b.rekey().unwrap();
    }
    assert!(matches!(
        b.open(&stale),
        Err(TunnelError::StaleEpoch { frame: 0, current: 2 })
    ));
}

#[test]
fn starvation_degrades_and_recovers() {
    let (net, mut rng) = network_with_keys(2);
    let ksid = open_session(&net);
    let (mut a, _b) = establish_pair(
        KmsClient::local(Arc::clone(&net), NodeId::from("A")),
        KmsClient::local(Arc::clone(&net), NodeId::from("B")),
        TunnelConfig::new(ksid),
    )
    .unwrap();
    // both blocks consumed by epoch 0 + handshake... epoch 1 still has one
    a.rekey().unwrap();
    // store exhausted now
    let err = a.rekey().unwrap_err();
    assert!(matches!(err, TunnelError::KeyStarvation { epoch: 2, .. }));
    assert_eq!(a.state(), TunnelState::DegradedNoRekey);
    assert_eq!(a.counters().rekey_alarms, 1);
    // traffic continues under the old epoch, never plaintext
    let frame = a.seal(b"still encrypted").unwrap();
    assert_eq!(&frame[0..4], b"QGW1");

    // replenish and retry
    {
        let mut net = net.lock().unwrap();
        let mut id = [0u8; 16];
        rng.fill(&mut id);
        let mut bytes = vec![0u8; 32];
        rng.fill(&mut bytes);
        net.push_key(&LinkId::from("ab"), bytes, KeyId(id), 1.0)
            .unwrap();
    }
    let epoch = a.rekey().unwrap();
    assert_eq!(epoch, 2);
    assert_eq!(a.state(), TunnelState::Active);
}

#[test]
fn epoch_overflow_hard_stops() {
    let (net, _) = network_with_keys(16);
    let ksid = open_session(&net);
    let config = TunnelConfig {
        max_epoch: 3,
        ..TunnelConfig::new(ksid)
    };
    let (mut a, _b) = establish_pair(
        KmsClient::local(Arc::clone(&net), NodeId::from("A")),
        KmsClient::local(Arc::clone(&net), NodeId::from("B")),
        config,
    )
    .unwrap();
    for _ in 0..3 {
        a.rekey().unwrap();
    }
    assert!(matches!(a.rekey(), Err(TunnelError::EpochOverflow(3))));
    assert_eq!(a.state(), TunnelState::HardStopped);
    assert!(matches!(a.seal(b"no"), Err(TunnelError::HardStopped)));
    assert!(matches!(a.rekey(), Err(TunnelError::HardStopped)));
}

#[test]
fn establishment_distinguishes_starvation_from_auth_failure() {
    // empty store: establishment error, not a tag failure
    let (net, _) = network_with_keys(0);
    let ksid = open_session(&net);
    let err = Tunnel::establish(
        KmsClient::local(Arc::clone(&net), NodeId::from("A")),
        TunnelConfig::new(ksid),
        Direction::AtoB,
    )
    .unwrap_err();
    assert!(matches!(err, TunnelError::Establish(_)));
}

#[test]
fn hundred_thousand_frame_roundtrip() {
    let (net, mut rng) = network_with_keys(4);
    let ksid = open_session(&net);
    let (mut a, mut b) = establish_pair(
        KmsClient::local(Arc::clone(&net), NodeId::from("A")),
        KmsClient::local(Arc::clone(&net), NodeId::from("B")),
        TunnelConfig::new(ksid),
    )
    .unwrap();
    let mut payload = [0u8; 48];
    for _ in 0..100_000 {
        rng.fill(&mut payload);
        let frame = a.seal(&payload).unwrap();
        assert_eq!(b.open(&frame).unwrap(), payload);
    }
    assert_eq!(b.counters().decrypt_failures, 0);
}

#[test]
fn no_plaintext_bytes_reach_the_wire() {
    let (net, _) = network_with_keys(16);
    let ksid = open_session(&net);
    let (mut a, _b) = establish_pair(
        KmsClient::local(Arc::clone(&net), NodeId::from("A")),
        KmsClient::local(Arc::clone(&net), NodeId::from("B")),
        TunnelConfig::new(ksid),
    )
    .unwrap();
    let secret = b"TOP-SECRET-MARKER-0xDEADBEEF";
    for _ in 0..50 {
        let frame = a.seal(secret).unwrap();
        assert_eq!(&frame[0..4], b"QGW1", "frame not magic-prefixed");
        assert!(
            !frame.windows(secret.len()).any(|w| w == secret),
            "plaintext visible on the wire"
        );
    }
}
