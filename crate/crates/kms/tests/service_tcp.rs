//! The key-delivery protocol over real sockets: two node endpoints served
//! from the shared network, exercised by framed TCP clients.

use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use qkdsim_core::rng::StreamRng;
use qkdsim_kms::wire::{read_frame, write_frame, Request, Response};
use qkdsim_kms::{
    spawn_tcp_server, GetKeyOutcome, KeyId, KmsClient, KmsConfig, KmsNetwork, LinkId, NodeId, Qos,
};

fn setup() -> (qkdsim_kms::SharedNetwork, StreamRng) {
    let mut rng = StreamRng::new(0x7C9);
    let mut net = KmsNetwork::new(KmsConfig::default()).unwrap();
    net.add_node(NodeId::from("A")).unwrap();
    net.add_node(NodeId::from("B")).unwrap();
    net.add_link(LinkId::from("ab"), NodeId::from("A"), NodeId::from("B"))
        .unwrap();
    for _ in 0..32 {
        let mut id = [0u8; 16];
        rng.fill(&mut id);
        let mut bytes = vec![0u8; 32];
        rng.fill(&mut bytes);
        net.push_key(&LinkId::from("ab"), bytes, KeyId(id), 0.0)
            .unwrap();
    }
    (Arc::new(Mutex::new(net)), rng)
}

#[test]
fn tcp_clients_mirror_local_semantics() {
    let (net, _rng) = setup();
    let listener_a = TcpListener::bind("127.0.0.1:0").unwrap();
    let listener_b = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr_a = listener_a.local_addr().unwrap();
    let addr_b = listener_b.local_addr().unwrap();
    spawn_tcp_server(Arc::clone(&net), NodeId::from("A"), listener_a);
    spawn_tcp_server(Arc::clone(&net), NodeId::from("B"), listener_b);

    let mut client_a = KmsClient::connect_tcp(&addr_a.to_string()).unwrap();
    let mut client_b = KmsClient::connect_tcp(&addr_b.to_string()).unwrap();

    let ksid = client_a
        .open_connect(&NodeId::from("A"), &NodeId::from("B"), Qos::default())
        .unwrap();
    for index in 0..5 {
        let a = match client_a.get_key(&ksid, index).unwrap() {
            GetKeyOutcome::Delivered(c) => c,
            other => panic!("unexpected: {other:?}"),
        };
        let b = match client_b.get_key(&ksid, index).unwrap() {
            GetKeyOutcome::Delivered(c) => c,
            other => panic!("unexpected: {other:?}"),
        };
        assert_eq!(a, b, "index {index}");
    }
    client_a.close(&ksid).unwrap();
    let err = client_b.get_key(&ksid, 5).unwrap_err();
    assert!(matches!(err, qkdsim_kms::KmsError::ClosedSession(_)));
}

#[test]
fn raw_frames_follow_the_documented_shape() {
    let (net, _rng) = setup();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    spawn_tcp_server(Arc::clone(&net), NodeId::from("A"), listener);

    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    let request = Request {
        op: "open_connect".into(),
        source: Some("A".into()),
        destination: Some("B".into()),
        qos: Some(Qos::default().into()),
        ksid: None,
        index: None,
    };
    write_frame(&mut stream, &request).unwrap();
    let response: Response = read_frame(&mut stream).unwrap();
    assert_eq!(response.status, "ok");
    let ksid_hex = response.ksid.expect("ksid issued");
    assert_eq!(ksid_hex.len(), 32);

    // get_key carries the chunk as base64 payload
    let request = Request {
        op: "get_key".into(),
        source: None,
        destination: None,
        qos: None,
        ksid: Some(ksid_hex.clone()),
        index: Some(0),
    };
    write_frame(&mut stream, &request).unwrap();
    let response: Response = read_frame(&mut stream).unwrap();
    assert_eq!(response.status, "ok");
    assert_eq!(response.index, Some(0));
    assert_eq!(response.payload().unwrap().len(), 32);

    // unknown op is an error status, not a dropped connection
    let request = Request {
        op: "defenestrate".into(),
        source: None,
        destination: None,
        qos: None,
        ksid: None,
        index: None,
    };
    write_frame(&mut stream, &request).unwrap();
    let response: Response = read_frame(&mut stream).unwrap();
    assert_eq!(response.status, "error");

    // starvation maps to the "insufficient" status with a retry hint
    let drain = Request {
        op: "open_connect".into(),
        source: Some("A".into()),
        destination: Some("B".into()),
        qos: Some(
            Qos {
                key_chunk_size: 16 * 32,
                ..Qos::default()
            }
            .into(),
        ),
        ksid: None,
        index: None,
    };
    write_frame(&mut stream, &drain).unwrap();
    let response: Response = read_frame(&mut stream).unwrap();
    let big_ksid = response.ksid.expect("second session");
    let request = Request {
        op: "get_key".into(),
        source: None,
        destination: None,
        qos: None,
        ksid: Some(big_ksid.clone()),
        index: Some(0),
    };
    write_frame(&mut stream, &request).unwrap();
    let first: Response = read_frame(&mut stream).unwrap();
    assert_eq!(first.status, "ok", "remaining blocks cover one chunk: {first:?}");
    write_frame(
        &mut stream,
        &Request {
            index: Some(1),
            ..request
        },
    )
    .unwrap();
    let second: Response = read_frame(&mut stream).unwrap();
    assert_eq!(second.status, "insufficient");
    assert!(second.retry_after_ms.is_some());
}
