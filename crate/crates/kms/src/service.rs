//! Key-delivery service endpoints.
//!
//! Each node of the network exposes the session operations to its local
//! consumers (gateways). [`KmsClient`] speaks either to an in-process
//! network handle (simulation default) or over TCP with the wire frames
//! from [`crate::wire`]; [`serve_connection`]/[`spawn_tcp_server`]
//! implement the server side of the same protocol.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use crate::error::KmsError;
use crate::network::KmsNetwork;
use crate::types::{Ksid, NodeId, Qos};
use crate::wire::{read_frame, write_frame, Request, Response};

/// Shared handle to the in-process network.
pub type SharedNetwork = Arc<Mutex<KmsNetwork>>;

/// Outcome of a `get_key` call, mirroring the wire statuses.
#[derive(Debug, Clone, PartialEq)]
pub enum GetKeyOutcome {
    Delivered(Vec<u8>),
    /// Store cannot serve the chunk yet; retry after the hint (ms).
    Insufficient { retry_after_ms: u64 },
}

fn dispatch(net: &SharedNetwork, node: &NodeId, request: &Request) -> Response {
    let mut net = net.lock().expect("kms network lock");
    match request.op.as_str() {
        "open_connect" => {
            let source = NodeId(request.source.clone().unwrap_or_else(|| node.0.clone()));
            let destination = match &request.destination {
                Some(d) => NodeId(d.clone()),
                None => return Response::error("open_connect requires destination"),
            };
            let qos: Qos = match request.qos.clone() {
                Some(q) => q.into(),
                None => Qos::default(),
            };
            match net.open_connect(&source, &destination, qos) {
                Ok(ksid) => {
                    let mut resp = Response::ok();
                    resp.ksid = Some(ksid.to_string());
                    resp
                }
                Err(e @ KmsError::InsufficientKeyMaterial { retry_after, .. }) => Response {
                    status: "insufficient".into(),
                    retry_after_ms: Some((retry_after * 1000.0) as u64),
                    error: Some(e.to_string()),
                    ksid: None,
                    index: None,
                    payload_b64: None,
                },
                Err(e) => Response::error(e.to_string()),
            }
        }
        "get_key" => {
            let ksid = match request.ksid.as_deref().map(Ksid::from_hex) {
                Some(Ok(k)) => k,
                _ => return Response::error("get_key requires a valid ksid"),
            };
            let index = match request.index {
                Some(i) => i,
                None => return Response::error("get_key requires index"),
            };
            match net.get_key(node, &ksid, index) {
                Ok(chunk) => {
                    let mut resp = Response::ok().with_payload(&chunk);
                    resp.index = Some(index);
                    resp.ksid = Some(ksid.to_string());
                    resp
                }
                Err(e @ KmsError::InsufficientKeyMaterial { retry_after, .. }) => Response {
                    status: "insufficient".into(),
                    retry_after_ms: Some((retry_after * 1000.0) as u64),
                    error: Some(e.to_string()),
                    ksid: Some(ksid.to_string()),
                    index: Some(index),
                    payload_b64: None,
                },
                Err(e @ KmsError::ClosedSession(_)) => Response {
                    status: "closed".into(),
                    error: Some(e.to_string()),
                    ksid: Some(ksid.to_string()),
                    index: Some(index),
                    payload_b64: None,
                    retry_after_ms: None,
                },
                Err(e) => Response::error(e.to_string()),
            }
        }
        "close" => {
            let ksid = match request.ksid.as_deref().map(Ksid::from_hex) {
                Some(Ok(k)) => k,
                _ => return Response::error("close requires a valid ksid"),
            };
            match net.close(&ksid) {
                Ok(()) => Response::ok(),
                Err(e) => Response::error(e.to_string()),
            }
        }
        other => Response::error(format!("unknown op {other}")),
    }
}

/// Serves one framed connection until EOF.
pub fn serve_connection<S: Read + Write>(
    net: &SharedNetwork,
    node: &NodeId,
    stream: &mut S,
) -> Result<(), KmsError> {
    loop {
        let request: Request = match read_frame(stream) {
            Ok(r) => r,
            Err(KmsError::Journal(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                return Ok(())
            }
            Err(e) => return Err(e),
        };
        let response = dispatch(net, node, &request);
        write_frame(stream, &response)?;
    }
}

/// Accept loop for one node's TCP endpoint; one thread per connection.
pub fn spawn_tcp_server(
    net: SharedNetwork,
    node: NodeId,
    listener: TcpListener,
) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let net = Arc::clone(&net);
            let node = node.clone();
            std::thread::spawn(move || {
                let _ = serve_connection(&net, &node, &mut stream);
            });
        }
    })
}

/// Client side of the key-delivery protocol, bound to one node identity.
#[derive(Debug)]
pub enum KmsClient {
    /// Direct in-process calls (simulation default).
    Local { net: SharedNetwork, node: NodeId },
    /// Framed TCP connection to the node's service endpoint.
    Tcp { stream: TcpStream },
}

impl KmsClient {
    pub fn local(net: SharedNetwork, node: NodeId) -> Self {
        Self::Local { net, node }
    }

    pub fn connect_tcp(addr: &str) -> Result<Self, KmsError> {
        Ok(Self::Tcp {
            stream: TcpStream::connect(addr)?,
        })
    }

    fn roundtrip(&mut self, request: &Request) -> Result<Response, KmsError> {
        match self {
            KmsClient::Local { net, node } => Ok(dispatch(net, node, request)),
            KmsClient::Tcp { stream } => {
                write_frame(stream, request)?;
                read_frame(stream)
            }
        }
    }

    pub fn open_connect(
        &mut self,
        source: &NodeId,
        destination: &NodeId,
        qos: Qos,
    ) -> Result<Ksid, KmsError> {
        let request = Request {
            op: "open_connect".into(),
            source: Some(source.0.clone()),
            destination: Some(destination.0.clone()),
            qos: Some(qos.into()),
            ksid: None,
            index: None,
        };
        let resp = self.roundtrip(&request)?;
        match resp.status.as_str() {
            "ok" => Ksid::from_hex(resp.ksid.as_deref().unwrap_or_default()),
            "insufficient" => Err(KmsError::InsufficientKeyMaterial {
                scope: "route".into(),
                available: 0,
                needed: 0,
                retry_after: resp.retry_after_ms.unwrap_or(1000) as f64 / 1000.0,
            }),
            _ => Err(KmsError::Wire(resp.error.unwrap_or_else(|| "open failed".into()))),
        }
    }

    pub fn get_key(&mut self, ksid: &Ksid, index: u64) -> Result<GetKeyOutcome, KmsError> {
        let request = Request {
            op: "get_key".into(),
            source: None,
            destination: None,
            qos: None,
            ksid: Some(ksid.to_string()),
            index: Some(index),
        };
        let resp = self.roundtrip(&request)?;
        match resp.status.as_str() {
            "ok" => Ok(GetKeyOutcome::Delivered(resp.payload()?)),
            "insufficient" => Ok(GetKeyOutcome::Insufficient {
                retry_after_ms: resp.retry_after_ms.unwrap_or(1000),
            }),
            "closed" => Err(KmsError::ClosedSession(*ksid)),
            _ => Err(KmsError::Wire(
                resp.error.unwrap_or_else(|| "get_key failed".into()),
            )),
        }
    }

    pub fn close(&mut self, ksid: &Ksid) -> Result<(), KmsError> {
        let request = Request {
            op: "close".into(),
            source: None,
            destination: None,
            qos: None,
            ksid: Some(ksid.to_string()),
            index: None,
        };
        let resp = self.roundtrip(&request)?;
        match resp.status.as_str() {
            "ok" => Ok(()),
            _ => Err(KmsError::Wire(resp.error.unwrap_or_else(|| "close failed".into()))),
        }
    }
}
