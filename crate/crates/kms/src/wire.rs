//! Key-delivery wire protocol: length-prefixed UTF-8 JSON frames.
//!
//! Every frame is a 4-byte big-endian length followed by one JSON object.
//! Requests carry `op` plus the op's arguments; responses carry `status`
//! ("ok", "insufficient", "closed", "error") plus result fields, with key
//! chunks in `payload_b64`.

use std::io::{Read, Write};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::KmsError;
use crate::types::Qos;

/// Maximum accepted frame body, bytes.
pub const MAX_FRAME_LEN: u32 = 1 << 20;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QosWire {
    pub key_chunk_size: u32,
    pub max_bps: u64,
    pub min_bps: u64,
    pub ttl: f64,
}

impl From<Qos> for QosWire {
    fn from(q: Qos) -> Self {
        Self {
            key_chunk_size: q.key_chunk_size,
            max_bps: q.max_bps,
            min_bps: q.min_bps,
            ttl: q.ttl,
        }
    }
}

impl From<QosWire> for Qos {
    fn from(q: QosWire) -> Self {
        Self {
            key_chunk_size: q.key_chunk_size,
            max_bps: q.max_bps,
            min_bps: q.min_bps,
            ttl: q.ttl,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Request {
    pub op: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub destination: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qos: Option<QosWire>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ksid: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Response {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ksid: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload_b64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retry_after_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn ok() -> Self {
        Self {
            status: "ok".into(),
            ksid: None,
            index: None,
            payload_b64: None,
            retry_after_ms: None,
            error: None,
        }
    }

    pub fn error(msg: impl Into<String>) -> Self {
        Self {
            status: "error".into(),
            error: Some(msg.into()),
            ksid: None,
            index: None,
            payload_b64: None,
            retry_after_ms: None,
        }
    }

    pub fn payload(&self) -> Result<Vec<u8>, KmsError> {
        let b64 = self
            .payload_b64
            .as_ref()
            .ok_or_else(|| KmsError::Wire("response carries no payload".into()))?;
        BASE64
            .decode(b64)
            .map_err(|e| KmsError::Wire(e.to_string()))
    }

    pub fn with_payload(mut self, bytes: &[u8]) -> Self {
        self.payload_b64 = Some(BASE64.encode(bytes));
        self
    }
}

pub fn write_frame<W: Write, T: Serialize>(writer: &mut W, message: &T) -> Result<(), KmsError> {
    let body = serde_json::to_vec(message).map_err(|e| KmsError::Wire(e.to_string()))?;
    if body.len() as u32 > MAX_FRAME_LEN {
        return Err(KmsError::Wire("frame too large".into()));
    }
    writer.write_all(&(body.len() as u32).to_be_bytes())?;
    writer.write_all(&body)?;
    writer.flush()?;
    Ok(())
}

pub fn read_frame<R: Read, T: for<'de> Deserialize<'de>>(reader: &mut R) -> Result<T, KmsError> {
    let mut len_buf = [0u8; 4];
    reader.read_exact(&mut len_buf)?;
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME_LEN {
        return Err(KmsError::Wire(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    reader.read_exact(&mut body)?;
    serde_json::from_slice(&body).map_err(|e| KmsError::Wire(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip() {
        let req = Request {
            op: "get_key".into(),
            source: None,
            destination: None,
            qos: None,
            ksid: Some("ab".repeat(16)),
            index: Some(3),
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &req).unwrap();
        // 4-byte BE length prefix
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap());
        assert_eq!(len as usize, buf.len() - 4);
        let back: Request = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(req, back);
    }

    #[test]
    fn absent_fields_are_omitted() {
        let resp = Response::ok().with_payload(b"key");
        let json = serde_json::to_string(&resp).unwrap();
        assert!(!json.contains("error"));
        assert!(!json.contains("retry_after_ms"));
        assert_eq!(resp.payload().unwrap(), b"key");
    }

    #[test]
    fn oversize_frame_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(MAX_FRAME_LEN + 1).to_be_bytes());
        let err = read_frame::<_, Request>(&mut buf.as_slice());
        assert!(err.is_err());
    }
}
