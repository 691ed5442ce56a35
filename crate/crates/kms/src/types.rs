//! Domain identifiers and key-management value types.

use std::fmt;

use crate::error::KmsError;

macro_rules! string_id {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub String);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// A node (site) in the key-management network.
    NodeId
);
string_id!(
    /// A QKD link between two nodes.
    LinkId
);

macro_rules! bytes16_id {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; 16]);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&hex::encode(self.0))
            }
        }

        impl $name {
            pub fn from_hex(s: &str) -> Result<Self, KmsError> {
                let v = hex::decode(s).map_err(|e| KmsError::Wire(e.to_string()))?;
                let arr: [u8; 16] = v
                    .try_into()
                    .map_err(|_| KmsError::Wire("id must be 16 bytes".into()))?;
                Ok(Self(arr))
            }
        }
    };
}

bytes16_id!(
    /// Unique identifier of one stored key block.
    KeyId
);
bytes16_id!(
    /// Key-stream session identifier shared by both endpoints.
    Ksid
);

/// Quality-of-service contract of a key-stream session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Qos {
    /// Bytes delivered per `get_key` call; fixed for the session lifetime.
    pub key_chunk_size: u32,
    /// Upper delivery-rate bound, bits/s (advisory in simulation).
    pub max_bps: u64,
    /// Lower delivery-rate bound the store must be able to sustain.
    pub min_bps: u64,
    /// Session time-to-live, seconds.
    pub ttl: f64,
}

impl Qos {
    pub fn validate(&self) -> Result<(), KmsError> {
        if self.key_chunk_size == 0 {
            return Err(KmsError::InvalidQos("key_chunk_size must be positive"));
        }
        if self.ttl < 0.0 {
            return Err(KmsError::InvalidQos("ttl must be non-negative"));
        }
        Ok(())
    }
}

impl Default for Qos {
    fn default() -> Self {
        Self {
            key_chunk_size: 32,
            max_bps: 0,
            min_bps: 0,
            ttl: 3600.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyStatus {
    Available,
    Reserved,
    Consumed,
}

/// One unit of managed key material.
#[derive(Debug, Clone)]
pub struct KeyBlock {
    pub key_id: KeyId,
    pub bytes: Vec<u8>,
    /// Store scope this block belongs to (link or node pair).
    pub link_id: String,
    pub created_at: f64,
    pub status: KeyStatus,
}

/// Ordered chain of links across trusted nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayPath {
    pub id: String,
    pub hops: Vec<LinkId>,
    /// Terminal endpoints (A, C).
    pub endpoints: (NodeId, NodeId),
    /// Interior trusted nodes, in hop order.
    pub relay_nodes: Vec<NodeId>,
}

/// Key source consumed by a combining recipe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeySource {
    /// Keys from a QKD link directly connecting the recipe endpoints.
    QkdLink(LinkId),
    /// End-to-end keys previously derived between the recipe endpoints
    /// (relay or earlier combines).
    Pair,
    /// External key source (e.g. a post-quantum exchange), modeled as a
    /// seeded stream shared by both endpoints.
    External(String),
}

/// Multi-source key-combination recipe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombineRecipe {
    pub id: String,
    pub endpoints: (NodeId, NodeId),
    pub inputs: Vec<KeySource>,
    /// Domain-separation string fed to the KDF.
    pub label: String,
    /// Output length in bits.
    pub out_len: u32,
}

impl CombineRecipe {
    pub fn validate(&self) -> Result<(), KmsError> {
        if self.inputs.is_empty() {
            return Err(KmsError::InvalidRecipe("at least one input required".into()));
        }
        if self.out_len == 0 || !self.out_len.is_multiple_of(8) {
            return Err(KmsError::InvalidRecipe(
                "out_len must be a positive multiple of 8 bits".into(),
            ));
        }
        Ok(())
    }

    pub fn out_bytes(&self) -> usize {
        (self.out_len / 8) as usize
    }
}

/// Canonical scope string of a pair store; order-independent.
pub fn pair_scope(a: &NodeId, b: &NodeId) -> String {
    let (lo, hi) = if a.0 <= b.0 { (a, b) } else { (b, a) };
    format!("pair:{lo}|{hi}")
}

/// Canonical scope string of a link store.
pub fn link_scope(link: &LinkId) -> String {
    format!("link:{link}")
}

/// Best-effort in-memory scrub of consumed key bytes.
pub fn zeroize(bytes: &mut [u8]) {
    for b in bytes.iter_mut() {
        // volatile write so the scrub is not optimized away
        unsafe { std::ptr::write_volatile(b, 0) };
    }
    std::sync::atomic::compiler_fence(std::sync::atomic::Ordering::SeqCst);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_roundtrip_hex() {
        let id = KeyId([0xAB; 16]);
        let parsed = KeyId::from_hex(&id.to_string()).unwrap();
        assert_eq!(id, parsed);
        assert!(Ksid::from_hex("zz").is_err());
        assert!(Ksid::from_hex("aabb").is_err());
    }

    #[test]
    fn pair_scope_is_order_independent() {
        let a = NodeId::from("STW");
        let b = NodeId::from("IOF");
        assert_eq!(pair_scope(&a, &b), pair_scope(&b, &a));
    }

    #[test]
    fn zeroize_clears() {
        let mut v = vec![7u8; 64];
        zeroize(&mut v);
        assert!(v.iter().all(|&b| b == 0));
    }

    #[test]
    fn qos_validation() {
        assert!(Qos::default().validate().is_ok());
        let bad = Qos {
            key_chunk_size: 0,
            ..Qos::default()
        };
        assert!(bad.validate().is_err());
    }
}
