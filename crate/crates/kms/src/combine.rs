//! Multi-source key combining.
//!
//! All input chunks are XORed together and the result run through an
//! HMAC-SHA256 extract-then-expand KDF with the recipe label as the info
//! string, so any single uncompromised input keeps the output secret and
//! different labels yield independent keys.

use hkdf::Hkdf;
use sha2::Sha256;

use crate::error::KmsError;
use crate::types::CombineRecipe;

/// Combines equal-length chunks into `recipe.out_len` bits of key.
pub fn combine_keys(recipe: &CombineRecipe, chunks: &[Vec<u8>]) -> Result<Vec<u8>, KmsError> {
    recipe.validate()?;
    if chunks.len() != recipe.inputs.len() {
        return Err(KmsError::InvalidRecipe(format!(
            "expected {} chunks, got {}",
            recipe.inputs.len(),
            chunks.len()
        )));
    }
    let out_bytes = recipe.out_bytes();
    let len = chunks[0].len();
    if len < out_bytes || chunks.iter().any(|c| c.len() != len) {
        return Err(KmsError::CombineLengthMismatch);
    }

    let mut ikm = vec![0u8; len];
    for chunk in chunks {
        for (acc, b) in ikm.iter_mut().zip(chunk) {
            *acc ^= b;
        }
    }

    let kdf = Hkdf::<Sha256>::new(None, &ikm);
    let mut out = vec![0u8; out_bytes];
    kdf.expand(recipe.label.as_bytes(), &mut out)
        .map_err(|_| KmsError::InvalidRecipe("output too long for KDF".into()))?;
    Ok(out)
}

/// Deterministic stand-in for an out-of-band key source (e.g. a PQC
/// exchange): both endpoints derive the same stream from a shared seed.
#[derive(Debug, Clone)]
pub struct ExternalKeySource {
    pub id: String,
    state: [u8; 32],
    counter: u64,
}

impl ExternalKeySource {
    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        let id = id.into();
        let mut state = [0u8; 32];
        let kdf = Hkdf::<Sha256>::new(Some(b"external-key-source"), &seed.to_be_bytes());
        kdf.expand(id.as_bytes(), &mut state).expect("32-byte okm");
        Self { id, state, counter: 0 }
    }

    /// Next `n` bytes of the stream.
    pub fn pull(&mut self, n: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let kdf = Hkdf::<Sha256>::new(None, &self.state);
            let mut block = [0u8; 32];
            kdf.expand(&self.counter.to_be_bytes(), &mut block)
                .expect("32-byte okm");
            self.counter += 1;
            out.extend_from_slice(&block);
        }
        out.truncate(n);
        out
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Fast-forwards the stream (journal replay path). Never rewinds.
    pub fn advance_to(&mut self, counter: u64) {
        self.counter = self.counter.max(counter);
    }
}
