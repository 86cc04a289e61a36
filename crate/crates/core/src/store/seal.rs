//! AES-256-GCM envelope for values at rest and for the bus transport.
//!
//! Wire layout of a [`SealedPayload`]:
//!
//! ```text
//! ┌────────────┬──────────┬───────────┬─────────────────────┐
//! │ key_id len │  key_id  │   nonce   │  ciphertext + tag   │
//! │   1 byte   │ N bytes  │ 12 bytes  │  len(plain) + 16    │
//! └────────────┴──────────┴───────────┴─────────────────────┘
//! ```
//!
//! The key id is bound as associated data, so swapping it fails
//! authentication.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use aes_gcm::aead::{Aead, AeadCore, KeyInit, OsRng, Payload as AeadPayload};
use aes_gcm::{Aes256Gcm, Nonce};

/// Environment variable holding the store key as 64 hex characters.
pub const STORE_KEY_ENV: &str = "IPS_STORE_KEY";
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SealError {
    #[error("key not configured: {0}")]
    KeyNotConfigured(String),
    #[error("authentication failed")]
    Authentication,
    #[error("malformed sealed payload: {0}")]
    Malformed(&'static str),
    #[error("invalid key material: {0}")]
    BadKey(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedPayload {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub key_id: String,
}

impl SealedPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        let kid = self.key_id.as_bytes();
        let mut out = Vec::with_capacity(1 + kid.len() + NONCE_LEN + self.ciphertext.len());
        out.push(kid.len() as u8);
        out.extend_from_slice(kid);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SealError> {
        let (&kid_len, rest) = bytes.split_first().ok_or(SealError::Malformed("empty"))?;
        let kid_len = kid_len as usize;
        if rest.len() < kid_len + NONCE_LEN + TAG_LEN {
            return Err(SealError::Malformed("truncated"));
        }
        let key_id = std::str::from_utf8(&rest[..kid_len])
            .map_err(|_| SealError::Malformed("key id not utf-8"))?
            .to_string();
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&rest[kid_len..kid_len + NONCE_LEN]);
        Ok(SealedPayload { nonce, ciphertext: rest[kid_len + NONCE_LEN..].to_vec(), key_id })
    }
}

/// Pre-shared 256-bit keys by id.
#[derive(Clone, Default)]
pub struct Keyring {
    keys: HashMap<String, Aes256Gcm>,
}

impl fmt::Debug for Keyring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut ids: Vec<&String> = self.keys.keys().collect();
        ids.sort();
        f.debug_struct("Keyring").field("key_ids", &ids).finish()
    }
}

impl Keyring {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_key(key_id: impl Into<String>, key: [u8; 32]) -> Self {
        let mut ring = Keyring::new();
        ring.insert(key_id, key);
        ring
    }

    pub fn insert(&mut self, key_id: impl Into<String>, key: [u8; 32]) {
        let key_id = key_id.into();
        assert!(key_id.len() <= u8::MAX as usize, "key id longer than 255 bytes");
        let cipher = Aes256Gcm::new_from_slice(&key).expect("32-byte key");
        self.keys.insert(key_id, cipher);
    }

    pub fn insert_hex(&mut self, key_id: impl Into<String>, hex_key: &str) -> Result<(), SealError> {
        let key = parse_hex_key(hex_key)?;
        self.insert(key_id, key);
        Ok(())
    }

    /// Reads a hex key from the named environment variable.
    pub fn from_env(var: &str, key_id: &str) -> Result<Self, SealError> {
        let hex_key = std::env::var(var).map_err(|_| SealError::KeyNotConfigured(format!("{key_id} (${var} unset)")))?;
        let mut ring = Keyring::new();
        ring.insert_hex(key_id, &hex_key)?;
        Ok(ring)
    }

    /// Reads a hex key from a file (surrounding whitespace ignored).
    pub fn from_key_file(path: &Path, key_id: &str) -> Result<Self, SealError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SealError::KeyNotConfigured(format!("{key_id} ({}: {e})", path.display())))?;
        let mut ring = Keyring::new();
        ring.insert_hex(key_id, &text)?;
        Ok(ring)
    }

    pub fn generate_key() -> [u8; 32] {
        let key = Aes256Gcm::generate_key(&mut OsRng);
        let mut out = [0u8; 32];
        out.copy_from_slice(&key);
        out
    }

    pub fn contains(&self, key_id: &str) -> bool {
        self.keys.contains_key(key_id)
    }

    pub fn seal(&self, plaintext: &[u8], key_id: &str) -> Result<SealedPayload, SealError> {
        let cipher = self.keys.get(key_id).ok_or_else(|| SealError::KeyNotConfigured(key_id.to_string()))?;
        let nonce = Aes256Gcm::generate_nonce(&mut OsRng);
        let ciphertext = cipher
            .encrypt(&nonce, AeadPayload { msg: plaintext, aad: key_id.as_bytes() })
            .map_err(|_| SealError::Authentication)?;
        let mut n = [0u8; NONCE_LEN];
        n.copy_from_slice(&nonce);
        Ok(SealedPayload { nonce: n, ciphertext, key_id: key_id.to_string() })
    }

    pub fn open(&self, sealed: &SealedPayload) -> Result<Vec<u8>, SealError> {
        let cipher =
            self.keys.get(&sealed.key_id).ok_or_else(|| SealError::KeyNotConfigured(sealed.key_id.clone()))?;
        cipher
            .decrypt(
                Nonce::from_slice(&sealed.nonce),
                AeadPayload { msg: &sealed.ciphertext, aad: sealed.key_id.as_bytes() },
            )
            .map_err(|_| SealError::Authentication)
    }
}

fn parse_hex_key(hex_key: &str) -> Result<[u8; 32], SealError> {
    let trimmed = hex_key.trim();
    if trimmed.len() != 64 {
        return Err(SealError::BadKey(format!("expected 64 hex characters, got {}", trimmed.len())));
    }
    let bytes = hex::decode(trimmed).map_err(|e| SealError::BadKey(e.to_string()))?;
    let mut key = [0u8; 32];
    key.copy_from_slice(&bytes);
    Ok(key)
}

/// A keyring plus the id new values are sealed under.
#[derive(Clone, Debug)]
pub struct Sealer {
    pub keyring: std::sync::Arc<Keyring>,
    pub key_id: String,
}

impl Sealer {
    pub fn new(keyring: Keyring, key_id: impl Into<String>) -> Result<Self, SealError> {
        let key_id = key_id.into();
        if !keyring.contains(&key_id) {
            return Err(SealError::KeyNotConfigured(key_id));
        }
        Ok(Sealer { keyring: std::sync::Arc::new(keyring), key_id })
    }

    /// Fresh random key, for benchmarks and tests.
    pub fn ephemeral() -> Self {
        Sealer::new(Keyring::with_key("ephemeral", Keyring::generate_key()), "ephemeral").expect("key present")
    }

    pub fn seal(&self, plaintext: &[u8]) -> Result<SealedPayload, SealError> {
        self.keyring.seal(plaintext, &self.key_id)
    }

    pub fn open(&self, sealed: &SealedPayload) -> Result<Vec<u8>, SealError> {
        self.keyring.open(sealed)
    }
}
