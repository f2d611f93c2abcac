//! Simulated identities and signatures.
//!
//! Real PKI is out of scope: the trust authority is a passive in-process
//! registry and "signatures" are deterministic keyed hashes it can recompute.
//! That is enough for what the simulation needs — binding messages to
//! registered senders and making any tamper detectable — while staying
//! swappable for a real scheme behind [`SignatureScheme`].

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, CoreResult};

/// Opaque entity identifier, unique per federation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl core::fmt::Display for EntityId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

/// Protocol role of a registered entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Worker,
    Miner,
    Publisher,
    Buyer,
}

pub type PublicKey = [u8; 32];
pub type SecretKey = [u8; 32];

/// A keyed-hash "signature": 32 bytes bound to (secret, message).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 32]);

/// Registered identity as seen by the rest of the protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identity {
    pub entity_id: EntityId,
    pub public_key: PublicKey,
    pub role: Role,
}

/// Pluggable signing primitive.
pub trait SignatureScheme {
    fn public_key(&self, secret: &SecretKey) -> PublicKey;
    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Signature;
}

/// Default scheme: SHA-256 over domain-separated (secret, message).
#[derive(Debug, Clone, Copy, Default)]
pub struct KeyedHash;

impl SignatureScheme for KeyedHash {
    fn public_key(&self, secret: &SecretKey) -> PublicKey {
        let mut h = Sha256::new();
        h.update(b"bfel.pub");
        h.update(secret);
        h.finalize().into()
    }

    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Signature {
        let mut h = Sha256::new();
        h.update(b"bfel.sig");
        h.update(secret);
        h.update(message);
        Signature(h.finalize().into())
    }
}

/// Per-entity credential handed out at registration; the entity keeps the
/// secret, the authority keeps a copy for verification.
#[derive(Debug, Clone)]
pub struct Credential {
    pub identity: Identity,
    pub secret: SecretKey,
}

/// The simulated global trust authority: registration gate plus verifier.
#[derive(Debug, Clone)]
pub struct Authority<S: SignatureScheme = KeyedHash> {
    scheme: S,
    seed: u64,
    registry: BTreeMap<EntityId, (Identity, SecretKey)>,
}

impl Authority<KeyedHash> {
    pub fn new(seed: u64) -> Self {
        Self::with_scheme(seed, KeyedHash)
    }
}

impl<S: SignatureScheme> Authority<S> {
    pub fn with_scheme(seed: u64, scheme: S) -> Self {
        Self { scheme, seed, registry: BTreeMap::new() }
    }

    fn derive_secret(&self, entity_id: &EntityId) -> SecretKey {
        let mut h = Sha256::new();
        h.update(b"bfel.secret");
        h.update(self.seed.to_le_bytes());
        h.update(entity_id.as_str().as_bytes());
        h.finalize().into()
    }

    /// Registers a new entity, generating its key pair. Duplicates rejected.
    pub fn register(&mut self, entity_id: EntityId, role: Role) -> CoreResult<Credential> {
        if self.registry.contains_key(&entity_id) {
            return Err(CoreError::DuplicateIdentity(entity_id.0));
        }
        let secret = self.derive_secret(&entity_id);
        let identity = Identity {
            entity_id: entity_id.clone(),
            public_key: self.scheme.public_key(&secret),
            role,
        };
        self.registry.insert(entity_id, (identity.clone(), secret));
        Ok(Credential { identity, secret })
    }

    pub fn is_registered(&self, entity_id: &EntityId) -> bool {
        self.registry.contains_key(entity_id)
    }

    pub fn identity(&self, entity_id: &EntityId) -> Option<&Identity> {
        self.registry.get(entity_id).map(|(id, _)| id)
    }

    /// Signs on behalf of a registered entity (the authority is the key
    /// manager in this simulation).
    pub fn sign(&self, entity_id: &EntityId, message: &[u8]) -> CoreResult<Signature> {
        let (_, secret) = self
            .registry
            .get(entity_id)
            .ok_or_else(|| CoreError::UnknownIdentity(entity_id.0.clone()))?;
        Ok(self.scheme.sign(secret, message))
    }

    /// True iff `signature` binds `message` to the registered `entity_id`.
    pub fn verify(&self, entity_id: &EntityId, message: &[u8], signature: &Signature) -> bool {
        match self.registry.get(entity_id) {
            Some((_, secret)) => self.scheme.sign(secret, message) == *signature,
            None => false,
        }
    }

    /// All registered entities, in id order.
    pub fn entities(&self) -> impl Iterator<Item = &Identity> {
        self.registry.values().map(|(id, _)| id)
    }
}

/// Hex rendering for digests and keys in human-readable exports.
pub fn to_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use core::fmt::Write;
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Parses lowercase/uppercase hex into bytes.
pub fn from_hex(s: &str) -> CoreResult<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return Err(CoreError::Decode("odd-length hex string".into()));
    }
    let nibble = |c: u8| -> CoreResult<u8> {
        match c {
            b'0'..=b'9' => Ok(c - b'0'),
            b'a'..=b'f' => Ok(c - b'a' + 10),
            b'A'..=b'F' => Ok(c - b'A' + 10),
            _ => Err(CoreError::Decode("invalid hex digit".into())),
        }
    };
    s.as_bytes()
        .chunks(2)
        .map(|pair| Ok(nibble(pair[0])? << 4 | nibble(pair[1])?))
        .collect()
}
