//! Error type shared across the core modules.

use alloc::string::String;
use thiserror::Error;

/// Errors produced by core operations.
///
/// Failures that are protocol *outcomes* (an update being rejected, a round
/// failing to commit, a chain validation locating a bad block) are encoded in
/// return values, not here; this enum is for contract violations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("duplicate identity: {0}")]
    DuplicateIdentity(String),
    #[error("unknown identity: {0}")]
    UnknownIdentity(String),
    #[error("invalid signature from {0}")]
    InvalidSignature(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("ledger error: {0}")]
    Ledger(String),
    #[error("round mismatch: expected {expected}, got {got}")]
    RoundMismatch { expected: u32, got: u32 },
    #[error("access denied for {entity} on chain {chain}")]
    AccessDenied { entity: String, chain: String },
    #[error("federation halted: {0}")]
    FederationHalt(String),
    #[error("event scheduled in the past: deliver_at {deliver_at} < now {now}")]
    TimeTravel { deliver_at: u64, now: u64 },
    #[error("decode error: {0}")]
    Decode(String),
}

pub type CoreResult<T> = core::result::Result<T, CoreError>;
