//! Deterministic building blocks for blockchain-empowered federated edge
//! learning (BFEL) at desk scale.
//!
//! The crate is `no_std` + `alloc`: everything in here is pure state-machine
//! and numeric code with no clocks, threads, or IO. A federation run is a
//! function of `(config, seed, fault script)` and nothing else, which is what
//! makes trace digests, chain files, and metrics reproducible byte-for-byte.
//!
//! Module map:
//!
//! * [`model`] — flat-parameter MLP / multinomial-logistic model: loss,
//!   analytic gradients, SGD steps, accuracy.
//! * [`data`] — in-memory datasets, seeded shuffling/sharding, synthetic
//!   Gaussian-blob generation.
//! * [`compress`] — top-ρ% gradient sparsification with momentum correction,
//!   residual buffering, clipping, and sparse aggregation.
//! * [`sign`] — simulated identity registry and keyed-hash signatures.
//! * [`ledger`] — hash-chained subchains, Merkle trees, main-chain anchoring,
//!   and trade records.
//! * [`consensus`] — the Proof-of-Verifying committee state machine: delegate
//!   election, quality gating, cross-verification, 2/3 commits, slashing.
//! * [`netsim`] — discrete-event message simulation with byte-exact size
//!   accounting and a communication cost model.
//! * [`adversary`] — poisoning modes, Byzantine fault scripts, and the
//!   gradient exposure metric.
//! * [`federation`] — the end-to-end scenario runner tying it all together.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
#[macro_use]
extern crate std;

pub mod adversary;
pub mod codec;
pub mod compress;
pub mod consensus;
pub mod data;
pub mod error;
pub mod federation;
pub mod ledger;
pub mod model;
pub mod netsim;
pub mod rng;
pub mod sign;

pub use error::CoreError;
