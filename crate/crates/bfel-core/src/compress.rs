//! Gradient compression: clipping, momentum-corrected accumulation, top-ρ%
//! sparsification with residual buffering, and sparse aggregation.
//!
//! Per round a worker clips its raw gradient, folds it into a momentum buffer
//! `u ← m·u + g` and a residual buffer `v ← v + u`, then emits every
//! coordinate whose accumulated magnitude reaches the round threshold (the
//! magnitude of the ⌈ρ%·dim⌉-th largest residual entry). Emitted coordinates
//! are zeroed in *both* buffers; everything else stays buffered until its
//! accumulation grows past a later round's threshold. With ρ=100 and m=0 the
//! pipeline reduces to plain dense SGD, which is the exactly-testable point
//! of its no-accuracy-loss claim.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, CoreResult};
use crate::model::GradientVector;

/// Sparsification and accumulation settings shared by all workers of a task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionConfig {
    /// Percentage of coordinates targeted per round, in (0, 100].
    /// ρ=0.3 means 0.3% of coordinates; ρ=100 transmits everything.
    pub rho_percent: f64,
    /// Momentum factor m in [0, 1).
    pub momentum: f64,
    /// L2 clip applied to the raw per-round gradient; `None` disables.
    pub clip_norm: Option<f64>,
}

impl CompressionConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if !(self.rho_percent > 0.0 && self.rho_percent <= 100.0) {
            return Err(CoreError::InvalidConfig("rho_percent must be in (0, 100]".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::InvalidConfig("momentum must be in [0, 1)".to_string()));
        }
        if let Some(c) = self.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(CoreError::InvalidConfig("clip_norm must be positive".to_string()));
            }
        }
        Ok(())
    }

    /// Coordinates targeted per round: ⌈ρ% · dim⌉, clamped to [1, dim].
    pub fn target_rank(&self, dim: usize) -> usize {
        let k = libm::ceil(self.rho_percent / 100.0 * dim as f64) as usize;
        k.clamp(1, dim)
    }
}

/// Scales `g` to L2 norm at most `clip`.
pub fn clip_gradient(g: &GradientVector, clip: f64) -> CoreResult<GradientVector> {
    if !clip.is_finite() || clip <= 0.0 {
        return Err(CoreError::InvalidConfig("clip norm must be positive".to_string()));
    }
    let norm = g.l2_norm();
    if !norm.is_finite() {
        return Err(CoreError::NonFinite("gradient norm"));
    }
    if norm <= clip {
        return Ok(g.clone());
    }
    let scale = clip / norm;
    GradientVector::new(g.values().iter().map(|v| v * scale).collect())
}

/// Per-worker momentum buffer `u`, residual buffer `v`, and round counter.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorState {
    momentum: Vec<f64>,
    residual: Vec<f64>,
    round: u32,
    dirty: bool,
}

impl CompressorState {
    pub fn new(dim: usize) -> Self {
        Self {
            momentum: alloc::vec![0.0; dim],
            residual: alloc::vec![0.0; dim],
            round: 0,
            dirty: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.residual.len()
    }

    /// Rounds accumulated so far.
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }

    pub fn momentum_buffer(&self) -> &[f64] {
        &self.momentum
    }

    /// Folds one (already clipped) round gradient in:
    /// `u ← m·u + g`, `v ← v + u`, `t ← t+1`.
    pub fn accumulate(&mut self, g: &GradientVector, cfg: &CompressionConfig) -> CoreResult<()> {
        cfg.validate()?;
        if g.dim() != self.dim() {
            return Err(CoreError::DimensionMismatch { expected: self.dim(), got: g.dim() });
        }
        let m = cfg.momentum;
        for ((u, v), gi) in self.momentum.iter_mut().zip(&mut self.residual).zip(g.values()) {
            *u = m * *u + gi;
            *v += *u;
        }
        self.round += 1;
        self.dirty = true;
        Ok(())
    }

    /// Emits every coordinate whose residual magnitude reaches this round's
    /// threshold and zeroes it in both buffers.
    pub fn sparsify(&mut self, cfg: &CompressionConfig) -> CoreResult<SparseGradient> {
        cfg.validate()?;
        if !self.dirty {
            return Err(CoreError::ProtocolViolation(
                "sparsify called before any accumulation this round".to_string(),
            ));
        }
        let dim = self.dim();
        let k = cfg.target_rank(dim);
        let mut magnitudes: Vec<f64> = self.residual.iter().map(|v| libm::fabs(*v)).collect();
        // k-th largest magnitude = element at index k-1 of the descending order.
        let (_, thr, _) = magnitudes.select_nth_unstable_by(k - 1, |a, b| {
            b.partial_cmp(a).expect("magnitudes are finite")
        });
        let threshold = *thr;

        let mut entries = Vec::with_capacity(k);
        for (i, v) in self.residual.iter_mut().enumerate() {
            if *v != 0.0 && libm::fabs(*v) >= threshold {
                entries.push((i as u32, *v));
                *v = 0.0;
                self.momentum[i] = 0.0;
            }
        }
        self.dirty = false;
        SparseGradient::new(entries, dim as u32, self.round)
    }
}

/// Index/value pairs actually transmitted for one round; the unit of
/// communication accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    entries: Vec<(u32, f64)>,
    dim: u32,
    round: u32,
}

impl SparseGradient {
    /// `entries` must be sorted by strictly increasing index, in range, with
    /// finite nonzero values.
    pub fn new(entries: Vec<(u32, f64)>, dim: u32, round: u32) -> CoreResult<Self> {
        if dim == 0 {
            return Err(CoreError::InvalidConfig("sparse gradient dim must be positive".to_string()));
        }
        let mut prev: Option<u32> = None;
        for &(idx, val) in &entries {
            if idx >= dim {
                return Err(CoreError::InvalidConfig("sparse index out of range".to_string()));
            }
            if let Some(p) = prev {
                if idx <= p {
                    return Err(CoreError::InvalidConfig("sparse indices must strictly increase".to_string()));
                }
            }
            if !val.is_finite() || val == 0.0 {
                return Err(CoreError::InvalidConfig("sparse values must be finite and nonzero".to_string()));
            }
            prev = Some(idx);
        }
        Ok(Self { entries, dim, round })
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dense reconstruction with zeros at unsent coordinates.
    pub fn densify(&self) -> GradientVector {
        let mut values = alloc::vec![0.0; self.dim as usize];
        for &(i, v) in &self.entries {
            values[i as usize] = v;
        }
        GradientVector::new(values).expect("sparse values are finite")
    }

    /// Canonical wire layout: dim u32 LE, round u32 LE, entry count u32 LE,
    /// then sorted (index u32 LE, value f64 LE) pairs.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for &(i, v) in &self.entries {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        12 + 12 * self.entries.len()
    }

    pub fn decode(bytes: &[u8]) -> CoreResult<Self> {
        let take_u32 = |b: &[u8], at: usize| -> CoreResult<u32> {
            b.get(at..at + 4)
                .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
                .ok_or_else(|| CoreError::Decode("sparse gradient truncated".to_string()))
        };
        let dim = take_u32(bytes, 0)?;
        let round = take_u32(bytes, 4)?;
        let count = take_u32(bytes, 8)? as usize;
        if bytes.len() != 12 + 12 * count {
            return Err(CoreError::Decode("sparse gradient length mismatch".to_string()));
        }
        let mut entries = Vec::with_capacity(count);
        for e in 0..count {
            let at = 12 + 12 * e;
            let idx = take_u32(bytes, at)?;
            let val = f64::from_le_bytes(
                bytes[at + 4..at + 12].try_into().expect("8 bytes"),
            );
            entries.push((idx, val));
        }
        Self::new(entries, dim, round)
    }
}

/// Dense sum of sparse updates sharing one dim and round; unsent coordinates
/// contribute zero.
pub fn aggregate_sparse(updates: &[SparseGradient], dim: u32) -> CoreResult<GradientVector> {
    if updates.is_empty() {
        return Err(CoreError::EmptyInput("sparse updates"));
    }
    let round = updates[0].round;
    for u in updates {
        if u.dim != dim {
            return Err(CoreError::DimensionMismatch { expected: dim as usize, got: u.dim as usize });
        }
        if u.round != round {
            return Err(CoreError::RoundMismatch { expected: round, got: u.round });
        }
    }
    let mut values = alloc::vec![0.0; dim as usize];
    for u in updates {
        for &(i, v) in &u.entries {
            values[i as usize] += v;
        }
    }
    GradientVector::new(values)
}

/// Dense-to-sparse transmission ratio: `(dim · slots) / total entries`, where
/// `slots` counts the dense gradient transmissions the updates replace (rounds
/// for a single worker stream, rounds × workers for a whole federation).
pub fn compression_ratio(updates: &[SparseGradient], dim: u32, slots: u64) -> CoreResult<f64> {
    if updates.is_empty() {
        return Err(CoreError::EmptyInput("sparse updates"));
    }
    if slots == 0 {
        return Err(CoreError::InvalidConfig("slots must be at least 1".to_string()));
    }
    let total: u64 = updates.iter().map(|u| u.len() as u64).sum();
    if total == 0 {
        return Err(CoreError::EmptyInput("transmitted entries"));
    }
    Ok((dim as f64 * slots as f64) / total as f64)
}
