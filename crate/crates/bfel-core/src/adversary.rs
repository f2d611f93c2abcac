//! Attack injection and the gradient-exposure privacy metric.
//!
//! Poisoning modes corrupt worker gradients (or labels, upstream at dataset
//! level); Byzantine directives script verifier misbehavior per round; the
//! exposure ratio quantifies how much of the gradient stream an eavesdropper
//! ever sees. Full gradient-inversion attacks are out of scope — exposure is
//! an honest proxy for inference-attack surface, and is labeled as such in
//! run outputs.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::compress::SparseGradient;
use crate::error::{CoreError, CoreResult};
use crate::model::GradientVector;
use crate::rng::derive_rng;
use crate::sign::EntityId;

/// How a poisoning worker corrupts its update stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoisonMode {
    /// Send −g instead of g.
    SignFlip,
    /// Add seeded N(0, σ²) noise per coordinate.
    GaussianNoise { sigma: f64 },
    /// Cyclically permute the shard's labels before training.
    LabelFlip,
}

/// Per-round, per-miner consensus misbehavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaultDirective {
    #[default]
    Honest,
    /// Report the complement of the honest qualified set.
    InvertVerdicts,
    /// Send no verifier response.
    Withhold,
    /// Send two conflicting signed responses.
    Equivocate,
}

impl FaultDirective {
    pub fn parse(s: &str) -> CoreResult<Self> {
        match s {
            "honest" => Ok(FaultDirective::Honest),
            "invert-verdicts" => Ok(FaultDirective::InvertVerdicts),
            "withhold" => Ok(FaultDirective::Withhold),
            "equivocate" => Ok(FaultDirective::Equivocate),
            other => Err(CoreError::InvalidConfig(alloc::format!(
                "unknown fault directive: {other}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FaultDirective::Honest => "honest",
            FaultDirective::InvertVerdicts => "invert-verdicts",
            FaultDirective::Withhold => "withhold",
            FaultDirective::Equivocate => "equivocate",
        }
    }
}

/// Scripted fault schedule: directives per miner, either for every round or
/// for specific rounds (specific rounds win).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultScript {
    all_rounds: BTreeMap<EntityId, FaultDirective>,
    per_round: BTreeMap<(u32, EntityId), FaultDirective>,
}

impl FaultScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.all_rounds.is_empty() && self.per_round.is_empty()
    }

    pub fn set_all_rounds(&mut self, miner: EntityId, directive: FaultDirective) {
        self.all_rounds.insert(miner, directive);
    }

    pub fn set_round(&mut self, round: u32, miner: EntityId, directive: FaultDirective) {
        self.per_round.insert((round, miner), directive);
    }

    pub fn directive(&self, round: u32, miner: &EntityId) -> FaultDirective {
        if let Some(d) = self.per_round.get(&(round, miner.clone())) {
            return *d;
        }
        self.all_rounds.get(miner).copied().unwrap_or_default()
    }

    /// Miners scripted to misbehave in any round.
    pub fn scripted_miners(&self) -> Vec<EntityId> {
        let mut out: Vec<EntityId> = self
            .all_rounds
            .iter()
            .filter(|(_, d)| **d != FaultDirective::Honest)
            .map(|(id, _)| id.clone())
            .collect();
        for ((_, id), d) in &self.per_round {
            if *d != FaultDirective::Honest && !out.contains(id) {
                out.push(id.clone());
            }
        }
        out.sort();
        out
    }
}

/// Attack parameters for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Fraction of workers poisoning their updates; node count by floor.
    pub poison_fraction: f64,
    pub poison_mode: PoisonMode,
    /// Fraction of miners running invert-verdicts; node count by floor.
    pub byzantine_fraction: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { poison_fraction: 0.0, poison_mode: PoisonMode::SignFlip, byzantine_fraction: 0.0 }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> CoreResult<()> {
        for (name, v) in [("poison_fraction", self.poison_fraction), ("byzantine_fraction", self.byzantine_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::InvalidConfig(alloc::format!("{name} must be in [0, 1]")));
            }
        }
        if let PoisonMode::GaussianNoise { sigma } = self.poison_mode {
            if !sigma.is_finite() || sigma < 0.0 {
                return Err(CoreError::InvalidConfig("noise sigma must be nonnegative".to_string()));
            }
        }
        Ok(())
    }

    /// The first ⌊fraction·n⌋ node indices after a seeded shuffle; fixed per
    /// run by the seed.
    pub fn select_nodes(fraction: f64, n: usize, seed: u64, label: &str) -> Vec<usize> {
        let count = libm::floor(fraction * n as f64) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut derive_rng(seed, label, &[]));
        let mut picked: Vec<usize> = order.into_iter().take(count).collect();
        picked.sort_unstable();
        picked
    }
}

/// Applies a gradient-level poison. Label flipping happens upstream at the
/// dataset level, so it leaves the gradient untouched here.
pub fn poison_gradient(
    g: &GradientVector,
    mode: PoisonMode,
    seed: u64,
    worker: u64,
    round: u64,
) -> GradientVector {
    match mode {
        PoisonMode::SignFlip => {
            GradientVector::new(g.values().iter().map(|v| -v).collect()).expect("finite")
        }
        PoisonMode::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                return g.clone();
            }
            let mut rng = derive_rng(seed, "poison-noise", &[worker, round]);
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            GradientVector::new(g.values().iter().map(|v| v + normal.sample(&mut rng)).collect())
                .expect("finite")
        }
        PoisonMode::LabelFlip => g.clone(),
    }
}

/// Fraction of gradient coordinates ever transmitted:
/// `total entries / (dim · slots)`. The quantitative proxy for
/// inference-attack surface; exactly `1 / compression_ratio`.
pub fn exposure_ratio(updates: &[SparseGradient], dim: u32, slots: u64) -> CoreResult<f64> {
    if updates.is_empty() {
        return Err(CoreError::EmptyInput("sparse updates"));
    }
    if slots == 0 || dim == 0 {
        return Err(CoreError::InvalidConfig("dim and slots must be positive".to_string()));
    }
    let total: u64 = updates.iter().map(|u| u.len() as u64).sum();
    Ok(total as f64 / (dim as f64 * slots as f64))
}
