//! The TOML experiment configuration.
//!
//! Every field has a default mirroring the reference evaluation setup
//! (η=0.001, B=128, E=1000, θ=0.05, ρ=0.3, 10 workers + 11 miners per
//! training subchain, 2 publishers, 0.5 s consensus delay), so a minimal
//! config only needs the fields it changes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use bfel_core::adversary::{AttackConfig, FaultDirective, FaultScript, PoisonMode};
use bfel_core::compress::CompressionConfig;
use bfel_core::federation::{miner_id, ModelKind, RunConfig, Scenario};
use bfel_core::netsim::CostModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// `fel`, `fel-gcs`, or `bfel-gcs`.
    pub scenario: String,
    pub federation: FederationSection,
    pub training: TrainingSection,
    pub dataset: DatasetSection,
    pub compression: CompressionSection,
    pub policy: PolicySection,
    pub cost_model: CostSection,
    pub attack: AttackSection,
    pub trading: TradingSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            scenario: "bfel-gcs".to_string(),
            federation: FederationSection::default(),
            training: TrainingSection::default(),
            dataset: DatasetSection::default(),
            compression: CompressionSection::default(),
            policy: PolicySection::default(),
            cost_model: CostSection::default(),
            attack: AttackSection::default(),
            trading: TradingSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub workers_per_subchain: usize,
    pub miners_per_subchain: usize,
    pub publishers: usize,
    pub min_deposit: u64,
    pub anchor_period: u64,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            workers_per_subchain: 10,
            miners_per_subchain: 11,
            publishers: 2,
            min_deposit: 10,
            anchor_period: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global federation rounds (training epochs E).
    pub epochs: usize,
    /// `mlp` or `logistic`.
    pub model: String,
    pub hidden: usize,
    pub init_scale: f64,
    pub warmup_rounds: usize,
    pub metrics_eval_samples: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 1000,
            model: "mlp".to_string(),
            hidden: 64,
            init_scale: 1.0,
            warmup_rounds: 0,
            metrics_eval_samples: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// `blobs` (synthetic), `csv` (documented schema), or `mnist` (IDX dir).
    pub kind: String,
    pub path: String,
    pub samples: usize,
    pub features: usize,
    pub classes: u32,
    /// Coordinates on which synthetic class means differ.
    pub informative: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub train_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: "blobs".to_string(),
            path: String::new(),
            samples: 10_000,
            features: 784,
            classes: 10,
            informative: 32,
            center_scale: 3.0,
            noise_sigma: 1.0,
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionSection {
    pub rho_percent: f64,
    pub momentum: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for CompressionSection {
    fn default() -> Self {
        Self { rho_percent: 0.3, momentum: 0.9, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub theta: f64,
    pub verify_samples: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { theta: 0.05, verify_samples: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    pub bytes_per_ms: u64,
    pub base_latency_ms: u64,
    pub consensus_delay_ms: u64,
    /// Max seeded per-message latency jitter; 0 keeps transit deterministic
    /// in message size alone.
    pub jitter_ms: u64,
}

impl Default for CostSection {
    fn default() -> Self {
        Self { bytes_per_ms: 1_250, base_latency_ms: 5, consensus_delay_ms: 500, jitter_ms: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub poison_fraction: f64,
    /// `sign-flip`, `gaussian-noise`, or `label-flip`.
    pub poison_mode: String,
    pub noise_sigma: f64,
    pub byzantine_fraction: f64,
    /// Optional fault-script file (per-round, per-miner directives).
    pub fault_script: String,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            poison_fraction: 0.0,
            poison_mode: "sign-flip".to_string(),
            noise_sigma: 1.0,
            byzantine_fraction: 0.0,
            fault_script: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TradingSection {
    pub enabled: bool,
    pub price: u64,
}

impl Default for TradingSection {
    fn default() -> Self {
        Self { enabled: true, price: 100 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    fn check(&self) -> Result<()> {
        if !matches!(self.scenario.as_str(), "fel" | "fel-gcs" | "bfel-gcs") {
            bail!("scenario must be fel, fel-gcs, or bfel-gcs (got {})", self.scenario);
        }
        if !matches!(self.training.model.as_str(), "mlp" | "logistic") {
            bail!("training.model must be mlp or logistic (got {})", self.training.model);
        }
        if !matches!(self.dataset.kind.as_str(), "blobs" | "csv" | "mnist") {
            bail!("dataset.kind must be blobs, csv, or mnist (got {})", self.dataset.kind);
        }
        if matches!(self.dataset.kind.as_str(), "csv" | "mnist") && self.dataset.path.is_empty() {
            bail!("dataset.path is required for kind {}", self.dataset.kind);
        }
        if !(0.0..1.0).contains(&self.dataset.train_fraction) || self.dataset.train_fraction == 0.0 {
            bail!("dataset.train_fraction must be in (0, 1)");
        }
        if !matches!(self.attack.poison_mode.as_str(), "sign-flip" | "gaussian-noise" | "label-flip") {
            bail!("attack.poison_mode must be sign-flip, gaussian-noise, or label-flip");
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        Scenario::parse(&self.scenario).expect("checked at parse time")
    }

    /// Assembles the core run configuration, resolving the fault script
    /// (explicit file plus byzantine_fraction auto-selection) relative to
    /// `config_dir`.
    pub fn to_run_config(&self, config_dir: &Path) -> Result<RunConfig> {
        let scenario = Scenario::parse(&self.scenario).map_err(|e| anyhow::anyhow!("{e}"))?;
        let model = match self.training.model.as_str() {
            "logistic" => ModelKind::Logistic,
            _ => ModelKind::Mlp { hidden: self.training.hidden },
        };
        let poison_mode = match self.attack.poison_mode.as_str() {
            "gaussian-noise" => PoisonMode::GaussianNoise { sigma: self.attack.noise_sigma },
            "label-flip" => PoisonMode::LabelFlip,
            _ => PoisonMode::SignFlip,
        };
        let mut fault_script = FaultScript::new();
        if !self.attack.fault_script.is_empty() {
            let path = resolve(config_dir, &self.attack.fault_script);
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading fault script {}", path.display()))?;
            fault_script = parse_fault_script(&text)?;
        }
        // byzantine_fraction scripts invert-verdicts for a seeded selection
        // of each publisher's miners, on every round.
        if self.attack.byzantine_fraction > 0.0 {
            for p in 0..self.federation.publishers {
                let picked = AttackConfig::select_nodes(
                    self.attack.byzantine_fraction,
                    self.federation.miners_per_subchain,
                    bfel_core::federation::derive_seed(self.seed, "byzantine-miners", &[p as u64]),
                    "byzantine-miners",
                );
                for m in picked {
                    fault_script.set_all_rounds(miner_id(p, m), FaultDirective::InvertVerdicts);
                }
            }
        }

        Ok(RunConfig {
            seed: self.seed,
            scenario,
            workers: self.federation.workers_per_subchain,
            miners: self.federation.miners_per_subchain,
            publishers: self.federation.publishers,
            min_deposit: self.federation.min_deposit,
            anchor_period: self.federation.anchor_period,
            learning_rate: self.training.learning_rate,
            batch_size: self.training.batch_size,
            rounds: self.training.epochs,
            model,
            init_scale: self.training.init_scale,
            warmup_rounds: self.training.warmup_rounds,
            metrics_eval_samples: self.training.metrics_eval_samples,
            compression: CompressionConfig {
                rho_percent: self.compression.rho_percent,
                momentum: self.compression.momentum,
                clip_norm: if self.compression.clip_norm > 0.0 {
                    Some(self.compression.clip_norm)
                } else {
                    None
                },
            },
            theta: self.policy.theta,
            verify_samples: self.policy.verify_samples,
            cost: CostModel {
                bytes_per_ms: self.cost_model.bytes_per_ms,
                base_latency_ms: self.cost_model.base_latency_ms,
                consensus_delay_ms: self.cost_model.consensus_delay_ms,
                jitter_ms: self.cost_model.jitter_ms,
            },
            attack: AttackConfig {
                poison_fraction: self.attack.poison_fraction,
                poison_mode,
                byzantine_fraction: self.attack.byzantine_fraction,
            },
            fault_script,
            trading_enabled: self.trading.enabled,
            trade_price: self.trading.price,
        })
    }

    /// Sets one sweepable parameter by name.
    pub fn set_parameter(&mut self, name: &str, value: &str) -> Result<()> {
        match name {
            "rho" | "rho_percent" => self.compression.rho_percent = value.parse()?,
            "momentum" => self.compression.momentum = value.parse()?,
            "clip_norm" => self.compression.clip_norm = value.parse()?,
            "theta" => self.policy.theta = value.parse()?,
            "learning_rate" => self.training.learning_rate = value.parse()?,
            "epochs" => self.training.epochs = value.parse()?,
            "batch_size" => self.training.batch_size = value.parse()?,
            "seed" => self.seed = value.parse()?,
            other => bail!("parameter {other} is not sweepable (try rho, momentum, clip_norm, theta, learning_rate, epochs, batch_size, seed)"),
        }
        Ok(())
    }
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        dir.join(path)
    }
}

/// Fault-script format: one directive per non-comment line,
/// `round,miner_id,directive` with `*` for all rounds, e.g.
///
/// ```text
/// # miner p0-m03 lies from the start
/// *,p0-m03,invert-verdicts
/// 5,p0-m07,withhold
/// ```
pub fn parse_fault_script(text: &str) -> Result<FaultScript> {
    let mut script = FaultScript::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            bail!("fault script line {}: expected round,miner_id,directive", lineno + 1);
        }
        let directive = FaultDirective::parse(parts[2])
            .map_err(|e| anyhow::anyhow!("fault script line {}: {e}", lineno + 1))?;
        let miner = bfel_core::sign::EntityId::new(parts[1]);
        if parts[0] == "*" {
            script.set_all_rounds(miner, directive);
        } else {
            let round: u32 = parts[0]
                .parse()
                .with_context(|| format!("fault script line {}: bad round", lineno + 1))?;
            script.set_round(round, miner, directive);
        }
    }
    Ok(script)
}
