//! Reference learning model: a one-hidden-layer MLP (tanh) with a
//! multinomial-logistic fallback, flattened into a single parameter vector.
//!
//! All arithmetic is scalar f64 through `libm`, so results are identical
//! whether the crate is built for a `std` host or a bare target. Operations
//! are pure: they never mutate their inputs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::data::Batch;
use crate::error::{CoreError, CoreResult};
use crate::rng::derive_rng;

/// Architecture of the reference model over a flat parameter vector.
///
/// Layouts (row-major):
/// * `Logistic`: `W [classes × input]`, `b [classes]`
/// * `Mlp`: `W1 [hidden × input]`, `b1 [hidden]`, `W2 [classes × hidden]`,
///   `b2 [classes]`
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSpec {
    Logistic { input_dim: usize, classes: usize },
    Mlp { input_dim: usize, hidden: usize, classes: usize },
}

impl ModelSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            ModelSpec::Logistic { input_dim, classes } => classes * input_dim + classes,
            ModelSpec::Mlp { input_dim, hidden, classes } => {
                hidden * input_dim + hidden + classes * hidden + classes
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            ModelSpec::Logistic { input_dim, .. } => input_dim,
            ModelSpec::Mlp { input_dim, .. } => input_dim,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            ModelSpec::Logistic { classes, .. } => classes,
            ModelSpec::Mlp { classes, .. } => classes,
        }
    }

    fn check(&self) -> CoreResult<()> {
        if self.input_dim() == 0 || self.classes() == 0 {
            return Err(CoreError::InvalidConfig("model dims must be positive".into()));
        }
        if let ModelSpec::Mlp { hidden, .. } = *self {
            if hidden == 0 {
                return Err(CoreError::InvalidConfig("hidden width must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Flat parameter vector ω of the learned model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    values: Vec<f64>,
}

impl ModelParameters {
    /// Wraps a raw vector, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> CoreResult<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("model parameters"));
        }
        Ok(Self { values })
    }

    /// Seeded init: uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> CoreResult<Self> {
        Self::init_scaled(spec, seed, 1.0)
    }

    /// [`ModelParameters::init`] with the weight bound scaled by `scale`;
    /// zero gives an all-zero (uniform-prediction) start.
    pub fn init_scaled(spec: ModelSpec, seed: u64, scale: f64) -> CoreResult<Self> {
        spec.check()?;
        if !scale.is_finite() || scale < 0.0 {
            return Err(CoreError::InvalidConfig("init scale must be nonnegative".into()));
        }
        let mut rng = derive_rng(seed, "model-init", &[]);
        let mut values = vec![0.0; spec.param_count()];
        let mut fill = |range: core::ops::Range<usize>, fan_in: usize, rng: &mut rand_chacha::ChaCha12Rng| {
            let bound = scale / libm::sqrt(fan_in as f64);
            for v in &mut values[range] {
                *v = if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 };
            }
        };
        match spec {
            ModelSpec::Logistic { input_dim, classes } => {
                fill(0..classes * input_dim, input_dim, &mut rng);
            }
            ModelSpec::Mlp { input_dim, hidden, classes } => {
                fill(0..hidden * input_dim, input_dim, &mut rng);
                let w2 = hidden * input_dim + hidden;
                fill(w2..w2 + classes * hidden, hidden, &mut rng);
            }
        }
        Ok(Self { values })
    }

    pub fn zeros(spec: ModelSpec) -> CoreResult<Self> {
        spec.check()?;
        Ok(Self { values: vec![0.0; spec.param_count()] })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Digest of the canonical encoding (`dim` u32 LE, then f64 LE values).
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"bfel.model");
        hasher.update((self.values.len() as u32).to_le_bytes());
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Flat gradient vector, same layout as [`ModelParameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> CoreResult<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("gradient"));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.values.iter().map(|v| v * v).sum())
    }
}

/// Hyperparameters of a worker's local training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn validate(&self, dataset_len: usize) -> CoreResult<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(CoreError::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.batch_size > dataset_len {
            return Err(CoreError::InvalidConfig(
                "batch size exceeds dataset size".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(CoreError::InvalidConfig("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_dims(spec: ModelSpec, model: &ModelParameters, batch: &Batch<'_>) -> CoreResult<()> {
    if model.dim() != spec.param_count() {
        return Err(CoreError::DimensionMismatch {
            expected: spec.param_count(),
            got: model.dim(),
        });
    }
    if batch.feature_dim() != spec.input_dim() {
        return Err(CoreError::DimensionMismatch {
            expected: spec.input_dim(),
            got: batch.feature_dim(),
        });
    }
    if batch.num_classes() as usize > spec.classes() {
        return Err(CoreError::InvalidConfig(
            "dataset has more classes than the model emits".into(),
        ));
    }
    if batch.is_empty() {
        return Err(CoreError::EmptyInput("batch"));
    }
    Ok(())
}

/// Writes class scores for one sample into `logits`; returns hidden
/// activations for the MLP so backprop can reuse them.
fn forward_sample(
    spec: ModelSpec,
    w: &[f64],
    x: &[f64],
    logits: &mut [f64],
    hidden_buf: &mut [f64],
) {
    match spec {
        ModelSpec::Logistic { input_dim, classes } => {
            let bias = classes * input_dim;
            for c in 0..classes {
                let row = &w[c * input_dim..(c + 1) * input_dim];
                let mut z = w[bias + c];
                for (wi, xi) in row.iter().zip(x) {
                    z += wi * xi;
                }
                logits[c] = z;
            }
        }
        ModelSpec::Mlp { input_dim, hidden, classes } => {
            let b1 = hidden * input_dim;
            let w2 = b1 + hidden;
            let b2 = w2 + classes * hidden;
            for j in 0..hidden {
                let row = &w[j * input_dim..(j + 1) * input_dim];
                let mut z = w[b1 + j];
                for (wi, xi) in row.iter().zip(x) {
                    z += wi * xi;
                }
                hidden_buf[j] = libm::tanh(z);
            }
            for c in 0..classes {
                let row = &w[w2 + c * hidden..w2 + (c + 1) * hidden];
                let mut z = w[b2 + c];
                for (wi, hi) in row.iter().zip(hidden_buf.iter()) {
                    z += wi * hi;
                }
                logits[c] = z;
            }
        }
    }
}

/// Numerically stable `log(sum(exp(z)))`.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| libm::exp(z - m)).sum();
    m + libm::log(sum)
}

/// Mean cross-entropy loss of the model over the batch.
pub fn forward_loss(spec: ModelSpec, model: &ModelParameters, batch: &Batch<'_>) -> CoreResult<f64> {
    check_dims(spec, model, batch)?;
    let hidden = match spec {
        ModelSpec::Mlp { hidden, .. } => hidden,
        _ => 0,
    };
    let mut logits = vec![0.0; spec.classes()];
    let mut hidden_buf = vec![0.0; hidden];
    let mut total = 0.0;
    for (x, y) in batch.samples() {
        forward_sample(spec, model.values(), x, &mut logits, &mut hidden_buf);
        total += log_sum_exp(&logits) - logits[y as usize];
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(CoreError::NonFinite("loss"));
    }
    // Cross-entropy of a softmax is nonnegative; tiny negative values can
    // only come from rounding, clamp them away.
    Ok(loss.max(0.0))
}

/// Analytic gradient of [`forward_loss`] with respect to every parameter.
pub fn gradient(spec: ModelSpec, model: &ModelParameters, batch: &Batch<'_>) -> CoreResult<GradientVector> {
    check_dims(spec, model, batch)?;
    let w = model.values();
    let mut g = vec![0.0; model.dim()];
    let classes = spec.classes();
    let mut logits = vec![0.0; classes];
    let inv_n = 1.0 / batch.len() as f64;

    match spec {
        ModelSpec::Logistic { input_dim, classes } => {
            let bias = classes * input_dim;
            for (x, y) in batch.samples() {
                forward_sample(spec, w, x, &mut logits, &mut []);
                let lse = log_sum_exp(&logits);
                for c in 0..classes {
                    let mut dz = libm::exp(logits[c] - lse);
                    if c == y as usize {
                        dz -= 1.0;
                    }
                    dz *= inv_n;
                    let row = &mut g[c * input_dim..(c + 1) * input_dim];
                    for (gi, xi) in row.iter_mut().zip(x) {
                        *gi += dz * xi;
                    }
                    g[bias + c] += dz;
                }
            }
        }
        ModelSpec::Mlp { input_dim, hidden, classes } => {
            let b1 = hidden * input_dim;
            let w2 = b1 + hidden;
            let b2 = w2 + classes * hidden;
            let mut hidden_buf = vec![0.0; hidden];
            let mut dz2 = vec![0.0; classes];
            let mut da = vec![0.0; hidden];
            for (x, y) in batch.samples() {
                forward_sample(spec, w, x, &mut logits, &mut hidden_buf);
                let lse = log_sum_exp(&logits);
                for c in 0..classes {
                    let mut d = libm::exp(logits[c] - lse);
                    if c == y as usize {
                        d -= 1.0;
                    }
                    dz2[c] = d * inv_n;
                }
                da.iter_mut().for_each(|v| *v = 0.0);
                for c in 0..classes {
                    let d = dz2[c];
                    let row = &mut g[w2 + c * hidden..w2 + (c + 1) * hidden];
                    let wrow = &w[w2 + c * hidden..w2 + (c + 1) * hidden];
                    for j in 0..hidden {
                        row[j] += d * hidden_buf[j];
                        da[j] += d * wrow[j];
                    }
                    g[b2 + c] += d;
                }
                for j in 0..hidden {
                    let dz1 = da[j] * (1.0 - hidden_buf[j] * hidden_buf[j]);
                    let row = &mut g[j * input_dim..(j + 1) * input_dim];
                    for (gi, xi) in row.iter_mut().zip(x) {
                        *gi += dz1 * xi;
                    }
                    g[b1 + j] += dz1;
                }
            }
        }
    }
    GradientVector::new(g)
}

/// One SGD step: `ω ← ω − η·g`.
pub fn sgd_step(model: &ModelParameters, g: &GradientVector, learning_rate: f64) -> CoreResult<ModelParameters> {
    if model.dim() != g.dim() {
        return Err(CoreError::DimensionMismatch { expected: model.dim(), got: g.dim() });
    }
    if !learning_rate.is_finite() || learning_rate <= 0.0 {
        return Err(CoreError::InvalidConfig("learning rate must be positive".into()));
    }
    let values = model
        .values()
        .iter()
        .zip(g.values())
        .map(|(w, gi)| w - learning_rate * gi)
        .collect();
    ModelParameters::new(values)
}

/// Fraction of samples whose argmax prediction matches the label.
///
/// Ties between equal scores resolve to the smallest class index.
pub fn evaluate_accuracy(spec: ModelSpec, model: &ModelParameters, test: &Batch<'_>) -> CoreResult<f64> {
    check_dims(spec, model, test)?;
    let hidden = match spec {
        ModelSpec::Mlp { hidden, .. } => hidden,
        _ => 0,
    };
    let mut logits = vec![0.0; spec.classes()];
    let mut hidden_buf = vec![0.0; hidden];
    let mut correct = 0usize;
    for (x, y) in test.samples() {
        forward_sample(spec, model.values(), x, &mut logits, &mut hidden_buf);
        let mut best = 0usize;
        for (c, &z) in logits.iter().enumerate().skip(1) {
            if z > logits[best] {
                best = c;
            }
        }
        if best == y as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
