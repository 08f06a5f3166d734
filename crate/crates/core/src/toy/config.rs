//! Training and evaluation settings, loadable from TOML-style documents.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ablation::AblationConfig;
use super::model::ModelDims;
use super::task::SyntheticTask;
use super::{Result, ToyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Fixed-step gradient descent.
    Sgd,
    Adam,
}

/// What to do when a CTC target cannot be aligned to the duplicated frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtcInfeasible {
    Error,
    /// Drop the CTC term for that item and count it.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the CTC term; the attention term gets `1 - ctc_weight`.
    pub ctc_weight: f64,
    pub pit_enabled: bool,
    /// Fraction of the run trained on the first-onset order alone before
    /// PIT takes over.
    pub pit_warmup_fraction: f64,
    /// Encoder frame repetition before CTC.
    pub duplication_factor: usize,
    pub ctc_infeasible: CtcInfeasible,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Cosine decay from `learning_rate` down to this fraction of it over
    /// the run; 1 keeps the rate fixed.
    pub final_lr_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Relative frequency of 1-, 2- and 3-speaker training items.
    pub mix_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ctc_weight: 0.3,
            pit_enabled: true,
            pit_warmup_fraction: 0.5,
            duplication_factor: 2,
            ctc_infeasible: CtcInfeasible::Skip,
            optimizer: Optimizer::Adam,
            learning_rate: 0.003,
            final_lr_fraction: 0.05,
            grad_clip: 5.0,
            steps: 20_000,
            batch_size: 8,
            mix_weights: vec![1.0, 2.0],
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ToyError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return fail("ctc_weight must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.pit_warmup_fraction) {
            return fail("pit_warmup_fraction must lie in [0, 1]");
        }
        if self.duplication_factor < 1 {
            return fail("duplication_factor must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return fail("final_lr_fraction must lie in [0, 1]");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return fail("grad_clip must be non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.mix_weights.is_empty()
            || self.mix_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.mix_weights.iter().sum::<f64>() <= 0.0
        {
            return fail("mix_weights must be non-negative with a positive sum");
        }
        Ok(())
    }

    /// Step size at `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }

    /// Whether PIT applies at `step`.
    pub fn pit_active(&self, step: usize) -> bool {
        self.pit_enabled && step as f64 >= self.pit_warmup_fraction * self.steps as f64
    }

    /// Largest speaker count with non-zero training weight.
    pub fn max_train_speakers(&self) -> usize {
        self.mix_weights.iter().rposition(|w| *w > 0.0).map_or(0, |i| i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub items_per_condition: usize,
    pub conditions: Vec<usize>,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            items_per_condition: 200,
            conditions: vec![1, 2, 3],
            max_len: 48,
            seed: 90_001,
        }
    }
}

/// Complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub task: SyntheticTask,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.train.max_train_speakers() > self.task.max_speakers {
            return Err(ToyError::Config("mix_weights name more speakers than the task allows".into()));
        }
        if let Some(&n) = self.eval.conditions.iter().find(|&&n| n == 0 || n > self.task.max_speakers) {
            return Err(ToyError::Config(format!("evaluation condition {n} outside 1..={}", self.task.max_speakers)));
        }
        if self.eval.max_len == 0 {
            return Err(ToyError::Config("eval max_len must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
