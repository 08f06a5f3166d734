//! Seeded mini-batch training on freshly sampled items.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use super::config::{Optimizer, ToyConfig, TrainConfig};
use super::loss::loss;
use super::model::ToyModelParams;
use super::task::ToyItem;
use super::{Result, ToyError};
use crate::codec::{enumerate_permutation_targets, DEFAULT_PERMUTATION_CAP};
use crate::mixture::item_rng;

/// Offsets the data and initialization streams derived from one seed.
const INIT_STREAM: u64 = 0x1a17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub ctc_loss: f64,
    pub att_loss: f64,
    /// Selected permutation of each batch item.
    pub perm_index: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ToyModelParams,
    pub log: Vec<TrainLogEntry>,
    /// Items whose CTC term was dropped as infeasible.
    pub ctc_skipped: usize,
}

/// Initial parameters for a config.
pub fn initial_params(config: &ToyConfig) -> Result<ToyModelParams> {
    ToyModelParams::init(&config.model, &config.task, config.train.seed ^ INIT_STREAM)
}

/// The training batch for `step`; a pure function of the config.
pub fn training_batch(config: &ToyConfig, step: usize) -> Result<Vec<ToyItem>> {
    let weights = WeightedIndex::new(&config.train.mix_weights).map_err(|e| ToyError::Config(e.to_string()))?;
    let mut rng = item_rng(config.train.seed, step as u64);
    (0..config.train.batch_size)
        .map(|_| config.task.sample_item(weights.sample(&mut rng) + 1, &mut rng))
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains from the config's seeded initialization.
pub fn train(config: &ToyConfig) -> Result<TrainOutcome> {
    train_from(config, initial_params(config)?, |_| {})
}

/// Trains from `params`, calling `on_step` after every logged step.
pub fn train_from<F: FnMut(&TrainLogEntry)>(config: &ToyConfig, mut params: ToyModelParams, mut on_step: F) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let mut adam = Adam::new(params.data.len());
    let mut log = Vec::with_capacity(tc.steps);
    let mut ctc_skipped = 0;
    for step in 0..tc.steps {
        let batch = training_batch(config, step)?;
        let mut grad = params.zeros_like();
        let mut entry = TrainLogEntry {
            step,
            loss: 0.0,
            ctc_loss: 0.0,
            att_loss: 0.0,
            perm_index: Vec::with_capacity(batch.len()),
        };
        let scale = 1.0 / batch.len() as f64;
        let step_config = TrainConfig {
            pit_enabled: tc.pit_active(step),
            ..tc.clone()
        };
        for item in &batch {
            let targets = enumerate_permutation_targets(&item.transcripts, DEFAULT_PERMUTATION_CAP)?;
            let out = loss(&params, &item.frames, &targets, &step_config)?;
            entry.loss += scale * out.total;
            entry.att_loss += scale * out.att_loss;
            entry.ctc_loss += scale * out.ctc_loss;
            entry.perm_index.push(out.perm_index);
            ctc_skipped += usize::from(out.ctc_skipped);
            for (g, x) in grad.iter_mut().zip(&out.grad) {
                *g += scale * x;
            }
        }
        if !entry.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ToyError::Divergence { step });
        }
        if tc.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > tc.grad_clip {
                let f = tc.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= f);
            }
        }
        let lr = tc.learning_rate_at(step);
        match tc.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.data.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => adam.update(&mut params.data, &grad, lr),
        }
        if params.data.iter().any(|p| !p.is_finite()) {
            return Err(ToyError::Divergence { step });
        }
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        log,
        ctc_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::model::ModelDims;
    use crate::toy::task::SyntheticTask;

    fn small(steps: usize, pit: bool) -> ToyConfig {
        let mut c = ToyConfig {
            task: SyntheticTask {
                vocab_size: 5,
                feature_dim: 6,
                ..Default::default()
            },
            model: ModelDims {
                hidden: 8,
                embed: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        c.train.steps = steps;
        c.train.batch_size = 4;
        c.train.pit_enabled = pit;
        c.train.pit_warmup_fraction = 0.0;
        c
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let c = small(0, true);
        let out = train(&c).unwrap();
        assert_eq!(out.params, initial_params(&c).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let c = small(5, true);
        let a = train(&c).unwrap();
        let b = train(&c).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn pit_changes_the_trajectory() {
        let a = train(&small(30, true)).unwrap();
        let b = train(&small(30, false)).unwrap();
        assert_ne!(a.log, b.log);
    }

    #[test]
    fn divergence_reports_step() {
        let mut c = small(3, true);
        c.train.optimizer = Optimizer::Sgd;
        c.train.grad_clip = 0.0;
        c.train.learning_rate = 1e300;
        assert!(matches!(train(&c), Err(ToyError::Divergence { .. })));
    }

    #[test]
    fn batches_follow_mix_weights() {
        let mut c = small(0, true);
        c.train.mix_weights = vec![0.0, 1.0];
        for step in 0..5 {
            assert!(training_batch(&c, step).unwrap().iter().all(|i| i.speakers() == 2));
        }
    }
}
