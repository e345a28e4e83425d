use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::AeModel;
use super::train::{train, TrainConfig};
use crate::error::{config_err, Result};
use crate::nn::Tensor;
use crate::rng;

/// Ranges sampled by [`random_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub batch_sizes: Vec<usize>,
    /// Log-uniform learning rate bounds.
    pub lr_min: f64,
    pub lr_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub m_choices: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            batch_sizes: vec![25, 50, 100],
            lr_min: 1e-4,
            lr_max: 1e-2,
            beta_min: 0.1,
            beta_max: 0.3,
            m_choices: vec![1, 2, 4],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() || self.m_choices.is_empty() {
            return Err(config_err!("search space has an empty choice list"));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(config_err!("bad learning rate range [{}, {}]", self.lr_min, self.lr_max));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max < 1.0) {
            return Err(config_err!("bad beta range [{}, {}]", self.beta_min, self.beta_max));
        }
        Ok(())
    }

    /// Trial `index`'s configuration; fields not searched come from `base`.
    pub fn sample(&self, base: &TrainConfig, seed: u64, index: usize) -> TrainConfig {
        let mut r = rng::stream(seed, "search", index as u64);
        let batch_size = self.batch_sizes[r.random_range(0..self.batch_sizes.len())];
        let lr = if self.lr_min == self.lr_max {
            self.lr_min
        } else {
            (r.random_range(self.lr_min.ln()..self.lr_max.ln())).exp()
        };
        let beta = if self.beta_min == self.beta_max {
            self.beta_min
        } else {
            r.random_range(self.beta_min..self.beta_max)
        };
        let m = self.m_choices[r.random_range(0..self.m_choices.len())];
        TrainConfig {
            batch_size,
            lr: lr.clamp(self.lr_min, self.lr_max),
            beta,
            m,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: TrainConfig,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best_index: usize,
    pub best: TrainConfig,
    pub trials: Vec<Trial>,
}

/// Train each sampled configuration for `epochs` and keep the one with the
/// lowest validation NMSE; ties go to the lowest trial index. `build`
/// creates the model for a configuration.
pub fn random_search(
    space: &SearchSpace,
    base: &TrainConfig,
    trials: usize,
    epochs: usize,
    train_set: &Tensor,
    val_set: &Tensor,
    mut build: impl FnMut(&TrainConfig) -> Result<AeModel>,
) -> Result<SearchResult> {
    space.validate()?;
    if trials == 0 {
        return Err(config_err!("random search needs at least one trial"));
    }
    let mut out = Vec::with_capacity(trials);
    for index in 0..trials {
        let mut cfg = space.sample(base, base.seed, index);
        cfg.max_epochs = epochs;
        cfg.patience = base.patience.min(epochs.max(1));
        let model = build(&cfg)?;
        let res = train(model, train_set, val_set, &cfg, None)?;
        out.push(Trial {
            index,
            config: cfg,
            score: res.best_val_nmse,
        });
    }
    let best_index = out
        .iter()
        .fold(0, |b, t| if t.score < out[b].score { t.index } else { b });
    let mut best = out[best_index].config.clone();
    best.max_epochs = base.max_epochs;
    best.patience = base.patience;
    Ok(SearchResult {
        best_index,
        best,
        trials: out,
    })
}
