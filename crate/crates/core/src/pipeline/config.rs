use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{ArchConfig, SearchSpace, TrainConfig, Variant};
use crate::channel::ScenarioConfig;
use crate::error::{config_err, Result};
use crate::ndq::MAX_UNIT_BITS;
use crate::vq::codebook_sizing;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent: usize,
    pub channels: usize,
    /// Groups of the encoder's and decoder's inner convolutions.
    pub groups: usize,
    pub binary_fc: bool,
    /// Nested dropout parameter; absent means `0.0005·256/M`.
    pub nd_p: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent: 16,
            channels: 8,
            groups: 1,
            binary_fc: false,
            nd_p: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    /// Feedback budgets in bits; empty means `M, 2M, 3M`.
    pub budgets: Vec<usize>,
    /// Deepest scalar ladder level, further capped at `log2` of the number
    /// of design latents.
    pub b_max: u8,
    /// VQ codeword length.
    pub m: usize,
    /// Magnitude pruning fraction; 0 disables pruning.
    pub prune_q: f64,
    pub finetune: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            budgets: Vec::new(),
            b_max: 8,
            m: 2,
            prune_q: 0.0,
            finetune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// 0 skips the search and trains with `[train]` as given.
    pub trials: usize,
    pub epochs: usize,
    pub space: SearchSpace,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            trials: 0,
            epochs: 5,
            space: SearchSpace::default(),
        }
    }
}

/// One experiment. The run seed replaces the seeds inside `scenario` and
/// `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub out_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub quantizer: QuantizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            variant: Variant::Nd,
            out_dir: PathBuf::from("run"),
            scenario: ScenarioConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            quantizer: QuantizerConfig::default(),
        }
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("{}", e.message()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err!("cannot read {}: {}", path.display(), e))?;
        Self::from_toml(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    /// Replace the run seed with `value` (the `CSIQ_SEED` override).
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| config_err!("CSIQ_SEED={:?} is not an unsigned integer", v))?;
        }
        Ok(self)
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            seed: self.seed,
            ..self.scenario.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            m: if self.variant == Variant::Vq { self.quantizer.m } else { self.train.m },
            ..self.train.clone()
        }
    }

    pub fn budgets(&self) -> Vec<usize> {
        if self.quantizer.budgets.is_empty() {
            (1..=3).map(|k| k * self.model.latent).collect()
        } else {
            self.quantizer.budgets.clone()
        }
    }

    /// `b_max` capped so every ladder level has enough design samples.
    pub fn effective_b_max(&self) -> u8 {
        let cap = usize::BITS - 1 - self.scenario.n_val.max(1).leading_zeros();
        self.quantizer.b_max.min(cap as u8)
    }

    pub fn arch(&self, vq_k: usize) -> ArchConfig {
        ArchConfig {
            variant: self.variant,
            latent: self.model.latent,
            channels: self.model.channels,
            groups: self.model.groups,
            binary_fc: self.model.binary_fc,
            nd_p: self.model.nd_p,
            vq_m: self.quantizer.m,
            vq_k,
        }
    }

    /// Short row label such as `nd+g2+binary+prune0.4+ft`.
    pub fn label(&self) -> String {
        let mut s = self.variant.name().to_string();
        if self.model.groups > 1 {
            s += &format!("+g{}", self.model.groups);
        }
        if self.model.binary_fc {
            s += "+binary";
        }
        if self.quantizer.prune_q > 0.0 {
            s += &format!("+prune{}", self.quantizer.prune_q);
            if self.quantizer.finetune {
                s += "+ft";
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario().validate()?;
        self.train_config().validate()?;
        if self.out_dir.as_os_str().is_empty() {
            return Err(config_err!("out_dir is empty"));
        }
        let m = &self.model;
        if m.latent == 0 || m.channels == 0 || m.groups == 0 || !m.channels.is_multiple_of(m.groups) {
            return Err(config_err!(
                "model needs positive latent and channels divisible by groups (latent={}, channels={}, groups={})",
                m.latent,
                m.channels,
                m.groups
            ));
        }
        if let Some(p) = m.nd_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(config_err!("nd_p={} outside (0, 1]", p));
            }
        }
        let q = &self.quantizer;
        if !(0.0..1.0).contains(&q.prune_q) {
            return Err(config_err!("prune_q={} outside [0, 1)", q.prune_q));
        }
        if q.b_max == 0 || q.b_max > MAX_UNIT_BITS {
            return Err(config_err!("b_max={} outside 1..={}", q.b_max, MAX_UNIT_BITS));
        }
        let budgets = self.budgets();
        if budgets.contains(&0) {
            return Err(config_err!("budgets must be positive"));
        }
        for &b in &budgets {
            match self.variant {
                Variant::Ae if b % m.latent != 0 || b / m.latent > MAX_UNIT_BITS as usize => {
                    return Err(config_err!(
                        "uniform allocation of B={} over M={} units needs a whole number of at most {} bits per unit",
                        b,
                        m.latent,
                        MAX_UNIT_BITS
                    ));
                }
                Variant::Vq => {
                    codebook_sizing(m.latent, q.m, b)?;
                }
                _ => {}
            }
        }
        if self.search.trials > 0 {
            self.search.space.validate()?;
            if self.search.epochs == 0 {
                return Err(config_err!("search epochs must be positive"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn scenario_hash(&self) -> String {
        sha256_hex(serde_json::to_string(&self.scenario()).expect("scenario serializes").as_bytes())
    }
}
