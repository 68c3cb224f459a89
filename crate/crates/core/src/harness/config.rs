use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::concentration::LayerSet;
use crate::corpus::{GeneratorConfig, PoolConfig, SplitConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::hard::{GcsWeights, MappoConfig};
use crate::model::{ModelConfig, PretrainConfig};
use crate::soft::{InitStrategy, LossWeights, TrainConfig};

/// Prompting method evaluated by an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Soft prompt tuned with cross-entropy only.
    SoftVanilla,
    SoftCs,
    SoftCf,
    SoftBoth,
    /// Unfiltered pools, each agent picks a uniformly random prompt per input.
    HardRandom,
    /// GCS-filtered pools with random matching.
    HardFilter,
    /// Unfiltered pools with the learned matcher.
    HardMarl,
    HardBoth,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::SoftVanilla,
        Method::SoftCs,
        Method::SoftCf,
        Method::SoftBoth,
        Method::HardRandom,
        Method::HardFilter,
        Method::HardMarl,
        Method::HardBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::SoftVanilla => "soft-vanilla",
            Method::SoftCs => "soft-cs",
            Method::SoftCf => "soft-cf",
            Method::SoftBoth => "soft-both",
            Method::HardRandom => "hard-random",
            Method::HardFilter => "hard-filter",
            Method::HardMarl => "hard-marl",
            Method::HardBoth => "hard-both",
        }
    }

    pub fn is_soft(self) -> bool {
        matches!(
            self,
            Method::SoftVanilla | Method::SoftCs | Method::SoftCf | Method::SoftBoth
        )
    }

    pub fn filters(self) -> bool {
        matches!(self, Method::HardFilter | Method::HardBoth)
    }

    pub fn learns_matching(self) -> bool {
        matches!(self, Method::HardMarl | Method::HardBoth)
    }

    /// The loss weights this method trains with, derived from the configured
    /// full objective: the ablations zero the terms they drop.
    pub fn soft_weights(self, base: &LossWeights) -> Option<LossWeights> {
        let w = *base;
        match self {
            Method::SoftVanilla => Some(LossWeights { cs: 0.0, cf: 0.0, ..w }),
            Method::SoftCs => Some(LossWeights { cf: 0.0, ..w }),
            Method::SoftCf => Some(LossWeights { cs: 0.0, ..w }),
            Method::SoftBoth => Some(w),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Encoder widths and pretraining; vocabulary-dependent fields come from the
/// corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    /// An empty `prompt_tokens` list means "the template vocabulary".
    pub pretrain: PretrainConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            max_seq: 48,
            pretrain: PretrainConfig {
                epochs: 4,
                ..PretrainConfig::default()
            },
        }
    }
}

impl BackboneConfig {
    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq: self.max_seq,
            ..vocab.model_config()
        }
    }

    pub fn pretrain_config(&self, vocab: &Vocabulary) -> PretrainConfig {
        let mut p = self.pretrain.clone();
        if p.prompt_tokens.is_empty() {
            p.prompt_tokens = vocab.template_ids();
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftSettings {
    pub prompt_len: usize,
    pub init: InitStrategy,
    pub train: TrainConfig,
    /// The full objective; ablations are derived from it.
    pub weights: LossWeights,
}

impl Default for SoftSettings {
    fn default() -> Self {
        Self {
            prompt_len: 5,
            init: InitStrategy::Random,
            train: TrainConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardSettings {
    pub pool: PoolConfig,
    /// Size of each filtered prompt set.
    pub k: usize,
    pub gcs: GcsWeights,
    pub mappo: MappoConfig,
}

impl Default for HardSettings {
    fn default() -> Self {
        Self {
            pool: PoolConfig::default(),
            k: 15,
            gcs: GcsWeights::default(),
            mappo: MappoConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PilotSettings {
    pub enabled: bool,
    /// Target-test inputs profiled.
    pub inputs: usize,
    pub top_k: usize,
}

impl Default for PilotSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            inputs: 200,
            top_k: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub generator: GeneratorConfig,
    pub split: SplitConfig,
    pub backbone: BackboneConfig,
    pub soft: SoftSettings,
    pub hard: HardSettings,
    /// Layers concentration is read from; `None` uses the deepest fifth.
    pub layers: Option<Vec<usize>>,
    pub pilot: PilotSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            methods: Method::ALL.to_vec(),
            generator: default_generator(),
            split: SplitConfig::default(),
            backbone: BackboneConfig::default(),
            soft: SoftSettings::default(),
            hard: HardSettings::default(),
            layers: None,
            pilot: PilotSettings::default(),
        }
    }
}

/// Three domains with disjoint style vocabularies and fully domain-skewed
/// cue frequencies, so part of the target's cue vocabulary is rare in the
/// sources.
fn default_generator() -> GeneratorConfig {
    let mut g = GeneratorConfig {
        n_domains: 3,
        shift: 1.0,
        ..GeneratorConfig::default()
    };
    g.task.rule_strength = 0.7;
    g.task.skew = 1.0;
    g
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("methods are listed more than once".into()));
        }
        self.generator.task.validate()?;
        self.soft.weights.validate()?;
        self.soft.train.validate()?;
        self.hard.gcs.validate()?;
        self.hard.mappo.validate()?;
        if self.soft.prompt_len == 0 {
            return Err(Error::Config("soft prompt length must be ≥ 1".into()));
        }
        if self.hard.k == 0 || self.hard.k > self.hard.pool.per_domain + self.hard.pool.planted_random {
            return Err(Error::Config(format!(
                "K = {} must lie in 1..={}",
                self.hard.k,
                self.hard.pool.per_domain + self.hard.pool.planted_random
            )));
        }
        if self.pilot.enabled && (self.pilot.inputs == 0 || self.pilot.top_k == 0) {
            return Err(Error::Config("pilot needs inputs ≥ 1 and top_k ≥ 1".into()));
        }
        if let Some(layers) = &self.layers {
            LayerSet::new(layers.clone(), self.backbone.n_layers)?;
        }
        Ok(())
    }

    pub fn layer_set(&self) -> Result<LayerSet> {
        match &self.layers {
            Some(l) => LayerSet::new(l.clone(), self.backbone.n_layers),
            None => Ok(LayerSet::deep(self.backbone.n_layers)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), serde_json::json!(m.name()));
        }
        assert!("soft".parse::<Method>().is_err());
    }

    #[test]
    fn ablations_zero_their_terms() {
        let base = LossWeights::default();
        let cs = Method::SoftCs.soft_weights(&base).unwrap();
        assert_eq!(cs.cf, 0.0);
        assert_eq!(cs.cs, base.cs);
        let cf = Method::SoftCf.soft_weights(&base).unwrap();
        assert_eq!(cf.cs, 0.0);
        let v = Method::SoftVanilla.soft_weights(&base).unwrap();
        assert_eq!((v.cs, v.cf), (0.0, 0.0));
        assert!(Method::HardBoth.soft_weights(&base).is_none());
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_json(r#"{"seeds": [7], "methods": ["soft-both"]}"#).unwrap();
        assert_eq!(partial.seeds, vec![7]);
        assert_eq!(partial.backbone, BackboneConfig::default());
    }

    #[test]
    fn rejects_inconsistent_settings() {
        let mut cfg = ExperimentConfig::default();
        cfg.methods = vec![Method::SoftBoth, Method::SoftBoth];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.hard.k = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.layers = Some(vec![9]);
        assert!(cfg.validate().is_err());
    }
}
