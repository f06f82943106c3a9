//! Experiment config: one TOML file holding every stage's settings. A file
//! may set any subset of keys; the rest come from `defaults.toml`. Unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use simagent_core::generator::Template;
use simagent_core::metrics::MetricsConfig;
use simagent_core::model::ModelConfig;
use simagent_core::posttrain::PosttrainConfig;
use simagent_core::pretrain::TrainConfig;
use simagent_core::testtime::TestTimeConfig;
use simagent_core::tokenizer::TokenizerConfig;

use crate::error::{Error, Result};

/// The checked-in defaults; `RunConfig::default()` serializes to exactly this.
pub const DEFAULTS: &str = include_str!("../defaults.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub templates: Vec<Template>,
    pub count: usize,
    /// Held-out scenarios written next to the training set.
    pub eval_count: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { templates: Template::ALL.to_vec(), count: 2000, eval_count: 64 }
    }
}

/// Cross-stage settings that no single core config owns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Templates whose scenarios are used for post-training.
    pub posttrain_templates: Vec<Template>,
    /// Cap on post-training scenarios.
    pub posttrain_scenarios: usize,
    /// Upper bound on the max-over-time KL to the reference after post-training.
    pub kl_bound: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { posttrain_templates: vec![Template::Intersection, Template::Merge], posttrain_scenarios: 64, kl_bound: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage draws its own seed from it.
    pub seed: u64,
    pub run_dir: String,
    pub generate: GenerateConfig,
    pub stages: StageConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub posttrain: PosttrainConfig,
    pub testtime: TestTimeConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            run_dir: "run".into(),
            generate: GenerateConfig::default(),
            stages: StageConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            posttrain: PosttrainConfig::default(),
            testtime: TestTimeConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Seed of one stage derived from the root seed.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses a (partial) config on top of the defaults, then applies
    /// `key.path=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut base: toml::Value = toml::from_str(DEFAULTS).map_err(|e| Error::Config(e.to_string()))?;
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let v: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .or_else(|_| toml::from_str::<toml::Table>(&format!("v = \"{value}\"")))
                .map_err(|e| Error::Config(e.to_string()))?
                .remove("v")
                .expect("parsed key");
            let mut patch = v;
            for part in key.trim().rsplit('.') {
                let mut t = toml::Table::new();
                t.insert(part.to_owned(), patch);
                patch = toml::Value::Table(t);
            }
            merge(&mut base, patch);
        }
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let c = |e: String| Error::Config(e);
        if self.generate.templates.is_empty() {
            return Err(c("generate.templates is empty".into()));
        }
        self.model.validate().map_err(|e| c(e.to_string()))?;
        self.train.validate().map_err(|e| c(e.to_string()))?;
        self.posttrain.validate().map_err(|e| c(e.to_string()))?;
        self.testtime.validate().map_err(|e| c(e.to_string()))?;
        let s: f64 = self.metrics.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(c(format!("metrics.weights sum to {s}, expected 1")));
        }
        Ok(())
    }

    /// Stage configs with seeds drawn from the root seed. A nonzero seed in a
    /// section is mixed in, so sections can still be varied independently.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: stage_seed(self.seed, "pretrain") ^ self.train.seed, ..self.train.clone() }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { init_seed: stage_seed(self.seed, "init") ^ self.model.init_seed, ..self.model.clone() }
    }

    pub fn posttrain_config(&self) -> PosttrainConfig {
        PosttrainConfig { seed: stage_seed(self.seed, "posttrain") ^ self.posttrain.seed, ..self.posttrain.clone() }
    }

    pub fn testtime_config(&self) -> TestTimeConfig {
        TestTimeConfig { seed: stage_seed(self.seed, "rollout") ^ self.testtime.seed, ..self.testtime.clone() }
    }

    pub fn generate_seed(&self) -> u64 {
        stage_seed(self.seed, "generate")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_file_matches() {
        let text = RunConfig::default().to_toml();
        if std::env::var_os("SIMAGENT_BLESS").is_some() {
            std::fs::write(concat!(env!("CARGO_MANIFEST_DIR"), "/defaults.toml"), &text).unwrap();
            return;
        }
        assert_eq!(text, DEFAULTS);
    }

    #[test]
    fn defaults_carry_the_reference_settings() {
        let c = RunConfig::default();
        assert_eq!((c.model.d_model, c.model.heads, c.model.encoder_layers, c.model.decoder_layers), (128, 8, 2, 4));
        assert_eq!((c.train.k, c.train.lr_max, c.train.lr_min), (8, 1e-3, 1e-5));
        assert_eq!((c.posttrain.gamma, c.posttrain.lambda_kl, c.posttrain.lambda_h, c.posttrain.group_size), (0.5, 0.8, 0.01, 8));
        assert_eq!((c.testtime.n, c.testtime.max_candidate_budget), (32, 1024));
        assert_eq!(c.tokenizer.bins_per_axis, 128);
    }

    #[test]
    fn partial_files_and_overrides() {
        let c = RunConfig::parse("seed = 7\n[train]\nepochs = 2\n", &["posttrain.method=reinforce".into(), "model.size_preset=mini".into()]).unwrap();
        assert_eq!((c.seed, c.train.epochs), (7, 2));
        assert_eq!(c.posttrain.method, simagent_core::posttrain::Method::Reinforce);
        assert_eq!(c.model.resolved().d_model, 32);
        assert_eq!(c.train.batch_size, RunConfig::default().train.batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[train]\nepochz = 2\n", &[]).is_err());
        assert!(RunConfig::parse("bogus = 1\n", &[]).is_err());
        assert!(RunConfig::parse("", &["testtime.n=0".into()]).is_err());
        assert_eq!(RunConfig::parse("[model]\nheads = 'x'", &[]).unwrap_err().kind(), "config");
    }

    #[test]
    fn stage_seeds_differ() {
        let c = RunConfig::default();
        assert_ne!(c.train_config().seed, c.posttrain_config().seed);
        assert_eq!(stage_seed(1, "a"), stage_seed(1, "a"));
        assert_ne!(stage_seed(1, "a"), stage_seed(2, "a"));
    }
}
