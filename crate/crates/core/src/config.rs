//! Flat TOML run configuration shared by the CLI commands.
//!
//! Every key is optional; missing keys take the defaults of the module that
//! owns them. `BHPEFT_SEED` in the environment overrides `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{geometric_sizes, GeneratorParams, StreamConfig};
use crate::dynamic::DEFAULT_SELECTION_FRACTION;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};
use crate::parallel::Execution;
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "BHPEFT_SEED";

/// Default number of Monte Carlo draws at prediction time.
pub const DEFAULT_EVAL_SAMPLES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub prefix_len: usize,
    pub prefix_rank: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub delta: f64,
    pub prior_sigma: f64,
    pub backbone_seed: u64,
    // training
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub kl_weight: f64,
    pub noise_sigma: f64,
    pub per_example_noise: bool,
    pub seed: u64,
    pub execution: Execution,
    // inference
    pub eval_samples: usize,
    // dynamic fine-tuning and the synthetic drift stream
    pub selection_fraction: f64,
    pub stream_sizes: Vec<usize>,
    pub switch_round: usize,
    pub eval_per_phase: usize,
    pub stream_seed: u64,
    pub min_len: usize,
    pub stream_max_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let s = StreamConfig::default();
        Self {
            d_model: m.d_model,
            heads: m.heads,
            blocks: m.blocks,
            ffn_dim: m.ffn_dim,
            max_len: m.max_len,
            vocab: m.vocab,
            prefix_len: m.prefix_len,
            prefix_rank: m.prefix_rank,
            adapter_rank: m.adapter_rank,
            adapter_scale: m.adapter_scale,
            delta: m.delta,
            prior_sigma: m.prior_sigma,
            backbone_seed: m.backbone_seed,
            samples: t.samples,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            kl_weight: t.kl_weight,
            noise_sigma: t.noise_sigma,
            per_example_noise: t.per_example_noise,
            seed: t.seed,
            execution: t.execution,
            eval_samples: DEFAULT_EVAL_SAMPLES,
            selection_fraction: DEFAULT_SELECTION_FRACTION,
            stream_sizes: s.sizes,
            switch_round: s.switch_round,
            eval_per_phase: s.eval_per_phase,
            stream_seed: s.seed,
            min_len: s.params.min_len,
            stream_max_len: s.params.max_len,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads `path`; a missing or malformed file is a configuration error
    /// naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Defaults when `path` is `None`, then the environment seed override.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Ok(raw) = std::env::var(SEED_ENV) {
            cfg.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(Task::Classification, 2).validate()?;
        self.train_config().validate()?;
        if self.eval_samples < 1 {
            return Err(Error::config("eval_samples must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.selection_fraction) {
            return Err(Error::config("selection_fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn model_config(&self, task: Task, classes: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            blocks: self.blocks,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            vocab: self.vocab,
            prefix_len: self.prefix_len,
            prefix_rank: self.prefix_rank,
            adapter_rank: self.adapter_rank,
            adapter_scale: self.adapter_scale,
            task,
            classes,
            delta: self.delta,
            prior_sigma: self.prior_sigma,
            backbone_seed: self.backbone_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            samples: self.samples,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            kl_weight: self.kl_weight,
            noise_sigma: self.noise_sigma,
            per_example_noise: self.per_example_noise,
            seed: self.seed,
            execution: self.execution,
        }
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            sizes: self.stream_sizes.clone(),
            switch_round: self.switch_round,
            eval_per_phase: self.eval_per_phase,
            seed: self.stream_seed,
            params: GeneratorParams {
                vocab: self.vocab,
                min_len: self.min_len,
                max_len: self.stream_max_len,
                ..Default::default()
            },
        }
    }

    /// Replaces the stream sizes with `rounds` geometric rounds starting at `first`.
    pub fn set_geometric_stream(&mut self, first: usize, rounds: usize) {
        self.stream_sizes = geometric_sizes(first, rounds);
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_default_ranks() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let m = cfg.model_config(Task::Classification, 2);
        assert_eq!((m.adapter_rank, m.prefix_rank, m.adapter_scale, m.prior_sigma), (8, 8, 4.0, 0.1));
        assert_eq!(cfg.eval_samples, 32);
    }

    #[test]
    fn keys_override_and_unknown_keys_fail() {
        let cfg = RunConfig::from_toml("epochs = 3\nlearning_rate = 0.5\nexecution = \"sequential\"\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.train_config().learning_rate, 0.5);
        assert_eq!(cfg.execution, Execution::Sequential);
        assert!(matches!(RunConfig::from_toml("epoch = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set_geometric_stream(10, 3);
        cfg.kl_weight = 0.5;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_ne!(cfg.digest(), RunConfig::default().digest());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("/nonexistent/run.toml"));
    }
}
