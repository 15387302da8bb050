use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::variational::{DEFAULT_DELTA, DEFAULT_PRIOR_SIGMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "regression" => Ok(Task::Regression),
            other => Err(Error::config(format!("unknown task `{other}`"))),
        }
    }
}

/// Shape and hyperparameters of the backbone and of the PEFT modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Feedforward width; `0` means `4 * d_model`.
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub prefix_len: usize,
    pub prefix_rank: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub task: Task,
    /// Number of classes; ignored for regression.
    pub classes: usize,
    /// Upper bound of the `g` initialization interval.
    pub delta: f64,
    /// Standard deviation of the constant first-round prior.
    pub prior_sigma: f64,
    /// Seed of the frozen backbone weights (the stand-in for pretraining).
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 2,
            ffn_dim: 0,
            max_len: 32,
            vocab: 512,
            prefix_len: 4,
            prefix_rank: 8,
            adapter_rank: 8,
            adapter_scale: 4.0,
            task: Task::Classification,
            classes: 2,
            delta: DEFAULT_DELTA,
            prior_sigma: DEFAULT_PRIOR_SIGMA,
            backbone_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.blocks == 0 {
            return fail("blocks must be at least 1".into());
        }
        if self.max_len == 0 || self.vocab == 0 {
            return fail("max_len and vocab must be positive".into());
        }
        if self.prefix_rank == 0 || self.adapter_rank == 0 {
            return fail("prefix_rank and adapter_rank must be at least 1".into());
        }
        if !self.adapter_scale.is_finite() || self.adapter_scale < 0.0 {
            return fail(format!("adapter_scale must be >= 0, got {}", self.adapter_scale));
        }
        if self.task == Task::Classification && self.classes < 2 {
            return fail(format!("classification needs >= 2 classes, got {}", self.classes));
        }
        if !self.delta.is_finite() || self.delta <= 0.0 {
            return fail(format!("delta must be positive, got {}", self.delta));
        }
        if !self.prior_sigma.is_finite() || self.prior_sigma <= 0.0 {
            return fail(format!("prior_sigma must be positive, got {}", self.prior_sigma));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.d_model
        } else {
            self.ffn_dim
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Classification => self.classes,
            Task::Regression => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_settings() {
        let c = ModelConfig::default();
        assert_eq!(c.adapter_rank, 8);
        assert_eq!(c.prefix_rank, 8);
        assert_eq!(c.adapter_scale, 4.0);
        assert_eq!(c.prior_sigma, 0.1);
        assert_eq!(c.ffn_width(), 4 * c.d_model);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            d_model: 10,
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            adapter_scale: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            adapter_rank: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!("ranking".parse::<Task>().is_err());
    }
}
