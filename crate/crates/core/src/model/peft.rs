use super::config::ModelConfig;
use crate::error::Result;
use crate::numerics::{Activation, Tensor};
use crate::random::{self, Rng};
use crate::variational::GaussianParameter;

/// Prefix encoder of one block.
///
/// The fixed inputs `key_input` and `value_input` (`[l, d]`) pass through a
/// shared tanh bottleneck `down · up` to produce key and value prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixModule {
    pub key_input: Tensor,
    pub value_input: Tensor,
    pub down: GaussianParameter,
    pub up: GaussianParameter,
}

impl PrefixModule {
    pub const ACTIVATION: Activation = Activation::Tanh;

    pub fn prefix_len(&self) -> usize {
        self.key_input.rows()
    }
}

/// Scaled parallel adapter of one block: `s · relu(x · down) · up`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModule {
    pub down: GaussianParameter,
    pub up: GaussianParameter,
    pub scale: f64,
}

impl AdapterModule {
    pub const ACTIVATION: Activation = Activation::Relu;
}

/// Deterministic output layer applied to the mean-pooled final hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Everything that fine-tuning is allowed to change.
#[derive(Clone, Debug, PartialEq)]
pub struct PeftState {
    pub prefixes: Vec<PrefixModule>,
    pub adapters: Vec<AdapterModule>,
    pub head: TaskHead,
}

/// Number of Gaussian parameters per block (prefix down/up, adapter down/up).
pub const GAUSSIANS_PER_BLOCK: usize = 4;

impl PeftState {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let l = cfg.prefix_len;
        let mut prefixes = Vec::with_capacity(cfg.blocks);
        let mut adapters = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let key_input = Tensor::from_fn(&[l, d], || random::standard_normal(rng));
            let value_input = Tensor::from_fn(&[l, d], || random::standard_normal(rng));
            let p_down = GaussianParameter::init(
                format!("block{b}.prefix.down"),
                &[d, cfg.prefix_rank],
                d,
                cfg.delta,
                rng,
            )?;
            let p_up = GaussianParameter::init(
                format!("block{b}.prefix.up"),
                &[cfg.prefix_rank, d],
                d,
                cfg.delta,
                rng,
            )?;
            prefixes.push(PrefixModule {
                key_input,
                value_input,
                down: p_down,
                up: p_up,
            });
            let a_down = GaussianParameter::init(
                format!("block{b}.adapter.down"),
                &[d, cfg.adapter_rank],
                d,
                cfg.delta,
                rng,
            )?;
            let a_up = GaussianParameter::init(
                format!("block{b}.adapter.up"),
                &[cfg.adapter_rank, d],
                d,
                cfg.delta,
                rng,
            )?;
            adapters.push(AdapterModule {
                down: a_down,
                up: a_up,
                scale: cfg.adapter_scale,
            });
        }
        let out = cfg.output_dim();
        let bound = (6.0 / (d + out) as f64).sqrt();
        let head = TaskHead {
            weight: Tensor::from_fn(&[d, out], || random::uniform(rng, -bound, bound)),
            bias: Tensor::zeros(&[out]),
        };
        Ok(Self {
            prefixes,
            adapters,
            head,
        })
    }

    /// Gaussian parameters in canonical order: per block prefix down, prefix
    /// up, adapter down, adapter up.
    pub fn gaussians(&self) -> Vec<&GaussianParameter> {
        let mut out = Vec::with_capacity(self.prefixes.len() * GAUSSIANS_PER_BLOCK);
        for (p, a) in self.prefixes.iter().zip(&self.adapters) {
            out.extend([&p.down, &p.up, &a.down, &a.up]);
        }
        out
    }

    pub fn gaussians_mut(&mut self) -> Vec<&mut GaussianParameter> {
        let mut out = Vec::with_capacity(self.prefixes.len() * GAUSSIANS_PER_BLOCK);
        for (p, a) in self.prefixes.iter_mut().zip(self.adapters.iter_mut()) {
            out.extend([&mut p.down, &mut p.up, &mut a.down, &mut a.up]);
        }
        out
    }

    /// Trainable tensors in optimizer order: `mu`, `g` of every Gaussian,
    /// then head weight and bias.
    pub fn trainables(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for p in self.gaussians() {
            out.push(&p.mu);
            out.push(&p.g);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn trainables_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (p, a) in self.prefixes.iter_mut().zip(self.adapters.iter_mut()) {
            for g in [&mut p.down, &mut p.up, &mut a.down, &mut a.up] {
                out.push(&mut g.mu);
                out.push(&mut g.g);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Fixed prefix-encoder inputs; stored but never trained.
    pub fn fixed_arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (b, p) in self.prefixes.iter().enumerate() {
            out.push((format!("block{b}.prefix.key_input"), &p.key_input));
            out.push((format!("block{b}.prefix.value_input"), &p.value_input));
        }
        out
    }
}
