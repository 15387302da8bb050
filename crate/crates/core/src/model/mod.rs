//! Frozen miniature transformer with Bayesian prefix-tuning on attention and a
//! Bayesian scaled parallel adapter on the feedforward sublayer.
//!
//! All forward computation is recorded on a [`Tape`]; the graph functions in
//! this module take tape handles so the same code serves training (weights as
//! trainable leaves) and inference (weights as constants).

mod backbone;
mod config;
mod peft;

pub use backbone::{sinusoidal_table, FrozenBackbone, FrozenBlock};
pub use config::{ModelConfig, Task};
pub use peft::{AdapterModule, PeftState, PrefixModule, TaskHead, GAUSSIANS_PER_BLOCK};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::random::{self, Rng};
use crate::variational::{kl_to_prior, GaussianParameter, PriorSpec};

const PEFT_STREAM: u64 = 0x9EF7;

/// Frozen block weights recorded as tape constants.
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl BlockVars {
    pub fn record(tape: &mut Tape, block: &FrozenBlock) -> Self {
        let mut c = |t: &Tensor| tape.constant(t.clone());
        Self {
            w_q: c(&block.w_q),
            w_k: c(&block.w_k),
            w_v: c(&block.w_v),
            w_o: c(&block.w_o),
            w1: c(&block.w1),
            b1: c(&block.b1),
            w2: c(&block.w2),
            b2: c(&block.b2),
            ln1_gamma: c(&block.ln1_gamma),
            ln1_beta: c(&block.ln1_beta),
            ln2_gamma: c(&block.ln2_gamma),
            ln2_beta: c(&block.ln2_beta),
        }
    }
}

/// `P = tanh(P' · down) · up` for the key and value inputs, sharing weights.
pub fn generate_prefixes(
    tape: &mut Tape,
    key_input: Var,
    value_input: Var,
    down: Var,
    up: Var,
) -> Result<(Var, Var)> {
    let mut encode = |input: Var| -> Result<Var> {
        let hidden = tape.matmul(input, down)?;
        let hidden = tape.activation(hidden, PrefixModule::ACTIVATION);
        tape.matmul(hidden, up)
    };
    let pk = encode(key_input)?;
    let pv = encode(value_input)?;
    Ok((pk, pv))
}

/// Multi-head attention whose keys and values are prepended with the given
/// prefixes. Returns `x_attn` (before the residual connection).
pub fn prefixed_attention(
    tape: &mut Tape,
    x_in: Var,
    block: &BlockVars,
    heads: usize,
    prefixes: Option<(Var, Var)>,
) -> Result<Var> {
    let d = tape.value(x_in).cols();
    let dk = d / heads;
    let q = tape.matmul(x_in, block.w_q)?;
    let mut k = tape.matmul(x_in, block.w_k)?;
    let mut v = tape.matmul(x_in, block.w_v)?;
    if let Some((pk, pv)) = prefixes {
        if tape.value(pk).rows() > 0 {
            k = tape.concat_rows(pk, k)?;
            v = tape.concat_rows(pv, v)?;
        }
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qi = tape.slice_cols(q, h * dk, dk)?;
        let ki = tape.slice_cols(k, h * dk, dk)?;
        let vi = tape.slice_cols(v, h * dk, dk)?;
        let scores = tape.matmul_transposed(qi, ki)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(weights, vi)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, block.w_o)
}

/// Adapter weights and scale for [`adapter_block_tail`].
pub struct AdapterVars {
    pub down: Var,
    pub up: Var,
    pub scale: f64,
}

/// `LayerNorm(x_rc + FFN(x_rc) + s · relu(x_rc · down) · up)`.
pub fn adapter_block_tail(
    tape: &mut Tape,
    x_rc: Var,
    block: &BlockVars,
    adapter: Option<&AdapterVars>,
) -> Result<Var> {
    let hidden = tape.matmul(x_rc, block.w1)?;
    let hidden = tape.add_row(hidden, block.b1)?;
    let hidden = tape.activation(hidden, crate::numerics::Activation::Relu);
    let ffn = tape.matmul(hidden, block.w2)?;
    let ffn = tape.add_row(ffn, block.b2)?;
    let mut sum = tape.add(x_rc, ffn)?;
    if let Some(a) = adapter {
        let branch = tape.matmul(x_rc, a.down)?;
        let branch = tape.activation(branch, AdapterModule::ACTIVATION);
        let branch = tape.matmul(branch, a.up)?;
        let branch = tape.scale(branch, a.scale);
        sum = tape.add(sum, branch)?;
    }
    tape.layer_norm(sum, block.ln2_gamma, block.ln2_beta, LAYER_NORM_EPS)
}

/// How Gaussian weights are realized in a forward pass.
pub enum WeightMode<'a> {
    /// Every weight at its mean.
    Mean,
    /// One reparameterized draw per Gaussian parameter.
    Sample(&'a mut Rng),
}

/// Handles produced by [`BhPeftModel::record`].
pub struct Recorded {
    pub output: Var,
    /// One per Gaussian parameter, canonical order.
    pub weights: Vec<Var>,
    pub head_weight: Var,
    pub head_bias: Var,
}

/// Frozen backbone, trainable PEFT state and the priors of every Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct BhPeftModel {
    pub config: ModelConfig,
    pub backbone: FrozenBackbone,
    pub peft: PeftState,
    /// One prior per Gaussian parameter, canonical order.
    pub priors: Vec<PriorSpec>,
}

impl BhPeftModel {
    /// Builds the frozen backbone from `config.backbone_seed` and initializes
    /// the PEFT state from `seed` under the constant prior.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let backbone = FrozenBackbone::init(&config)?;
        let peft = PeftState::init(&config, &mut random::derive(seed, PEFT_STREAM))?;
        let mut model = Self {
            config,
            backbone,
            peft,
            priors: Vec::new(),
        };
        model.reset_priors();
        Ok(model)
    }

    pub fn from_parts(
        config: ModelConfig,
        backbone: FrozenBackbone,
        peft: PeftState,
        priors: Vec<PriorSpec>,
    ) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config,
            backbone,
            peft,
            priors,
        };
        model.check_consistency()?;
        Ok(model)
    }

    fn check_consistency(&self) -> Result<()> {
        let c = &self.config;
        if self.backbone.d_model() != c.d_model
            || self.backbone.vocab() != c.vocab
            || self.backbone.max_len() != c.max_len
            || self.backbone.blocks.len() != c.blocks
        {
            return Err(Error::config("backbone does not match model config"));
        }
        if self.peft.prefixes.len() != c.blocks || self.peft.adapters.len() != c.blocks {
            return Err(Error::config("PEFT state does not match block count"));
        }
        if self.peft.head.weight.shape() != [c.d_model, c.output_dim()] {
            return Err(Error::config("task head does not match model config"));
        }
        let gaussians = self.peft.gaussians();
        if gaussians.len() != self.priors.len() {
            return Err(Error::config("prior count does not match parameter count"));
        }
        for (p, prior) in gaussians.iter().zip(&self.priors) {
            if p.shape() != prior.shape() {
                return Err(Error::Shape {
                    op: "prior",
                    left: p.shape().to_vec(),
                    right: prior.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Restores the constant `N(0, prior_sigma²)` prior on every parameter.
    pub fn reset_priors(&mut self) {
        let sigma = self.config.prior_sigma;
        self.priors = self
            .peft
            .gaussians()
            .iter()
            .map(|p| PriorSpec::standard(p.shape(), sigma).expect("validated prior sigma"))
            .collect();
    }

    pub fn set_priors(&mut self, priors: Vec<PriorSpec>) -> Result<()> {
        let old = std::mem::replace(&mut self.priors, priors);
        if let Err(e) = self.check_consistency() {
            self.priors = old;
            return Err(e);
        }
        Ok(())
    }

    pub fn gaussians(&self) -> Vec<&GaussianParameter> {
        self.peft.gaussians()
    }

    /// Sum of `KL(q ‖ prior)` over all Gaussian parameters.
    pub fn kl_total(&self) -> Result<f64> {
        let mut total = 0.0;
        for (p, prior) in self.peft.gaussians().into_iter().zip(&self.priors) {
            total += kl_to_prior(p, prior)?;
        }
        Ok(total)
    }

    pub fn mean_weights(&self) -> Vec<Tensor> {
        self.peft.gaussians().iter().map(|p| p.mu.clone()).collect()
    }

    /// One standard-normal noise tensor per Gaussian parameter.
    pub fn draw_noise(&self, rng: &mut Rng) -> Vec<Tensor> {
        self.peft.gaussians().iter().map(|p| p.draw_noise(rng)).collect()
    }

    pub fn weights_from_noise(&self, noise: &[Tensor]) -> Result<Vec<Tensor>> {
        let gaussians = self.peft.gaussians();
        if noise.len() != gaussians.len() {
            return Err(Error::input("noise set does not match parameter count"));
        }
        gaussians
            .iter()
            .zip(noise)
            .map(|(p, e)| p.weight_from_noise(e))
            .collect()
    }

    pub fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        self.backbone.embed(tokens).map(|_| ())
    }

    /// Records the full forward pass for `tokens` with the given realized
    /// Gaussian weights. With `trainable`, the weights and the head are
    /// trainable leaves.
    pub fn record(
        &self,
        tape: &mut Tape,
        weights: &[Tensor],
        tokens: &[u32],
        trainable: bool,
    ) -> Result<Recorded> {
        let cfg = &self.config;
        if weights.len() != cfg.blocks * GAUSSIANS_PER_BLOCK {
            return Err(Error::input("weight set does not match parameter count"));
        }
        let mut x = tape.constant(self.backbone.embed(tokens)?);
        let mut weight_vars = Vec::with_capacity(weights.len());
        for (b, block) in self.backbone.blocks.iter().enumerate() {
            let consts = BlockVars::record(tape, block);
            let w = &weights[b * GAUSSIANS_PER_BLOCK..(b + 1) * GAUSSIANS_PER_BLOCK];
            let p_down = tape.leaf(w[0].clone(), trainable);
            let p_up = tape.leaf(w[1].clone(), trainable);
            let a_down = tape.leaf(w[2].clone(), trainable);
            let a_up = tape.leaf(w[3].clone(), trainable);
            weight_vars.extend([p_down, p_up, a_down, a_up]);

            let prefix = &self.peft.prefixes[b];
            let prefixes = if prefix.prefix_len() > 0 {
                let ki = tape.constant(prefix.key_input.clone());
                let vi = tape.constant(prefix.value_input.clone());
                Some(generate_prefixes(tape, ki, vi, p_down, p_up)?)
            } else {
                None
            };
            let x_attn = prefixed_attention(tape, x, &consts, cfg.heads, prefixes)?;
            let residual = tape.add(x, x_attn)?;
            let x_rc = tape.layer_norm(residual, consts.ln1_gamma, consts.ln1_beta, LAYER_NORM_EPS)?;
            let adapter = AdapterVars {
                down: a_down,
                up: a_up,
                scale: self.peft.adapters[b].scale,
            };
            x = adapter_block_tail(tape, x_rc, &consts, Some(&adapter))?;
        }
        let pooled = tape.mean_rows(x)?;
        let head_weight = tape.leaf(self.peft.head.weight.clone(), trainable);
        let head_bias = tape.leaf(self.peft.head.bias.clone(), trainable);
        let logits = tape.matmul(pooled, head_weight)?;
        let output = tape.add_row(logits, head_bias)?;
        Ok(Recorded {
            output,
            weights: weight_vars,
            head_weight,
            head_bias,
        })
    }

    /// Model output for one sequence with explicit Gaussian weights:
    /// logits (`[C]`) or a scalar regression output (`[1]`).
    pub fn forward_with_weights(&self, tokens: &[u32], weights: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, weights, tokens, false)?;
        let out = tape.value(rec.output).clone();
        let n = out.len();
        out.reshape(vec![n])
    }

    pub fn forward(&self, tokens: &[u32], mode: WeightMode<'_>) -> Result<Tensor> {
        let weights = match mode {
            WeightMode::Mean => self.mean_weights(),
            WeightMode::Sample(rng) => {
                let noise = self.draw_noise(rng);
                self.weights_from_noise(&noise)?
            }
        };
        self.forward_with_weights(tokens, &weights)
    }

    /// Output of the plain frozen transformer followed by the task head,
    /// without any prefix or adapter.
    pub fn reference_output(&self, tokens: &[u32]) -> Result<Tensor> {
        let pooled = self.backbone.pooled_features(tokens, self.config.heads)?;
        let out = pooled.matmul(&self.peft.head.weight)?.add_row(&self.peft.head.bias)?;
        let n = out.len();
        out.reshape(vec![n])
    }

    pub fn backbone_digest(&self) -> String {
        self.backbone.digest()
    }
}
