use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, LAYER_NORM_EPS};
use crate::random::{self, Rng};

/// Frozen weights of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBlock {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

/// The frozen transformer. Never modified after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    pub embedding: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<FrozenBlock>,
}

fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, || std * random::standard_normal(rng))
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(...)`.
pub fn sinusoidal_table(max_len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(max_len * d);
    for pos in 0..max_len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![max_len, d], data).expect("table shape")
}

impl FrozenBlock {
    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_width();
        let inv_d = 1.0 / (d as f64).sqrt();
        Self {
            w_q: gaussian(&[d, d], inv_d, rng),
            w_k: gaussian(&[d, d], inv_d, rng),
            w_v: gaussian(&[d, d], inv_d, rng),
            w_o: gaussian(&[d, d], inv_d, rng),
            w1: gaussian(&[d, f], inv_d, rng),
            b1: gaussian(&[f], 0.02, rng),
            w2: gaussian(&[f, d], 1.0 / (f as f64).sqrt(), rng),
            b2: gaussian(&[d], 0.02, rng),
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
        }
    }

    pub fn named_arrays(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
        ]
    }

    pub(crate) fn arrays_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }

    /// Plain multi-head self-attention followed by residual and layer norm.
    fn attention_sublayer(&self, x_in: &Tensor, heads: usize) -> Result<Tensor> {
        let d = x_in.cols();
        let dk = d / heads;
        let q = x_in.matmul(&self.w_q)?;
        let k = x_in.matmul(&self.w_k)?;
        let v = x_in.matmul(&self.w_v)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qi = q.slice_cols(h * dk, dk)?;
            let ki = k.slice_cols(h * dk, dk)?;
            let vi = v.slice_cols(h * dk, dk)?;
            let weights = qi.matmul_transposed(&ki)?.scale(scale).softmax_rows()?;
            outs.push(weights.matmul(&vi)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let x_attn = Tensor::concat_cols(&refs)?.matmul(&self.w_o)?;
        x_in.add(&x_attn)?.layer_norm(&self.ln1_gamma, &self.ln1_beta, LAYER_NORM_EPS)
    }

    fn feedforward_sublayer(&self, x_rc: &Tensor) -> Result<Tensor> {
        let hidden = x_rc.matmul(&self.w1)?.add_row(&self.b1)?.relu();
        let ffn = hidden.matmul(&self.w2)?.add_row(&self.b2)?;
        x_rc.add(&ffn)?.layer_norm(&self.ln2_gamma, &self.ln2_beta, LAYER_NORM_EPS)
    }

    /// The unmodified block: attention, add & norm, feedforward, add & norm.
    pub fn forward(&self, x_in: &Tensor, heads: usize) -> Result<Tensor> {
        let x_rc = self.attention_sublayer(x_in, heads)?;
        self.feedforward_sublayer(&x_rc)
    }
}

impl FrozenBackbone {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = random::derive(cfg.backbone_seed, 0xBAC);
        let embedding = gaussian(&[cfg.vocab, cfg.d_model], 1.0, &mut rng);
        let blocks = (0..cfg.blocks).map(|_| FrozenBlock::init(cfg, &mut rng)).collect();
        Ok(Self {
            embedding,
            positional: sinusoidal_table(cfg.max_len, cfg.d_model),
            blocks,
        })
    }

    pub fn d_model(&self) -> usize {
        self.embedding.cols()
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn max_len(&self) -> usize {
        self.positional.rows()
    }

    /// Token embeddings plus positional encodings, `[n, d]`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if tokens.len() > self.max_len() {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.max_len()
            )));
        }
        let d = self.d_model();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (pos, &t) in tokens.iter().enumerate() {
            if t as usize >= self.vocab() {
                return Err(Error::input(format!(
                    "token id {t} out of range for vocab {}",
                    self.vocab()
                )));
            }
            let e = self.embedding.row(t as usize);
            let p = self.positional.row(pos);
            data.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    /// Mean-pooled output of the plain frozen transformer, `[1, d]`.
    pub fn pooled_features(&self, tokens: &[u32], heads: usize) -> Result<Tensor> {
        let mut x = self.embed(tokens)?;
        for block in &self.blocks {
            x = block.forward(&x, heads)?;
        }
        x.mean_rows()
    }

    pub fn named_arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("backbone.embedding".to_string(), &self.embedding),
            ("backbone.positional".to_string(), &self.positional),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.named_arrays() {
                out.push((format!("backbone.block{i}.{name}"), t));
            }
        }
        out
    }

    pub(crate) fn arrays_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding, &mut self.positional];
        for b in &mut self.blocks {
            out.extend(b.arrays_mut());
        }
        out
    }

    /// SHA-256 over every frozen array (names, shapes and little-endian values).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_arrays() {
            h.update(name.as_bytes());
            for e in t.shape() {
                h.update((*e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
