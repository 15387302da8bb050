//! Independent oracles shared by the integration tests. Nothing here calls the
//! library's numerics: forward passes, objectives and integrals are written
//! out with plain loops.

#![allow(dead_code)]

use bhpeft::data::{Example, Target};
use bhpeft::model::{BhPeftModel, ModelConfig, Task};
use bhpeft::numerics::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let cols = if t.shape().len() == 2 { t.shape()[1] } else { t.len() };
    t.data().chunks(cols.max(1)).map(<[f64]>::to_vec).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| f(*v)).collect()).collect()
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn layer_norm(a: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .zip(gamma.iter().zip(beta))
                .map(|(x, (g, b))| g * (x - mean) * inv + b)
                .collect()
        })
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn cols(a: &Mat, start: usize, width: usize) -> Mat {
    a.iter().map(|r| r[start..start + width].to_vec()).collect()
}

/// Forward pass written out with plain loops. `weights` holds,
/// per block, prefix down, prefix up, adapter down and adapter up.
pub fn reference_forward(model: &BhPeftModel, tokens: &[u32], weights: &[Tensor]) -> Vec<f64> {
    let cfg = &model.config;
    let bb = &model.backbone;
    let emb = mat(&bb.embedding);
    let pos = mat(&bb.positional);
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| emb[t as usize].iter().zip(&pos[p]).map(|(a, b)| a + b).collect())
        .collect();
    let dk = cfg.d_model / cfg.heads;
    for (b, blk) in bb.blocks.iter().enumerate() {
        let w = &weights[4 * b..4 * b + 4];
        let q = matmul(&x, &mat(&blk.w_q));
        let mut k = matmul(&x, &mat(&blk.w_k));
        let mut v = matmul(&x, &mat(&blk.w_v));
        let prefix = &model.peft.prefixes[b];
        if prefix.key_input.rows() > 0 {
            let encode = |input: &Tensor| matmul(&map(&matmul(&mat(input), &mat(&w[0])), f64::tanh), &mat(&w[1]));
            let mut pk = encode(&prefix.key_input);
            let mut pv = encode(&prefix.value_input);
            pk.extend(k);
            pv.extend(v);
            k = pk;
            v = pv;
        }
        let mut heads_out: Mat = vec![Vec::new(); x.len()];
        for h in 0..cfg.heads {
            let (qh, kh, vh) = (cols(&q, h * dk, dk), cols(&k, h * dk, dk), cols(&v, h * dk, dk));
            for (i, qi) in qh.iter().enumerate() {
                let scores: Vec<f64> = kh
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let att = softmax(&scores);
                for c in 0..dk {
                    heads_out[i].push(att.iter().zip(&vh).map(|(a, vj)| a * vj[c]).sum());
                }
            }
        }
        let x_attn = matmul(&heads_out, &mat(&blk.w_o));
        let x_rc = layer_norm(&add(&x, &x_attn), blk.ln1_gamma.data(), blk.ln1_beta.data());
        let hidden = map(&add_bias(&matmul(&x_rc, &mat(&blk.w1)), blk.b1.data()), |v| v.max(0.0));
        let ffn = add_bias(&matmul(&hidden, &mat(&blk.w2)), blk.b2.data());
        let branch = matmul(&map(&matmul(&x_rc, &mat(&w[2])), |v| v.max(0.0)), &mat(&w[3]));
        let s = model.peft.adapters[b].scale;
        let total = add(&add(&x_rc, &ffn), &map(&branch, |v| s * v));
        x = layer_norm(&total, blk.ln2_gamma.data(), blk.ln2_beta.data());
    }
    let n = x.len() as f64;
    let pooled: Vec<f64> = (0..cfg.d_model).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let out = matmul(&vec![pooled], &mat(&model.peft.head.weight));
    out[0].iter().zip(model.peft.head.bias.data()).map(|(a, b)| a + b).collect()
}

pub fn reference_log_lik(output: &[f64], target: Target, task: Task, noise_sigma: f64) -> f64 {
    match (task, target) {
        (Task::Classification, Target::Class(c)) => {
            let m = output.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + output.iter().map(|o| (o - m).exp()).sum::<f64>().ln();
            output[c] - lse
        }
        (Task::Regression, Target::Value(y)) => {
            let z = (y - output[0]) / noise_sigma;
            -0.5 * z * z - noise_sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        }
        _ => panic!("target does not match task"),
    }
}

/// Closed-form KL between scalar Gaussians, written independently of the library.
pub fn scalar_kl(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    (sigma_p / sigma_q).ln() + (sigma_q * sigma_q + (mu_q - mu_p).powi(2)) / (2.0 * sigma_p * sigma_p) - 0.5
}

/// Negative ELBO from the reference forward pass; `noise[s]` is the
/// per-Gaussian noise of sample `s`, shared by the batch.
pub fn reference_negative_elbo(
    model: &BhPeftModel,
    batch: &[&Example],
    noise: &[Vec<Tensor>],
    dataset_size: usize,
    kl_weight: f64,
    noise_sigma: f64,
) -> f64 {
    let gaussians = model.peft.gaussians();
    let mut ll = 0.0;
    for eps in noise {
        let weights: Vec<Tensor> = gaussians
            .iter()
            .zip(eps)
            .map(|(p, e)| {
                let data = p
                    .mu
                    .data()
                    .iter()
                    .zip(p.g.data())
                    .zip(e.data())
                    .map(|((m, g), e)| m + g * g * e)
                    .collect();
                Tensor::new(p.mu.shape().to_vec(), data).unwrap()
            })
            .collect();
        for ex in batch {
            let out = reference_forward(model, &ex.tokens, &weights);
            ll += reference_log_lik(&out, ex.target, model.config.task, noise_sigma);
        }
    }
    let mut kl = 0.0;
    for (p, prior) in gaussians.iter().zip(&model.priors) {
        for i in 0..p.len() {
            let sq = (p.g.data()[i] * p.g.data()[i]).max(1e-12);
            kl += scalar_kl(p.mu.data()[i], sq, prior.mu0.data()[i], prior.sigma0.data()[i]);
        }
    }
    -ll / noise.len() as f64 + batch.len() as f64 / dataset_size as f64 * kl_weight * kl
}

// 15-point Kronrod nodes/weights and the embedded 7-point Gauss weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gauss_kronrod(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let pair = f(c - h * XGK[j]) + f(c + h * XGK[j]);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod (7/15) quadrature to absolute tolerance `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let (value, err) = gauss_kronrod(f, a, b);
    if err <= tol || (b - a).abs() < 1e-9 {
        return value;
    }
    let m = 0.5 * (a + b);
    integrate(f, a, m, 0.5 * tol) + integrate(f, m, b, 0.5 * tol)
}

/// `∫ q ln(q/p) dx` by quadrature over `mu_q ± 16 sigma_q`.
pub fn kl_quadrature(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    let ln_norm = |x: f64, mu: f64, s: f64| -0.5 * ((x - mu) / s).powi(2) - s.ln() - 0.918_938_533_204_672_7;
    let f = |x: f64| {
        let lq = ln_norm(x, mu_q, sigma_q);
        lq.exp() * (lq - ln_norm(x, mu_p, sigma_p))
    };
    let (a, b) = (mu_q - 16.0 * sigma_q, mu_q + 16.0 * sigma_q);
    let scale = integrate(&f, a, b, 1e-4).abs().max(1e-3);
    integrate(&f, a, b, 1e-12 * scale)
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// The d=4, h=2, L=1, l=2, r=2 instance used by the gradient checks.
pub fn tiny_config(task: Task) -> ModelConfig {
    ModelConfig {
        d_model: 4,
        heads: 2,
        blocks: 1,
        vocab: 30,
        max_len: 4,
        prefix_len: 2,
        prefix_rank: 2,
        adapter_rank: 2,
        task,
        classes: 3,
        ..Default::default()
    }
}

/// Three examples matching [`tiny_config`].
pub fn tiny_batch(task: Task) -> Vec<Example> {
    let target = |c: usize, v: f64| match task {
        Task::Classification => Target::Class(c),
        Task::Regression => Target::Value(v),
    };
    vec![
        Example {
            tokens: vec![3, 17, 5],
            target: target(2, 0.4),
        },
        Example {
            tokens: vec![9, 1, 22, 4],
            target: target(0, -0.3),
        },
        Example {
            tokens: vec![11],
            target: target(1, 0.8),
        },
    ]
}
