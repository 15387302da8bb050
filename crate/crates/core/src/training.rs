//! Negative ELBO objective and the optimization loop.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Example, Target};
use crate::error::{Error, Result};
use crate::model::{BhPeftModel, Task};
use crate::numerics::{Tape, Tensor, Var};
use crate::parallel::{try_map_indexed, Execution};
use crate::random::{self, Rng};
use crate::variational::kl_to_prior_with_grad;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Monte Carlo samples per objective evaluation.
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Multiplier of the KL term; anything but 1 departs from the ELBO.
    pub kl_weight: f64,
    /// Fixed observation noise of the regression likelihood.
    pub noise_sigma: f64,
    /// Draw a separate noise set for every example instead of one per sample
    /// index shared across the batch.
    pub per_example_noise: bool,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            samples: 1,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            kl_weight: 1.0,
            noise_sigma: 1.0,
            per_example_noise: false,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m));
        if self.samples < 1 {
            return fail("samples must be >= 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return fail("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !self.adam_eps.is_finite() || self.adam_eps <= 0.0 {
            return fail("adam_eps must be > 0");
        }
        if !self.kl_weight.is_finite() || self.kl_weight < 0.0 {
            return fail("kl_weight must be a finite non-negative number");
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma <= 0.0 {
            return fail("noise_sigma must be > 0");
        }
        Ok(())
    }

    pub fn objective(&self, dataset_size: usize) -> Objective {
        Objective {
            samples: self.samples,
            kl_weight: self.kl_weight,
            noise_sigma: self.noise_sigma,
            dataset_size,
            per_example_noise: self.per_example_noise,
            execution: self.execution,
        }
    }
}

/// Log-likelihood node of one output: `log softmax(output)[class]` or the
/// Gaussian log density of the target around the scalar output.
pub fn log_likelihood(tape: &mut Tape, output: Var, target: Target, task: Task, noise_sigma: f64) -> Result<Var> {
    match (task, target) {
        (Task::Classification, Target::Class(c)) => tape.log_softmax_pick(output, c),
        (Task::Regression, Target::Value(y)) => {
            if tape.value(output).len() != 1 {
                return Err(Error::input("regression output must be a scalar"));
            }
            Ok(tape.gaussian_log_lik(output, y, noise_sigma))
        }
        (_, t) => Err(Error::input(format!("target {t:?} does not match task {task:?}"))),
    }
}

/// Plain-value log-likelihood of an output vector.
pub fn log_likelihood_value(output: &Tensor, target: Target, task: Task, noise_sigma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let out = tape.constant(output.clone());
    let ll = log_likelihood(&mut tape, out, target, task, noise_sigma)?;
    Ok(tape.value(ll).item())
}

/// Settings of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub samples: usize,
    pub kl_weight: f64,
    pub noise_sigma: f64,
    /// `N`, the size of the full training set.
    pub dataset_size: usize,
    pub per_example_noise: bool,
    pub execution: Execution,
}

/// Standard-normal noise used by one objective evaluation, replayable.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws {
    /// `sets[s]` (shared) or `sets[s * batch + i]` (per example); each set
    /// holds one tensor per Gaussian parameter.
    pub sets: Vec<Vec<Tensor>>,
    pub per_example: bool,
    pub batch: usize,
}

impl NoiseDraws {
    pub fn draw(model: &BhPeftModel, samples: usize, batch: usize, per_example: bool, rng: &mut Rng) -> Self {
        let count = if per_example { samples * batch } else { samples };
        Self {
            sets: (0..count).map(|_| model.draw_noise(rng)).collect(),
            per_example,
            batch,
        }
    }

    /// All-zero noise (weights at their means).
    pub fn zeros(model: &BhPeftModel, samples: usize, batch: usize) -> Self {
        let set: Vec<Tensor> = model.gaussians().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            sets: vec![set; samples],
            per_example: false,
            batch,
        }
    }

    pub fn samples(&self) -> usize {
        if self.per_example {
            self.sets.len() / self.batch.max(1)
        } else {
            self.sets.len()
        }
    }

    fn set(&self, s: usize, i: usize) -> &[Tensor] {
        if self.per_example {
            &self.sets[s * self.batch + i]
        } else {
            &self.sets[s]
        }
    }
}

/// Value and gradient of the negative ELBO on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboEvaluation {
    pub loss: f64,
    /// `-(1/S) Σ log p`.
    pub nll_term: f64,
    /// `(|B|/N) · kl_weight · Σ KL`.
    pub kl_term: f64,
    /// Gradients in [`crate::model::PeftState::trainables`] order, if requested.
    pub gradients: Option<Vec<Tensor>>,
}

struct Contribution {
    log_lik: f64,
    grads: Option<Vec<Tensor>>,
}

fn check_objective(obj: &Objective, batch_len: usize) -> Result<()> {
    if batch_len == 0 {
        return Err(Error::input("empty batch"));
    }
    if obj.samples == 0 {
        return Err(Error::config("samples must be >= 1"));
    }
    if obj.dataset_size < batch_len {
        return Err(Error::config(format!(
            "dataset size {} smaller than batch size {batch_len}",
            obj.dataset_size
        )));
    }
    Ok(())
}

/// Negative ELBO of `batch` with the given noise:
/// `-(1/S) Σ_s Σ_batch log p(y | x, W_s) + (|B|/N) · kl_weight · Σ KL(q ‖ prior)`.
pub fn negative_elbo_with_noise(
    model: &BhPeftModel,
    batch: &[&Example],
    obj: &Objective,
    noise: &NoiseDraws,
    with_gradients: bool,
) -> Result<ElboEvaluation> {
    check_objective(obj, batch.len())?;
    let s_count = noise.samples();
    if s_count != obj.samples || (noise.per_example && noise.batch != batch.len()) {
        return Err(Error::input("noise draws do not match objective"));
    }
    let task = model.config.task;
    let n_batch = batch.len();
    let gaussians = model.gaussians();

    // one job per (sample, example), reduced below in index order
    let contributions = try_map_indexed(obj.execution, s_count * n_batch, |job| {
        let (s, i) = (job / n_batch, job % n_batch);
        let eps = noise.set(s, i);
        let weights = model.weights_from_noise(eps)?;
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, &weights, &batch[i].tokens, with_gradients)?;
        let ll = log_likelihood(&mut tape, rec.output, batch[i].target, task, obj.noise_sigma)?;
        let log_lik = tape.value(ll).item();
        if !with_gradients {
            return Ok(Contribution { log_lik, grads: None });
        }
        let mut g = tape.backward(ll)?;
        let mut grads = Vec::with_capacity(2 * weights.len() + 2);
        for ((p, var), e) in gaussians.iter().zip(&rec.weights).zip(eps) {
            let (d_mu, d_g) = p.pullback(e, &g.take(*var))?;
            grads.push(d_mu);
            grads.push(d_g);
        }
        grads.push(g.take(rec.head_weight));
        grads.push(g.take(rec.head_bias));
        Ok(Contribution {
            log_lik,
            grads: Some(grads),
        })
    })?;

    let inv_s = 1.0 / s_count as f64;
    let kl_scale = n_batch as f64 / obj.dataset_size as f64 * obj.kl_weight;

    let mut total_ll = 0.0;
    for c in &contributions {
        total_ll += c.log_lik;
    }
    let nll_term = -inv_s * total_ll;

    let mut kl_sum = 0.0;
    let mut kl_grads = Vec::with_capacity(gaussians.len());
    for (p, prior) in gaussians.iter().zip(&model.priors) {
        let (kl, d_mu, d_g) = kl_to_prior_with_grad(p, prior)?;
        kl_sum += kl;
        kl_grads.push((d_mu, d_g));
    }
    let kl_term = kl_scale * kl_sum;

    let gradients = if with_gradients {
        let mut acc: Vec<Tensor> = model.peft.trainables().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for c in contributions {
            for (a, g) in acc.iter_mut().zip(c.grads.expect("gradients requested")) {
                a.add_assign(&g)?;
            }
        }
        let mut out: Vec<Tensor> = acc.into_iter().map(|a| a.scale(-inv_s)).collect();
        for (k, (d_mu, d_g)) in kl_grads.iter().enumerate() {
            out[2 * k].add_assign(&d_mu.scale(kl_scale))?;
            out[2 * k + 1].add_assign(&d_g.scale(kl_scale))?;
        }
        Some(out)
    } else {
        None
    };

    Ok(ElboEvaluation {
        loss: nll_term + kl_term,
        nll_term,
        kl_term,
        gradients,
    })
}

/// Negative ELBO with fresh noise drawn from `rng`.
pub fn negative_elbo(
    model: &BhPeftModel,
    batch: &[&Example],
    obj: &Objective,
    rng: &mut Rng,
    with_gradients: bool,
) -> Result<ElboEvaluation> {
    let noise = NoiseDraws::draw(model, obj.samples, batch.len(), obj.per_example_noise, rng);
    negative_elbo_with_noise(model, batch, obj, &noise, with_gradients)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::input("parameter and gradient counts differ"));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let (pd, gd) = (p.data_mut(), g.data());
            for (((w, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sum over the epoch's batches; with `kl_weight = 1` this estimates the
    /// full-dataset negative ELBO.
    pub loss: f64,
    pub nll_term: f64,
    pub kl_term: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub examples: usize,
    pub steps: u64,
    pub kl_weight: f64,
    /// False when `kl_weight != 1`, i.e. the objective is not the ELBO.
    pub faithful_elbo: bool,
}

const SHUFFLE_STREAM: u64 = 0x5_4FF1;
const NOISE_STREAM: u64 = 0x0_1015E;

/// Trains every Gaussian `mu`/`g` and the task head on `data`.
pub fn train(model: &mut BhPeftModel, data: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_callback(model, data, cfg, |_, _| ControlFlow::Continue(()))
}

/// Like [`train`], calling `after_epoch(epoch, model)` after every epoch; a
/// `Break` ends training early.
pub fn train_with_callback(
    model: &mut BhPeftModel,
    data: &[Example],
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(usize, &BhPeftModel) -> ControlFlow<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let n = data.len();
    let obj = cfg.objective(n);
    let mut adam = Adam::new(cfg);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = random::derive(cfg.seed, SHUFFLE_STREAM);
    let mut noise_rng = random::derive(cfg.seed, NOISE_STREAM);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut metrics = EpochMetrics {
            epoch,
            loss: 0.0,
            nll_term: 0.0,
            kl_term: 0.0,
        };
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let eval = negative_elbo(model, &batch, &obj, &mut noise_rng, true)?;
            if !eval.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                    value: eval.loss,
                });
            }
            metrics.loss += eval.loss;
            metrics.nll_term += eval.nll_term;
            metrics.kl_term += eval.kl_term;
            let grads = eval.gradients.expect("gradients requested");
            adam.update(model.peft.trainables_mut(), &grads)?;
        }
        epochs.push(metrics);
        if after_epoch(epoch, model).is_break() {
            break;
        }
    }
    Ok(TrainReport {
        epochs,
        examples: n,
        steps: adam.steps(),
        kl_weight: cfg.kl_weight,
        faithful_elbo: cfg.kl_weight == 1.0,
    })
}

/// `log p` of one example under mean weights.
pub fn mean_log_likelihood(model: &BhPeftModel, example: &Example, noise_sigma: f64) -> Result<f64> {
    let out = model.forward_with_weights(&example.tokens, &model.mean_weights())?;
    log_likelihood_value(&out, example.target, model.config.task, noise_sigma)
}
