//! Factorized-Gaussian variational weights.
//!
//! Each weight matrix `W` has a variational posterior `N(mu, diag(sigma²))`
//! with `sigma = g²`. Priors are elementwise Gaussians so that a constant
//! prior and a chained posterior share the same KL code path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::random::{self, Rng};

/// Standard deviation of the constant first-round prior.
pub const DEFAULT_PRIOR_SIGMA: f64 = 0.1;
/// Default upper bound of the `g` initialization interval.
pub const DEFAULT_DELTA: f64 = 0.1;
/// Lower bound applied to `sigma` inside the KL logarithm.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParameter {
    pub name: String,
    pub mu: Tensor,
    /// Pre-deviation; the standard deviation is `g²`.
    pub g: Tensor,
}

/// One reparameterized draw and the noise that produced it.
#[derive(Clone, Debug)]
pub struct Sample {
    pub weight: Tensor,
    pub eps: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mu0: Tensor,
    pub sigma0: Tensor,
}

impl GaussianParameter {
    pub fn new(name: impl Into<String>, mu: Tensor, g: Tensor) -> Result<Self> {
        if mu.shape() != g.shape() {
            return Err(Error::Shape {
                op: "gaussian_parameter",
                left: mu.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        Ok(Self {
            name: name.into(),
            mu,
            g,
        })
    }

    /// `mu ~ U(-√(6/d), √(6/d))`, `g ~ U(δ/√2, δ)`.
    pub fn init(
        name: impl Into<String>,
        shape: &[usize],
        hidden_dim: usize,
        delta: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(Error::config("hidden dimension must be positive"));
        }
        if !delta.is_finite() || delta <= 0.0 {
            return Err(Error::config(format!("delta must be positive, got {delta}")));
        }
        let bound = (6.0 / hidden_dim as f64).sqrt();
        let mu = Tensor::from_fn(shape, || random::uniform(rng, -bound, bound));
        let g = Tensor::from_fn(shape, || random::uniform(rng, delta / 2f64.sqrt(), delta));
        Self::new(name, mu, g)
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Tensor {
        self.g.map(|g| g * g)
    }

    pub fn draw_noise(&self, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(self.shape(), || random::standard_normal(rng))
    }

    pub fn sample(&self, rng: &mut Rng) -> Sample {
        let eps = self.draw_noise(rng);
        let weight = self.weight_from_noise(&eps).expect("noise drawn with parameter shape");
        Sample { weight, eps }
    }

    /// `W = mu + g² ⊙ eps` for a given noise tensor.
    pub fn weight_from_noise(&self, eps: &Tensor) -> Result<Tensor> {
        if eps.shape() != self.shape() {
            return Err(Error::Shape {
                op: "reparameterize",
                left: self.shape().to_vec(),
                right: eps.shape().to_vec(),
            });
        }
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.g.data())
            .zip(eps.data())
            .map(|((m, g), e)| m + (g * g) * e)
            .collect();
        Tensor::new(self.shape().to_vec(), data)
    }

    /// Maps `∂L/∂W` to `(∂L/∂mu, ∂L/∂g)` through the reparameterization.
    pub fn pullback(&self, eps: &Tensor, grad_weight: &Tensor) -> Result<(Tensor, Tensor)> {
        let grad_g = grad_weight.zip_map(eps, "pullback", |gw, e| gw * e)?.mul(&self.g)?.scale(2.0);
        Ok((grad_weight.clone(), grad_g))
    }
}

impl PriorSpec {
    pub fn new(mu0: Tensor, sigma0: Tensor) -> Result<Self> {
        if mu0.shape() != sigma0.shape() {
            return Err(Error::Shape {
                op: "prior",
                left: mu0.shape().to_vec(),
                right: sigma0.shape().to_vec(),
            });
        }
        if let Some(bad) = sigma0.data().iter().find(|s| !s.is_finite() || **s <= 0.0) {
            return Err(Error::config(format!("prior sigma must be positive, got {bad}")));
        }
        Ok(Self { mu0, sigma0 })
    }

    /// Constant `N(0, sigma0²)` prior of the given shape.
    pub fn standard(shape: &[usize], sigma0: f64) -> Result<Self> {
        Self::new(Tensor::zeros(shape), Tensor::full(shape, sigma0))
    }

    pub fn shape(&self) -> &[usize] {
        self.mu0.shape()
    }
}

fn check_prior(p: &GaussianParameter, prior: &PriorSpec) -> Result<()> {
    if p.shape() != prior.shape() {
        return Err(Error::Shape {
            op: "kl_to_prior",
            left: p.shape().to_vec(),
            right: prior.shape().to_vec(),
        });
    }
    Ok(())
}

/// Closed-form `KL(q ‖ prior)` summed over elements.
pub fn kl_to_prior(p: &GaussianParameter, prior: &PriorSpec) -> Result<f64> {
    check_prior(p, prior)?;
    let mut total = 0.0;
    for (((m, g), m0), s0) in p
        .mu
        .data()
        .iter()
        .zip(p.g.data())
        .zip(prior.mu0.data())
        .zip(prior.sigma0.data())
    {
        let sigma = g * g;
        let diff = m - m0;
        total += (s0 / sigma.max(SIGMA_FLOOR)).ln() + (sigma * sigma + diff * diff) / (2.0 * s0 * s0)
            - 0.5;
    }
    Ok(total)
}

/// KL value with its gradients with respect to `mu` and `g`.
pub fn kl_to_prior_with_grad(p: &GaussianParameter, prior: &PriorSpec) -> Result<(f64, Tensor, Tensor)> {
    let value = kl_to_prior(p, prior)?;
    let n = p.len();
    let mut d_mu = Vec::with_capacity(n);
    let mut d_g = Vec::with_capacity(n);
    for (((m, g), m0), s0) in p
        .mu
        .data()
        .iter()
        .zip(p.g.data())
        .zip(prior.mu0.data())
        .zip(prior.sigma0.data())
    {
        let sigma = g * g;
        let inv_var0 = 1.0 / (s0 * s0);
        d_mu.push((m - m0) * inv_var0);
        let log_term = if sigma > SIGMA_FLOOR { -1.0 / sigma } else { 0.0 };
        d_g.push((log_term + sigma * inv_var0) * 2.0 * g);
    }
    Ok((
        value,
        Tensor::new(p.shape().to_vec(), d_mu)?,
        Tensor::new(p.shape().to_vec(), d_g)?,
    ))
}

/// Deep copy of the current posterior, usable as the next prior.
pub fn posterior_snapshot<'a>(params: impl IntoIterator<Item = &'a GaussianParameter>) -> Vec<PriorSpec> {
    params
        .into_iter()
        .map(|p| PriorSpec {
            mu0: p.mu.clone(),
            // a collapsed g would give sigma0 = 0; keep the prior proper
            sigma0: p.g.map(|g| (g * g).max(SIGMA_FLOOR)),
        })
        .collect()
}
