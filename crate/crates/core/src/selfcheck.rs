//! Runtime battery of analytic-oracle checks behind `bhpeft selfcheck`.

use rand::Rng as _;

use crate::data::{Example, Target};
use crate::error::Result;
use crate::inference::predict;
use crate::model::{BhPeftModel, ModelConfig, Task, WeightMode};
use crate::numerics::Tensor;
use crate::parallel::Execution;
use crate::random;
use crate::training::{negative_elbo_with_noise, NoiseDraws, TrainConfig};
use crate::variational::{kl_to_prior, GaussianParameter, PriorSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Adaptive Simpson integration of `f` over `[a, b]` to absolute tolerance
/// `tol`, bisecting at most 30 times along any branch.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 30)
}

/// `∫ q ln(q/p)` for scalar Gaussians by quadrature over `mu_q ± 14 sigma_q`.
pub fn kl_by_quadrature(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    let log_pdf = |x: f64, mu: f64, s: f64| {
        let z = (x - mu) / s;
        -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let integrand = |x: f64| {
        let lq = log_pdf(x, mu_q, sigma_q);
        lq.exp() * (lq - log_pdf(x, mu_p, sigma_p))
    };
    let (a, b) = (mu_q - 14.0 * sigma_q, mu_q + 14.0 * sigma_q);
    let coarse = adaptive_simpson(&integrand, a, b, 1e-3);
    adaptive_simpson(&integrand, a, b, 1e-11 * coarse.abs().max(1e-3))
}

fn scalar_kl(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> Result<f64> {
    let q = GaussianParameter::new("w", Tensor::scalar(mu_q), Tensor::scalar(sigma_q.sqrt()))?;
    let p = PriorSpec::new(Tensor::scalar(mu_p), Tensor::scalar(sigma_p))?;
    kl_to_prior(&q, &p)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn check_kl(cases: usize) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for (mq, sq, mp, sp, exact) in [
        (0.1, 0.1, 0.0, 0.1, 0.5),
        (0.0, 0.2, 0.0, 0.1, 0.5f64.ln() + 2.0 - 0.5),
    ] {
        worst = worst.max(rel_err(scalar_kl(mq, sq, mp, sp)?, exact, 1e-12));
    }
    let mut rng = random::derive(0x5E1F, 1);
    for _ in 0..cases {
        let mq = rng.random_range(-1.0..1.0);
        let sq = rng.random_range(0.02..0.5);
        let mp = rng.random_range(-1.0..1.0);
        let sp = rng.random_range(0.02..0.5);
        let closed = scalar_kl(mq, sq, mp, sp)?;
        worst = worst.max(rel_err(closed, kl_by_quadrature(mq, sq, mp, sp), 1e-9));
    }
    Ok(CheckOutcome {
        name: "kl_closed_form_vs_quadrature",
        passed: worst <= 1e-6,
        detail: format!("{cases} cases + 2 anchors, worst relative error {worst:.2e}"),
    })
}

fn tiny_model(task: Task) -> Result<BhPeftModel> {
    BhPeftModel::new(
        ModelConfig {
            d_model: 4,
            heads: 2,
            blocks: 1,
            vocab: 30,
            max_len: 3,
            prefix_len: 2,
            prefix_rank: 2,
            adapter_rank: 2,
            task,
            classes: 3,
            ..Default::default()
        },
        7,
    )
}

fn check_gradients(task: Task, execution: Execution) -> Result<CheckOutcome> {
    let model = tiny_model(task)?;
    let target = |c: usize, v: f64| match task {
        Task::Classification => Target::Class(c),
        Task::Regression => Target::Value(v),
    };
    let examples = [
        Example {
            tokens: vec![3, 17, 5],
            target: target(2, 0.4),
        },
        Example {
            tokens: vec![9, 1, 22],
            target: target(0, -0.3),
        },
        Example {
            tokens: vec![11, 4],
            target: target(1, 0.1),
        },
    ];
    let batch: Vec<&Example> = examples.iter().collect();
    let obj = TrainConfig {
        samples: 2,
        execution,
        ..Default::default()
    }
    .objective(5);
    let noise = NoiseDraws::draw(&model, 2, batch.len(), false, &mut random::seeded(3));
    let analytic = negative_elbo_with_noise(&model, &batch, &obj, &noise, true)?
        .gradients
        .expect("gradients requested");
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for (t, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let mut plus = model.clone();
            plus.peft.trainables_mut()[t].data_mut()[j] += h;
            let mut minus = model.clone();
            minus.peft.trainables_mut()[t].data_mut()[j] -= h;
            let lp = negative_elbo_with_noise(&plus, &batch, &obj, &noise, false)?.loss;
            let lm = negative_elbo_with_noise(&minus, &batch, &obj, &noise, false)?.loss;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(grad.data()[j], fd, 1e-6));
            checked += 1;
        }
    }
    Ok(CheckOutcome {
        name: match task {
            Task::Classification => "elbo_gradients_classification",
            Task::Regression => "elbo_gradients_regression",
        },
        passed: worst <= 1e-4,
        detail: format!("{checked} coordinates, worst relative error {worst:.2e}"),
    })
}

fn check_degenerate() -> Result<CheckOutcome> {
    let mut cfg = tiny_model(Task::Classification)?.config;
    cfg.prefix_len = 0;
    cfg.adapter_scale = 0.0;
    let model = BhPeftModel::new(cfg, 3)?;
    let tokens = [4, 8, 15];
    let plain_equal = model.forward(&tokens, WeightMode::Mean)? == model.reference_output(&tokens)?;

    let mut zero_g = tiny_model(Task::Classification)?;
    for p in zero_g.peft.gaussians_mut() {
        p.g = Tensor::zeros(p.g.shape());
    }
    let mean = zero_g.forward(&tokens, WeightMode::Mean)?;
    let sampled = zero_g.forward(&tokens, WeightMode::Sample(&mut random::seeded(1)))?;
    let pred = predict(&zero_g, &tokens, 8, &mut random::seeded(2))?;
    let passed = plain_equal && mean == sampled && pred.total_uncertainty == 0.0;
    Ok(CheckOutcome {
        name: "degenerate_equivalence",
        passed,
        detail: format!(
            "l=0,s=0 equals plain model: {plain_equal}; g=0 sample equals mean: {}; uncertainty {}",
            mean == sampled,
            pred.total_uncertainty
        ),
    })
}

/// Runs every check; `kl_cases` random scalar cases are compared against quadrature.
pub fn run(kl_cases: usize, execution: Execution) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_kl(kl_cases)?,
        check_gradients(Task::Classification, execution)?,
        check_gradients(Task::Regression, execution)?,
        check_degenerate()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_polynomials_and_gaussians() {
        let cubic = adaptive_simpson(&|x| x * x * x - x, 0.0, 2.0, 1e-12);
        assert!((cubic - 2.0).abs() < 1e-12);
        let mass = adaptive_simpson(
            &|x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            -12.0,
            12.0,
            1e-13,
        );
        assert!((mass - 1.0).abs() < 1e-10);
    }

    #[test]
    fn battery_passes() {
        for outcome in run(50, Execution::Sequential).unwrap() {
            assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }
}
