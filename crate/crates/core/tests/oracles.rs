mod common;

use bhpeft::data::Example;
use bhpeft::dynamic::chain_prior;
use bhpeft::model::{BhPeftModel, Task};
use bhpeft::numerics::Tensor;
use bhpeft::random;
use bhpeft::training::{negative_elbo_with_noise, NoiseDraws, TrainConfig};
use bhpeft::variational::{kl_to_prior, GaussianParameter, PriorSpec};
use common::*;
use rand::Rng as _;

#[test]
fn quadrature_reproduces_known_integrals() {
    let v = integrate(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-13);
    assert!((v - 2.0).abs() < 1e-12);
    assert!((kl_quadrature(0.1, 0.1, 0.0, 0.1) - 0.5).abs() < 1e-10);
}

#[test]
fn closed_form_kl_matches_quadrature() {
    let mut rng = random::derive(44, 0);
    for _ in 0..200 {
        let (mq, mp) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (sq, sp) = (rng.random_range(0.01..1.0), rng.random_range(0.01..1.0));
        let q = GaussianParameter::new("w", Tensor::scalar(mq), Tensor::scalar(f64::sqrt(sq))).unwrap();
        let p = PriorSpec::new(Tensor::scalar(mp), Tensor::scalar(sp)).unwrap();
        let closed = kl_to_prior(&q, &p).unwrap();
        let numeric = kl_quadrature(mq, sq, mp, sp);
        assert!(relative_error(closed, numeric, 1e-9) < 1e-6, "{closed} vs {numeric}");
    }
}

#[test]
fn tape_forward_matches_reference_forward() {
    for task in [Task::Classification, Task::Regression] {
        let model = BhPeftModel::new(tiny_config(task), 5).unwrap();
        let mut rng = random::seeded(1);
        for ex in tiny_batch(task) {
            for weights in [model.mean_weights(), model.weights_from_noise(&model.draw_noise(&mut rng)).unwrap()] {
                let got = model.forward_with_weights(&ex.tokens, &weights).unwrap();
                let want = reference_forward(&model, &ex.tokens, &weights);
                for (g, w) in got.data().iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12, "{g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn larger_model_matches_reference_forward() {
    let cfg = bhpeft::model::ModelConfig {
        d_model: 12,
        heads: 3,
        blocks: 2,
        vocab: 40,
        max_len: 8,
        prefix_len: 3,
        prefix_rank: 4,
        adapter_rank: 5,
        classes: 4,
        ..Default::default()
    };
    let model = BhPeftModel::new(cfg, 2).unwrap();
    let weights = model.weights_from_noise(&model.draw_noise(&mut random::seeded(8))).unwrap();
    let tokens = [1, 39, 7, 7, 20, 0];
    let got = model.forward_with_weights(&tokens, &weights).unwrap();
    let want = reference_forward(&model, &tokens, &weights);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-11, "{g} vs {w}");
    }
}

#[test]
fn objective_matches_reference_objective() {
    for task in [Task::Classification, Task::Regression] {
        let mut model = BhPeftModel::new(tiny_config(task), 9).unwrap();
        let examples = tiny_batch(task);
        let batch: Vec<&Example> = examples.iter().collect();
        for chained in [false, true] {
            if chained {
                chain_prior(&mut model);
                model.peft.gaussians_mut()[0].mu.data_mut()[0] += 0.3;
            }
            let obj = TrainConfig {
                samples: 3,
                kl_weight: 0.7,
                noise_sigma: 0.5,
                ..Default::default()
            }
            .objective(10);
            let noise = NoiseDraws::draw(&model, 3, batch.len(), false, &mut random::seeded(4));
            let got = negative_elbo_with_noise(&model, &batch, &obj, &noise, false).unwrap().loss;
            let want = reference_negative_elbo(&model, &batch, &noise.sets, 10, 0.7, 0.5);
            assert!(relative_error(got, want, 1e-12) < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn gradients_match_central_differences_of_reference_objective() {
    for task in [Task::Classification, Task::Regression] {
        let model = BhPeftModel::new(tiny_config(task), 13).unwrap();
        let examples = tiny_batch(task);
        let batch: Vec<&Example> = examples.iter().collect();
        let obj = TrainConfig {
            samples: 2,
            ..Default::default()
        }
        .objective(6);
        let noise = NoiseDraws::draw(&model, 2, batch.len(), false, &mut random::seeded(21));
        let grads = negative_elbo_with_noise(&model, &batch, &obj, &noise, true)
            .unwrap()
            .gradients
            .unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (t, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = model.clone();
                plus.peft.trainables_mut()[t].data_mut()[j] += h;
                let mut minus = model.clone();
                minus.peft.trainables_mut()[t].data_mut()[j] -= h;
                let fd = (reference_negative_elbo(&plus, &batch, &noise.sets, 6, 1.0, 1.0)
                    - reference_negative_elbo(&minus, &batch, &noise.sets, 6, 1.0, 1.0))
                    / (2.0 * h);
                worst = worst.max(relative_error(g.data()[j], fd, 1e-6));
            }
        }
        assert!(worst < 1e-4, "{task:?}: worst relative error {worst}");
    }
}
