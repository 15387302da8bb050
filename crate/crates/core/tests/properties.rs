mod common;

use bhpeft::data::{Example, Target};
use bhpeft::inference::{rejected_count, rejection_from_predictions, summarize};
use bhpeft::model::{BhPeftModel, ModelConfig, Task};
use bhpeft::numerics::Tensor;
use bhpeft::persistence::Checkpoint;
use bhpeft::variational::{kl_to_prior, posterior_snapshot, GaussianParameter, PriorSpec};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        t in matrix(3, 5),
        shift in -50.0..50.0f64,
    ) {
        let p = t.softmax_rows().unwrap();
        for r in 0..3 {
            let row = p.row(r);
            prop_assert!(row.iter().all(|v| *v > 0.0 && *v <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = t.map(|v| v + shift).softmax_rows().unwrap();
        for (a, b) in p.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(a in matrix(2, 3), b in matrix(3, 4), c in matrix(4, 2)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_the_prior(
        mu in prop::collection::vec(-1.0..1.0f64, 4),
        g in prop::collection::vec(0.05..1.0f64, 4),
        mu0 in prop::collection::vec(-1.0..1.0f64, 4),
        s0 in prop::collection::vec(0.05..1.0f64, 4),
    ) {
        let p = GaussianParameter::new("w", Tensor::new(vec![4], mu).unwrap(), Tensor::new(vec![4], g).unwrap()).unwrap();
        let prior = PriorSpec::new(Tensor::new(vec![4], mu0).unwrap(), Tensor::new(vec![4], s0).unwrap()).unwrap();
        prop_assert!(kl_to_prior(&p, &prior).unwrap() >= 0.0);
        let snap = posterior_snapshot([&p]);
        prop_assert!(kl_to_prior(&p, &snap[0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_matches_scalar_formula_summed(
        vals in prop::collection::vec((-1.0..1.0f64, 0.1..1.0f64, -1.0..1.0f64, 0.05..1.0f64), 1..6),
    ) {
        let n = vals.len();
        let t = |f: fn(&(f64, f64, f64, f64)) -> f64| Tensor::new(vec![n], vals.iter().map(f).collect()).unwrap();
        let p = GaussianParameter::new("w", t(|v| v.0), t(|v| v.1)).unwrap();
        let prior = PriorSpec::new(t(|v| v.2), t(|v| v.3)).unwrap();
        let want: f64 = vals.iter().map(|v| common::scalar_kl(v.0, v.1 * v.1, v.2, v.3)).sum();
        prop_assert!(common::relative_error(kl_to_prior(&p, &prior).unwrap(), want, 1e-12) < 1e-10);
    }

    #[test]
    fn predictive_summary_ignores_sample_order(
        logits in prop::collection::vec(prop::collection::vec(-4.0..4.0f64, 3), 2..8),
        rot in 0usize..8,
    ) {
        let samples: Vec<Vec<f64>> = logits
            .iter()
            .map(|l| Tensor::new(vec![1, 3], l.clone()).unwrap().softmax_rows().unwrap().into_data())
            .collect();
        let a = summarize(Task::Classification, &samples).unwrap();
        let mut rotated = samples.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        let b = summarize(Task::Classification, &rotated).unwrap();
        prop_assert!(a.total_uncertainty >= 0.0);
        prop_assert!((a.total_uncertainty - b.total_uncertainty).abs() < 1e-12);
        prop_assert!((a.mean_output.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.mean_output.iter().zip(&b.mean_output) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_samples_have_zero_uncertainty(row in prop::collection::vec(-4.0..4.0f64, 1..4), s in 2usize..6) {
        let task = if row.len() == 1 { Task::Regression } else { Task::Classification };
        let p = summarize(task, &vec![row; s]).unwrap();
        prop_assert_eq!(p.total_uncertainty, 0.0);
    }

    #[test]
    fn rejection_counts_are_monotone_and_bounded(n in 1usize..400, a in 0.0..0.99f64, b in 0.0..0.99f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rejected_count(lo, n) <= rejected_count(hi, n));
        prop_assert!(rejected_count(hi, n) <= n);
        prop_assert!(rejected_count(lo, n) as f64 >= lo * n as f64 - 1e-9);
    }

    #[test]
    fn rejection_keeps_the_least_uncertain(
        unc in prop::collection::vec(0.0..1.0f64, 5..30),
        rate in 0.0..0.9f64,
    ) {
        let n = unc.len();
        prop_assume!(rejected_count(rate, n) < n);
        let preds: Vec<_> = unc
            .iter()
            .map(|u| {
                let mut p = summarize(Task::Regression, &[vec![0.0], vec![0.0]]).unwrap();
                p.total_uncertainty = *u;
                p
            })
            .collect();
        // squared error of example i is unc[i]^2, so the metric reveals which survive
        let examples: Vec<Example> = unc
            .iter()
            .map(|u| Example { tokens: vec![1], target: Target::Value(*u) })
            .collect();
        let rows = rejection_from_predictions(Task::Regression, &preds, &examples, &[rate]).unwrap();
        let k = rejected_count(rate, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| unc[b].partial_cmp(&unc[a]).unwrap().then(b.cmp(&a)));
        let kept = &order[k..];
        let want = kept.iter().map(|&i| unc[i] * unc[i]).sum::<f64>() / kept.len() as f64;
        prop_assert_eq!(rows[0].n_kept, n - k);
        prop_assert!((rows[0].metric_value - want).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(12) })]

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        heads in 1usize..3,
        per_head in 1usize..4,
        blocks in 1usize..3,
        prefix_len in 0usize..3,
        seed in any::<u64>(),
        regression in any::<bool>(),
    ) {
        let cfg = ModelConfig {
            d_model: heads * per_head,
            heads,
            blocks,
            vocab: 20,
            max_len: 5,
            prefix_len,
            prefix_rank: 2,
            adapter_rank: 3,
            task: if regression { Task::Regression } else { Task::Classification },
            backbone_seed: seed ^ 1,
            ..Default::default()
        };
        let ck = Checkpoint::new(BhPeftModel::new(cfg, seed).unwrap(), seed);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
