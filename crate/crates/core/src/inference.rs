//! Monte Carlo predictive mean and variance, rejection curves and
//! mean-weight evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::data::{Example, Target};
use crate::error::{Error, Result};
use crate::model::{BhPeftModel, Task, WeightMode};
use crate::parallel::{try_map_indexed, Execution};
use crate::random::{self, Rng};

/// Predictive summary of one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Mean class probabilities, or a single mean output for regression.
    pub mean_output: Vec<f64>,
    /// Unbiased per-class (or scalar) variance; zeros when `samples == 1`.
    pub variance: Vec<f64>,
    pub total_uncertainty: f64,
    /// Argmax of the mean probabilities, lowest index on ties.
    pub predicted_label: Option<usize>,
    pub samples: usize,
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Summarizes per-sample outputs (probability vectors or scalar outputs).
pub fn summarize(task: Task, sample_outputs: &[Vec<f64>]) -> Result<Prediction> {
    let s = sample_outputs.len();
    if s == 0 {
        return Err(Error::config("need at least one sample"));
    }
    let width = sample_outputs[0].len();
    if sample_outputs.iter().any(|o| o.len() != width) {
        return Err(Error::input("sample outputs differ in width"));
    }
    // deviations from the first sample keep constant samples exactly
    // constant and reduce cancellation in the variance
    let pivot = &sample_outputs[0];
    let mut shift_sum = vec![0.0; width];
    let mut shift_sq = vec![0.0; width];
    for o in sample_outputs {
        for c in 0..width {
            let d = o[c] - pivot[c];
            shift_sum[c] += d;
            shift_sq[c] += d * d;
        }
    }
    let n = s as f64;
    let mean: Vec<f64> = (0..width).map(|c| pivot[c] + shift_sum[c] / n).collect();
    let variance: Vec<f64> = (0..width)
        .map(|c| {
            if s > 1 {
                ((shift_sq[c] - shift_sum[c] * shift_sum[c] / n) / (n - 1.0)).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let total_uncertainty = variance.iter().sum();
    let predicted_label = match task {
        Task::Classification => Some(argmax_lowest(&mean)),
        Task::Regression => None,
    };
    Ok(Prediction {
        mean_output: mean,
        variance,
        total_uncertainty,
        predicted_label,
        samples: s,
    })
}

fn sample_outputs(model: &BhPeftModel, tokens: &[u32], samples: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    (0..samples)
        .map(|_| {
            let out = model.forward(tokens, WeightMode::Sample(rng))?;
            let width = out.len();
            Ok(match model.config.task {
                Task::Classification => out.reshape(vec![1, width])?.softmax_rows()?.into_data(),
                Task::Regression => out.into_data(),
            })
        })
        .collect()
}

/// Draws `samples` weight sets and summarizes the outputs. Variance needs
/// `samples >= 2`.
pub fn predict(model: &BhPeftModel, tokens: &[u32], samples: usize, rng: &mut Rng) -> Result<Prediction> {
    if samples < 2 {
        return Err(Error::config(format!(
            "predictive variance needs at least 2 samples, got {samples}"
        )));
    }
    summarize(model.config.task, &sample_outputs(model, tokens, samples, rng)?)
}

/// Monte Carlo predictive mean only; `samples >= 1`.
pub fn predict_mean(model: &BhPeftModel, tokens: &[u32], samples: usize, rng: &mut Rng) -> Result<Prediction> {
    if samples < 1 {
        return Err(Error::config("need at least one sample"));
    }
    let mut p = summarize(model.config.task, &sample_outputs(model, tokens, samples, rng)?)?;
    p.variance.iter_mut().for_each(|v| *v = 0.0);
    p.total_uncertainty = 0.0;
    Ok(p)
}

/// Predictions for every example, each with its own rng stream derived from
/// `(seed, index)`.
pub fn predict_all(
    model: &BhPeftModel,
    examples: &[Example],
    samples: usize,
    seed: u64,
    execution: Execution,
) -> Result<Vec<Prediction>> {
    try_map_indexed(execution, examples.len(), |i| {
        predict(model, &examples[i].tokens, samples, &mut random::derive(seed, i as u64))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Accuracy,
    Mse,
}

impl MetricName {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification => MetricName::Accuracy,
            Task::Regression => MetricName::Mse,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Accuracy => "accuracy",
            MetricName::Mse => "mse",
        }
    }
}

fn point_metric(task: Task, pairs: impl Iterator<Item = (Vec<f64>, Target)>) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (out, target) in pairs {
        n += 1;
        match (task, target) {
            (Task::Classification, Target::Class(c)) => {
                if argmax_lowest(&out) == c {
                    total += 1.0;
                }
            }
            (Task::Regression, Target::Value(y)) => {
                let d = out[0] - y;
                total += d * d;
            }
            (_, t) => return Err(Error::input(format!("target {t:?} does not match task"))),
        }
    }
    if n == 0 {
        return Err(Error::input("no examples to evaluate"));
    }
    Ok((total / n as f64, n))
}

/// Accuracy or MSE with every Gaussian weight at its mean.
pub fn evaluate_mean(model: &BhPeftModel, examples: &[Example], execution: Execution) -> Result<f64> {
    let weights = model.mean_weights();
    let outs = try_map_indexed(execution, examples.len(), |i| {
        Ok(model.forward_with_weights(&examples[i].tokens, &weights)?.into_data())
    })?;
    let task = model.config.task;
    Ok(point_metric(task, outs.into_iter().zip(examples.iter().map(|e| e.target)))?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    pub rate: f64,
    pub n_kept: usize,
    pub metric_name: MetricName,
    pub metric_value: f64,
}

/// `⌈r·N⌉`, insensitive to rounding noise in the product.
pub fn rejected_count(rate: f64, n: usize) -> usize {
    let x = rate * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Rejection rows from precomputed predictions.
pub fn rejection_from_predictions(
    task: Task,
    predictions: &[Prediction],
    examples: &[Example],
    rates: &[f64],
) -> Result<Vec<RejectionRow>> {
    let n = examples.len();
    if n == 0 || predictions.len() != n {
        return Err(Error::input("predictions and examples must be non-empty and aligned"));
    }
    if rates.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::input("rejection rates must be sorted ascending"));
    }
    // most uncertain first; on ties the later index is rejected first
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .total_uncertainty
            .total_cmp(&predictions[a].total_uncertainty)
            .then(b.cmp(&a))
    });
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::input(format!("rejection rate {rate} outside [0, 1)")));
        }
        let k = rejected_count(rate, n);
        if k >= n {
            return Err(Error::input(format!("rate {rate} rejects all {n} examples")));
        }
        let mut keep = vec![true; n];
        for &i in &order[..k] {
            keep[i] = false;
        }
        let pairs = (0..n)
            .filter(|&i| keep[i])
            .map(|i| (predictions[i].mean_output.clone(), examples[i].target));
        let (value, kept) = point_metric(task, pairs)?;
        rows.push(RejectionRow {
            rate,
            n_kept: kept,
            metric_name: MetricName::for_task(task),
            metric_value: value,
        });
    }
    Ok(rows)
}

/// Predicts every example once with `samples` draws, then evaluates the
/// survivors of each rejection rate.
pub fn rejection_curve(
    model: &BhPeftModel,
    examples: &[Example],
    rates: &[f64],
    samples: usize,
    seed: u64,
    execution: Execution,
) -> Result<Vec<RejectionRow>> {
    if examples.is_empty() {
        return Err(Error::input("rejection curve needs examples"));
    }
    let preds = predict_all(model, examples, samples, seed, execution)?;
    rejection_from_predictions(model.config.task, &preds, examples, rates)
}

/// Default rejection grid `0.00, 0.05, …, 0.50`.
pub fn default_rates() -> Vec<f64> {
    (0..=10).map(|k| k as f64 * 0.05).collect()
}
