//! Streaming fine-tuning: prior chaining and the three baseline strategies.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Stream};
use crate::error::{Error, Result};
use crate::inference::{evaluate_mean, MetricName};
use crate::model::BhPeftModel;
use crate::random;
use crate::training::{train, TrainConfig};
use crate::variational::posterior_snapshot;

/// Default share of history replayed by `data_selection`.
pub const DEFAULT_SELECTION_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Strategy {
    BayesianChain,
    DataPooling,
    ParameterInit,
    DataSelection { fraction: f64 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::BayesianChain => "bayesian_chain",
            Strategy::DataPooling => "data_pooling",
            Strategy::ParameterInit => "parameter_init",
            Strategy::DataSelection { .. } => "data_selection",
        }
    }

    pub fn all() -> [Strategy; 4] {
        [
            Strategy::BayesianChain,
            Strategy::DataPooling,
            Strategy::ParameterInit,
            Strategy::DataSelection {
                fraction: DEFAULT_SELECTION_FRACTION,
            },
        ]
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    /// `bayesian_chain`, `data_pooling`, `parameter_init`, `data_selection`
    /// or `data_selection:<fraction>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let strategy = match (name, arg) {
            ("bayesian_chain", None) => Strategy::BayesianChain,
            ("data_pooling", None) => Strategy::DataPooling,
            ("parameter_init", None) => Strategy::ParameterInit,
            ("data_selection", None) => Strategy::DataSelection {
                fraction: DEFAULT_SELECTION_FRACTION,
            },
            ("data_selection", Some(f)) => {
                let fraction: f64 = f
                    .parse()
                    .map_err(|_| Error::config(format!("bad selection fraction `{f}`")))?;
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(Error::config(format!("selection fraction {fraction} outside [0, 1]")));
                }
                Strategy::DataSelection { fraction }
            }
            _ => return Err(Error::config(format!("unknown strategy `{s}`"))),
        };
        Ok(strategy)
    }
}

/// Replaces every prior with a snapshot of the current posterior.
pub fn chain_prior(model: &mut BhPeftModel) {
    model.priors = posterior_snapshot(model.gaussians());
}

/// Metrics after one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    /// 1-based.
    pub round: usize,
    /// Examples trained on in this round.
    pub n_train: usize,
    pub metric_name: MetricName,
    /// Headline metric on the fixed held-out split.
    pub metric_value: f64,
    /// Metric on each phase's held-out split.
    pub phase_metrics: Vec<f64>,
    /// Metric on the training data of every earlier round `j < round`.
    pub earlier_rounds: Vec<f64>,
    /// Total KL to the prior when training of this round starts.
    pub kl_at_start: f64,
    /// Training loss of the last epoch.
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicReport {
    pub strategy: Strategy,
    pub rounds: Vec<RoundResult>,
    /// Mean headline metric over rounds.
    pub average: f64,
    pub cumulative_examples: usize,
}

impl DynamicReport {
    pub fn last(&self) -> &RoundResult {
        self.rounds.last().expect("report has rounds")
    }
}

fn round_config(cfg: &TrainConfig, round: usize) -> TrainConfig {
    TrainConfig {
        seed: random::mix(cfg.seed, round as u64),
        ..cfg.clone()
    }
}

fn replay_sample(history: &[&Dataset], fraction: f64, seed: u64, round: usize) -> Result<Option<Dataset>> {
    if history.is_empty() {
        return Ok(None);
    }
    let pooled = Dataset::concat(history)?;
    let k = (fraction * pooled.len() as f64).round() as usize;
    if k == 0 {
        return Ok(None);
    }
    let mut rng = random::derive(random::mix(seed, 0x5E1E_C700 + round as u64), 0);
    let mut picked = index::sample(&mut rng, pooled.len(), k).into_vec();
    picked.sort_unstable();
    Ok(Some(pooled.subset(&picked)?))
}

/// Runs `strategy` over the stream starting from `initial` (the round-1
/// initialization, constant prior).
pub fn run_dynamic(
    initial: &BhPeftModel,
    stream: &Stream,
    strategy: Strategy,
    cfg: &TrainConfig,
) -> Result<DynamicReport> {
    run_dynamic_with_model(initial, stream, strategy, cfg).map(|(report, _)| report)
}

/// [`run_dynamic`], also returning the model after the last round.
pub fn run_dynamic_with_model(
    initial: &BhPeftModel,
    stream: &Stream,
    strategy: Strategy,
    cfg: &TrainConfig,
) -> Result<(DynamicReport, BhPeftModel)> {
    cfg.validate()?;
    if stream.rounds.is_empty() {
        return Err(Error::input("stream has no rounds"));
    }
    let exec = cfg.execution;
    let mut model = initial.clone();
    model.reset_priors();
    let mut rounds = Vec::with_capacity(stream.rounds.len());
    let mut cumulative = 0usize;

    for (k, round) in stream.rounds.iter().enumerate() {
        let index = k + 1;
        if round.train.is_empty() {
            return Err(Error::input(format!("round {index} is empty")));
        }
        let history: Vec<&Dataset> = stream.rounds[..k].iter().map(|r| &r.train).collect();
        let train_set = match strategy {
            Strategy::BayesianChain => {
                if k > 0 {
                    chain_prior(&mut model);
                }
                round.train.clone()
            }
            Strategy::DataPooling => {
                model = initial.clone();
                model.reset_priors();
                let mut parts = history.clone();
                parts.push(&round.train);
                Dataset::concat(&parts)?
            }
            Strategy::ParameterInit => round.train.clone(),
            Strategy::DataSelection { fraction } => match replay_sample(&history, fraction, cfg.seed, index)? {
                Some(replay) => Dataset::concat(&[&round.train, &replay])?,
                None => round.train.clone(),
            },
        };
        let kl_at_start = model.kl_total()?;
        let report = train(&mut model, train_set.examples(), &round_config(cfg, index))?;
        cumulative += train_set.len();

        let metric_value = evaluate_mean(&model, stream.eval.examples(), exec)?;
        let phase_metrics = stream
            .phase_eval
            .iter()
            .map(|d| evaluate_mean(&model, d.examples(), exec))
            .collect::<Result<Vec<_>>>()?;
        let earlier_rounds = history
            .iter()
            .map(|d| evaluate_mean(&model, d.examples(), exec))
            .collect::<Result<Vec<_>>>()?;
        rounds.push(RoundResult {
            round: index,
            n_train: train_set.len(),
            metric_name: MetricName::for_task(model.config.task),
            metric_value,
            phase_metrics,
            earlier_rounds,
            kl_at_start,
            final_loss: report.epochs.last().map_or(f64::NAN, |e| e.loss),
        });
    }
    let average = rounds.iter().map(|r| r.metric_value).sum::<f64>() / rounds.len() as f64;
    let report = DynamicReport {
        strategy,
        rounds,
        average,
        cumulative_examples: cumulative,
    };
    Ok((report, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{phase_shift_stream, GeneratorParams, StreamConfig};
    use crate::model::ModelConfig;

    fn tiny() -> (BhPeftModel, Stream, TrainConfig) {
        let model = BhPeftModel::new(
            ModelConfig {
                d_model: 8,
                heads: 2,
                blocks: 1,
                vocab: 40,
                max_len: 6,
                prefix_len: 2,
                prefix_rank: 2,
                adapter_rank: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let stream = phase_shift_stream(&StreamConfig {
            sizes: vec![6, 8, 10],
            switch_round: 3,
            eval_per_phase: 10,
            seed: 1,
            params: GeneratorParams {
                vocab: 40,
                min_len: 3,
                max_len: 6,
                ..Default::default()
            },
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        (model, stream, cfg)
    }

    #[test]
    fn parse_strategies() {
        assert_eq!("bayesian_chain".parse::<Strategy>().unwrap(), Strategy::BayesianChain);
        assert_eq!(
            "data_selection:0.5".parse::<Strategy>().unwrap(),
            Strategy::DataSelection { fraction: 0.5 }
        );
        assert!("data_selection:2".parse::<Strategy>().is_err());
        assert!("replay".parse::<Strategy>().is_err());
    }

    #[test]
    fn chaining_zeroes_kl_and_is_idempotent() {
        let (mut m, _, _) = tiny();
        assert!(m.kl_total().unwrap() > 0.0);
        chain_prior(&mut m);
        assert_eq!(m.kl_total().unwrap(), 0.0);
        let first = m.priors.clone();
        chain_prior(&mut m);
        assert_eq!(m.priors, first);
    }

    #[test]
    fn example_counts_and_shared_first_round() {
        let (m, stream, cfg) = tiny();
        let reports: Vec<DynamicReport> = Strategy::all()
            .into_iter()
            .map(|s| run_dynamic(&m, &stream, s, &cfg).unwrap())
            .collect();
        let counts = |r: &DynamicReport| r.rounds.iter().map(|x| x.n_train).collect::<Vec<_>>();
        assert_eq!(counts(&reports[0]), vec![6, 8, 10]);
        assert_eq!(counts(&reports[1]), vec![6, 14, 24]);
        assert_eq!(counts(&reports[2]), vec![6, 8, 10]);
        // round(0.25 * 6) = 2, round(0.25 * 14) = 4
        assert_eq!(counts(&reports[3]), vec![6, 10, 14]);
        for r in &reports[1..] {
            assert_eq!(r.rounds[0], reports[0].rounds[0]);
        }
        for r in &reports[0].rounds[1..] {
            assert_eq!(r.kl_at_start, 0.0);
        }
        assert_eq!(reports[0].cumulative_examples, 24);
        assert_eq!(reports[1].cumulative_examples, 44);
        assert_eq!(reports[1].rounds[2].earlier_rounds.len(), 2);
    }

    #[test]
    fn single_round_strategies_coincide() {
        let (m, mut stream, cfg) = tiny();
        stream.rounds.truncate(1);
        let base = run_dynamic(&m, &stream, Strategy::BayesianChain, &cfg).unwrap();
        for s in Strategy::all() {
            let r = run_dynamic(&m, &stream, s, &cfg).unwrap();
            assert_eq!(r.rounds, base.rounds);
        }
    }
}
