//! Command-line interface.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{generate, load_text, phase_shift_stream, Dataset, Generator, GeneratorParams, TextSpec};
use crate::dynamic::{run_dynamic_with_model, DynamicReport, Strategy};
use crate::error::{Error, Result};
use crate::inference::{predict, predict_mean, rejection_curve, default_rates, Prediction};
use crate::model::{BhPeftModel, Task};
use crate::parallel::try_map_indexed;
use crate::persistence::Checkpoint;
use crate::random;
use crate::training::{train, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "bhpeft", version, about = "Bayesian hybrid PEFT on a frozen miniature transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune on a dataset and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Monte Carlo predictions with predictive uncertainty.
    Predict(PredictArgs),
    /// Rejection curve: metric after dropping the most uncertain predictions.
    Reject(RejectArgs),
    /// Streaming fine-tuning over the synthetic drift stream.
    Dynamic(DynamicArgs),
    /// Write a synthetic dataset as JSON.
    GenData(GenDataArgs),
    /// Run the analytic-oracle checks.
    Selfcheck(SelfcheckArgs),
}

/// How to read a dataset: JSON as written by `gen-data`, or `.tsv` lines of
/// `text<TAB>label`.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Task of a TSV file.
    #[arg(long, default_value = "classification")]
    pub task: Task,
    /// Comma-separated label names of a TSV file, in class order.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    /// Number of classes of a TSV file with integer labels.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch metrics CSV; stdout when omitted.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// JSON run manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// With `--init`: use the loaded posterior as the prior.
    #[arg(long, requires = "init")]
    pub chain_prior: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Monte Carlo draws; 1 gives the predictive mean without uncertainty.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RejectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated ascending rejection rates in `[0, 1)`.
    #[arg(long, value_delimiter = ',')]
    pub rates: Vec<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DynamicArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Strategy name, `data_selection:<fraction>`, or `all`.
    #[arg(long, default_value = "bayesian_chain")]
    pub strategy: String,
    /// Replace the configured stream with this many geometric rounds.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// First round size of the geometric stream.
    #[arg(long, default_value_t = 20, requires = "rounds")]
    pub first_size: usize,
    /// Directory receiving rounds.csv, forgetting.csv, manifest.json and the
    /// final checkpoint of each strategy.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub generator: Generator,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = GeneratorParams::default().vocab)]
    pub vocab: usize,
    #[arg(long, default_value_t = GeneratorParams::default().min_len)]
    pub min_len: usize,
    #[arg(long, default_value_t = GeneratorParams::default().max_len)]
    pub max_len: usize,
    #[arg(long, default_value_t = GeneratorParams::default().ambiguous_fraction)]
    pub ambiguous_fraction: f64,
    #[arg(long, default_value_t = GeneratorParams::default().phase)]
    pub phase: usize,
    #[arg(long, default_value_t = GeneratorParams::default().count_rate)]
    pub count_rate: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Random scalar cases compared against quadrature.
    #[arg(long, default_value_t = 1000)]
    pub cases: usize,
}

/// Parses `args` and runs the command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Reject(a) => cmd_reject(&a),
        Command::Dynamic(a) => cmd_dynamic(&a),
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Selfcheck(a) => cmd_selfcheck(&a),
    }
}

/// Exit status of a finished command: 0, 1 for runtime failures, 2 for usage
/// and configuration errors.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_data(args: &DataArgs, vocab: usize, max_len: usize) -> Result<Dataset> {
    let is_tsv = args.data.extension().is_some_and(|e| e == "tsv");
    if is_tsv {
        load_text(
            &args.data,
            &TextSpec {
                task: args.task,
                vocab,
                max_len,
                labels: args.labels.clone(),
                classes: args.classes,
            },
        )
    } else {
        Dataset::load_json(&args.data)
    }
}

fn dataset_digest(data: &Dataset) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(data)?)))
}

fn check_compatible(model: &BhPeftModel, data: &Dataset) -> Result<()> {
    let c = &model.config;
    let m = &data.meta;
    let classes_differ = c.task == Task::Classification && c.classes != m.classes;
    if c.task != m.task || classes_differ {
        return Err(Error::config(format!(
            "dataset ({:?}, {} classes) does not match model ({:?}, {} classes)",
            m.task, m.classes, c.task, c.classes
        )));
    }
    if m.vocab > c.vocab || m.max_len > c.max_len {
        return Err(Error::config(format!(
            "dataset vocab {} / max_len {} exceed model vocab {} / max_len {}",
            m.vocab, m.max_len, c.vocab, c.max_len
        )));
    }
    Ok(())
}

fn metrics_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,loss,nll_term,kl_term\n");
    for e in &report.epochs {
        writeln!(out, "{},{},{},{}", e.epoch, e.loss, e.nll_term, e.kl_term).expect("string write");
    }
    out
}

fn warn_if_unfaithful(kl_weight: f64) {
    if kl_weight != 1.0 {
        eprintln!("warning: kl_weight = {kl_weight}; the objective is not the ELBO");
    }
}

#[derive(Serialize)]
struct RunManifest<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_digest: String,
    config: &'a RunConfig,
    kl_weight: f64,
    faithful_elbo: bool,
    #[serde(flatten)]
    details: T,
}

fn write_manifest<T: Serialize>(path: &Path, command: &str, cfg: &RunConfig, details: T) -> Result<()> {
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        config: cfg,
        kl_weight: cfg.kl_weight,
        faithful_elbo: cfg.kl_weight == 1.0,
        details,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::resolve(a.config.as_deref())?;
    let (mut model, mut round, data) = match &a.init {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let data = load_data(&a.data, ck.model.config.vocab, ck.model.config.max_len)?;
            (ck.model, ck.round, data)
        }
        None => {
            let data = load_data(&a.data, cfg.vocab, cfg.max_len)?;
            let model = BhPeftModel::new(cfg.model_config(data.meta.task, data.meta.classes), cfg.seed)?;
            (model, 0, data)
        }
    };
    if a.chain_prior {
        crate::dynamic::chain_prior(&mut model);
    }
    check_compatible(&model, &data)?;
    warn_if_unfaithful(cfg.kl_weight);

    let digest_before = model.backbone_digest();
    let report = train(&mut model, data.examples(), &cfg.train_config())?;
    if model.backbone_digest() != digest_before {
        return Err(Error::input("backbone changed during training"));
    }
    round += 1;

    let mut ck = Checkpoint::new(model, cfg.seed);
    ck.round = round;
    ck.provenance = BTreeMap::from([
        ("command".to_string(), "train".to_string()),
        ("config_digest".to_string(), cfg.digest()),
        ("data_digest".to_string(), dataset_digest(&data)?),
        ("faithful_elbo".to_string(), report.faithful_elbo.to_string()),
        ("kl_weight".to_string(), cfg.kl_weight.to_string()),
        ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ]);
    ck.save(&a.out)?;
    if let Some(path) = &a.manifest {
        #[derive(Serialize)]
        struct Details {
            examples: usize,
            steps: u64,
            round: usize,
            data_digest: String,
            backbone_digest: String,
        }
        write_manifest(
            path,
            "train",
            &cfg,
            Details {
                examples: report.examples,
                steps: report.steps,
                round,
                data_digest: dataset_digest(&data)?,
                backbone_digest: digest_before,
            },
        )?;
    }
    write_output(a.metrics.as_deref(), &metrics_csv(&report))
}

fn eval_setup(
    checkpoint: &Path,
    config: Option<&Path>,
    data: &DataArgs,
    samples: Option<usize>,
    seed: Option<u64>,
) -> Result<(BhPeftModel, Dataset, RunConfig, usize, u64)> {
    let cfg = RunConfig::resolve(config)?;
    let model = Checkpoint::load(checkpoint)?.model;
    let data = load_data(data, model.config.vocab, model.config.max_len)?;
    check_compatible(&model, &data)?;
    let samples = samples.unwrap_or(cfg.eval_samples);
    if samples < 1 {
        return Err(Error::config("--samples must be >= 1"));
    }
    let seed = seed.unwrap_or(cfg.seed);
    Ok((model, data, cfg, samples, seed))
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let (model, data, cfg, samples, seed) =
        eval_setup(&a.checkpoint, a.config.as_deref(), &a.data, a.samples, a.seed)?;
    let examples = data.examples();
    let preds: Vec<Prediction> = try_map_indexed(cfg.execution, examples.len(), |i| {
        let mut rng = random::derive(seed, i as u64);
        if samples == 1 {
            predict_mean(&model, &examples[i].tokens, 1, &mut rng)
        } else {
            predict(&model, &examples[i].tokens, samples, &mut rng)
        }
    })?;
    let mut out = String::from(if samples == 1 {
        "index,predicted,mean_or_probs\n"
    } else {
        "index,predicted,mean_or_probs,total_uncertainty\n"
    });
    for (i, p) in preds.iter().enumerate() {
        let predicted = match p.predicted_label {
            Some(c) => c.to_string(),
            None => p.mean_output[0].to_string(),
        };
        write!(out, "{i},{predicted},{}", join(&p.mean_output)).expect("string write");
        if samples > 1 {
            write!(out, ",{}", p.total_uncertainty).expect("string write");
        }
        out.push('\n');
    }
    write_output(a.out.as_deref(), &out)
}

fn cmd_reject(a: &RejectArgs) -> Result<()> {
    let (model, data, cfg, samples, seed) =
        eval_setup(&a.checkpoint, a.config.as_deref(), &a.data, a.samples, a.seed)?;
    if samples < 2 {
        return Err(Error::config("rejection needs at least 2 samples"));
    }
    let rates = if a.rates.is_empty() { default_rates() } else { a.rates.clone() };
    let rows = rejection_curve(&model, data.examples(), &rates, samples, seed, cfg.execution)?;
    let mut out = String::from("rate,n_kept,metric_name,metric_value\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.rate, r.n_kept, r.metric_name.as_str(), r.metric_value).expect("string write");
    }
    write_output(a.out.as_deref(), &out)
}

fn parse_strategies(arg: &str) -> Result<Vec<Strategy>> {
    if arg == "all" {
        Ok(Strategy::all().to_vec())
    } else {
        arg.split(',').map(str::parse).collect()
    }
}

fn dynamic_csvs(reports: &[DynamicReport]) -> (String, String) {
    let mut rounds = String::from("round,strategy,n_train,metric_name,metric_value\n");
    let mut forgetting = String::from("round,strategy,eval_set,metric_name,metric_value\n");
    for rep in reports {
        let name = rep.strategy.name();
        for r in &rep.rounds {
            let metric = r.metric_name.as_str();
            writeln!(rounds, "{},{name},{},{metric},{}", r.round, r.n_train, r.metric_value).expect("string write");
            for (p, v) in r.phase_metrics.iter().enumerate() {
                writeln!(forgetting, "{},{name},phase{},{metric},{v}", r.round, p + 1).expect("string write");
            }
            for (j, v) in r.earlier_rounds.iter().enumerate() {
                writeln!(forgetting, "{},{name},round{},{metric},{v}", r.round, j + 1).expect("string write");
            }
        }
        writeln!(
            rounds,
            "average,{name},{},{},{}",
            rep.cumulative_examples,
            rep.last().metric_name.as_str(),
            rep.average
        )
        .expect("string write");
    }
    (rounds, forgetting)
}

fn cmd_dynamic(a: &DynamicArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(a.config.as_deref())?;
    if let Some(rounds) = a.rounds {
        if rounds == 0 || a.first_size == 0 {
            return Err(Error::config("--rounds and --first-size must be positive"));
        }
        cfg.set_geometric_stream(a.first_size, rounds);
    }
    let strategies = parse_strategies(&a.strategy)?;
    let stream = phase_shift_stream(&cfg.stream_config())?;
    let initial = BhPeftModel::new(cfg.model_config(Task::Classification, 2), cfg.seed)?;
    let train_cfg = cfg.train_config();
    warn_if_unfaithful(cfg.kl_weight);
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;

    let mut reports = Vec::new();
    for strategy in strategies {
        let (report, model) = run_dynamic_with_model(&initial, &stream, strategy, &train_cfg)?;
        let mut ck = Checkpoint::new(model, cfg.seed);
        ck.round = report.rounds.len();
        ck.provenance = BTreeMap::from([
            ("command".to_string(), "dynamic".to_string()),
            ("config_digest".to_string(), cfg.digest()),
            ("strategy".to_string(), serde_json::to_string(&strategy)?),
            ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]);
        ck.save(&a.out_dir.join(format!("final_{}.ckpt", strategy.name())))?;
        reports.push(report);
    }
    let (rounds, forgetting) = dynamic_csvs(&reports);
    let dir = &a.out_dir;
    std::fs::write(dir.join("rounds.csv"), rounds).map_err(|e| Error::io(dir.join("rounds.csv"), e))?;
    std::fs::write(dir.join("forgetting.csv"), forgetting).map_err(|e| Error::io(dir.join("forgetting.csv"), e))?;

    #[derive(Serialize)]
    struct Details<'a> {
        strategies: Vec<Strategy>,
        stream_sizes: &'a [usize],
        reports: &'a [DynamicReport],
    }
    write_manifest(
        &dir.join("manifest.json"),
        "dynamic",
        &cfg,
        Details {
            strategies: reports.iter().map(|r| r.strategy).collect(),
            stream_sizes: &cfg.stream_sizes,
            reports: &reports,
        },
    )
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => RunConfig::resolve(None)?.seed,
    };
    let params = GeneratorParams {
        vocab: a.vocab,
        min_len: a.min_len,
        max_len: a.max_len,
        ambiguous_fraction: a.ambiguous_fraction,
        phase: a.phase,
        count_rate: a.count_rate,
    };
    generate(a.generator, a.n, seed, &params)?.save_json(&a.out)
}

fn cmd_selfcheck(a: &SelfcheckArgs) -> Result<()> {
    let cfg = RunConfig::resolve(None)?;
    let outcomes = crate::selfcheck::run(a.cases, cfg.execution)?;
    let mut failed = 0;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        return Err(Error::input(format!("{failed} self-check(s) failed")));
    }
    Ok(())
}
