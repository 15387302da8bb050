//! Datasets, deterministic synthetic generators and TSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;
use crate::random::{self, Rng};

/// First token id used for filler; ids below are reserved for designated tokens.
pub const FILLER_START: u32 = 16;
/// Designated token of the keyword task and of phase 1 of the drift stream.
pub const KEYWORD_TOKEN: u32 = 1;
/// Designated token of phase 2 of the drift stream.
pub const PHASE_TWO_TOKEN: u32 = 2;
/// Token ids `[3, 11)` form the ambiguous region of the noisy-region task.
pub const AMBIGUOUS_TOKENS: std::ops::Range<u32> = 3..11;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl Target {
    pub fn class(self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(c),
            Target::Value(_) => None,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Target::Value(v) => Some(v),
            Target::Class(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: Task,
    pub vocab: usize,
    pub max_len: usize,
    /// Number of classes; 1 for regression.
    pub classes: usize,
    pub generator: Option<String>,
    pub seed: Option<u64>,
}

/// A non-empty, validated list of examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, examples: Vec<Example>) -> Result<Self> {
        let ds = Self { meta, examples };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::input("dataset has no examples"));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.tokens.is_empty() || ex.tokens.len() > self.meta.max_len {
                return Err(Error::input(format!(
                    "example {i}: length {} outside [1, {}]",
                    ex.tokens.len(),
                    self.meta.max_len
                )));
            }
            if let Some(t) = ex.tokens.iter().find(|t| **t as usize >= self.meta.vocab) {
                return Err(Error::input(format!("example {i}: token {t} outside vocab")));
            }
            match (self.meta.task, ex.target) {
                (Task::Classification, Target::Class(c)) if c < self.meta.classes => {}
                (Task::Regression, Target::Value(v)) if v.is_finite() => {}
                (_, t) => {
                    return Err(Error::input(format!("example {i}: invalid target {t:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let examples = indices
            .iter()
            .map(|&i| {
                self.examples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::input(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.meta.clone(), examples)
    }

    /// Concatenation of several datasets sharing task, vocab and classes.
    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::input("nothing to concatenate"))?;
        let mut examples = Vec::new();
        for p in parts {
            if p.meta.task != first.meta.task
                || p.meta.vocab != first.meta.vocab
                || p.meta.classes != first.meta.classes
            {
                return Err(Error::input("cannot concatenate incompatible datasets"));
            }
            examples.extend(p.examples.iter().cloned());
        }
        let mut meta = first.meta.clone();
        meta.max_len = parts.iter().map(|p| p.meta.max_len).max().unwrap_or(meta.max_len);
        Self::new(meta, examples)
    }

    /// Seeded disjoint split; the second part holds `round(eval_fraction * N)`
    /// examples (at least one in each part).
    pub fn split(&self, eval_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&eval_fraction) || self.len() < 2 {
            return Err(Error::config(format!(
                "cannot split {} examples with eval fraction {eval_fraction}",
                self.len()
            )));
        }
        let n_eval = ((eval_fraction * self.len() as f64).round() as usize).clamp(1, self.len() - 1);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut random::derive(seed, 0x5117));
        let (eval_idx, train_idx) = order.split_at(n_eval);
        let mut eval_idx = eval_idx.to_vec();
        let mut train_idx = train_idx.to_vec();
        eval_idx.sort_unstable();
        train_idx.sort_unstable();
        Ok((self.subset(&train_idx)?, self.subset(&eval_idx)?))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds: Dataset = serde_json::from_str(&text)?;
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Keyword,
    NoisyRegion,
    PhaseShift,
    RegressionCount,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Keyword => "keyword",
            Generator::NoisyRegion => "noisy-region",
            Generator::PhaseShift => "phase-shift",
            Generator::RegressionCount => "regression-count",
        }
    }

    pub fn task(self) -> Task {
        match self {
            Generator::RegressionCount => Task::Regression,
            _ => Task::Classification,
        }
    }
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Generator::Keyword,
            Generator::NoisyRegion,
            Generator::PhaseShift,
            Generator::RegressionCount,
        ]
        .into_iter()
        .find(|g| g.name() == s)
        .ok_or_else(|| Error::config(format!("unknown generator `{s}`")))
    }
}

/// Knobs shared by all generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Share of noisy-region examples drawn from the ambiguous region.
    pub ambiguous_fraction: f64,
    /// Phase (1 or 2) of phase-shift examples.
    pub phase: usize,
    /// Probability that each position of a regression-count sequence holds
    /// the designated token.
    pub count_rate: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            vocab: 512,
            min_len: 4,
            max_len: 8,
            ambiguous_fraction: 0.3,
            phase: 1,
            count_rate: 0.3,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.vocab <= FILLER_START as usize {
            return Err(Error::config(format!("vocab must exceed {FILLER_START}")));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::config("need 1 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::config("ambiguous_fraction must lie in [0, 1]"));
        }
        if !(1..=2).contains(&self.phase) {
            return Err(Error::config("phase must be 1 or 2"));
        }
        if !(0.0..=1.0).contains(&self.count_rate) {
            return Err(Error::config("count_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn filler(rng: &mut Rng, vocab: usize) -> u32 {
    rng.random_range(FILLER_START..vocab as u32)
}

fn filler_sequence(rng: &mut Rng, p: &GeneratorParams) -> Vec<u32> {
    let len = rng.random_range(p.min_len..=p.max_len);
    (0..len).map(|_| filler(rng, p.vocab)).collect()
}

fn plant(rng: &mut Rng, tokens: &mut [u32], token: u32) {
    let pos = rng.random_range(0..tokens.len());
    tokens[pos] = token;
}

/// `n` labels with `n / 2` ones (rounded down), in random order.
fn balanced_labels(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < n / 2)).collect();
    labels.shuffle(rng);
    labels
}

fn keyword_examples(rng: &mut Rng, n: usize, p: &GeneratorParams, keyword: u32) -> Vec<Example> {
    balanced_labels(rng, n)
        .into_iter()
        .map(|label| {
            let mut tokens = filler_sequence(rng, p);
            if label == 1 {
                plant(rng, &mut tokens, keyword);
            }
            Example {
                tokens,
                target: Target::Class(label),
            }
        })
        .collect()
}

/// Deterministic synthetic dataset.
///
/// * `keyword`: label 1 iff token [`KEYWORD_TOKEN`] appears.
/// * `noisy-region`: the keyword task, except that a share of examples carry
///   a token from [`AMBIGUOUS_TOKENS`] instead of any keyword and receive a
///   coin-flip label.
/// * `phase-shift`: the keyword task with designated token 1 in phase 1 and
///   token 2 in phase 2.
/// * `regression-count`: target is the fraction of positions holding the
///   designated token.
pub fn generate(generator: Generator, n: usize, seed: u64, params: &GeneratorParams) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("generator needs n >= 1"));
    }
    params.validate()?;
    let mut rng = random::derive(seed, 0xDA7A);
    let p = params;
    let examples = match generator {
        Generator::Keyword => keyword_examples(&mut rng, n, p, KEYWORD_TOKEN),
        Generator::PhaseShift => {
            let token = if p.phase == 1 { KEYWORD_TOKEN } else { PHASE_TWO_TOKEN };
            keyword_examples(&mut rng, n, p, token)
        }
        Generator::NoisyRegion => {
            let n_amb = (p.ambiguous_fraction * n as f64).round() as usize;
            let mut examples = keyword_examples(&mut rng, n - n_amb, p, KEYWORD_TOKEN);
            for label in balanced_labels(&mut rng, n_amb) {
                let mut tokens = filler_sequence(&mut rng, p);
                let amb = rng.random_range(AMBIGUOUS_TOKENS);
                plant(&mut rng, &mut tokens, amb);
                examples.push(Example {
                    tokens,
                    target: Target::Class(label),
                });
            }
            examples.shuffle(&mut rng);
            examples
        }
        Generator::RegressionCount => (0..n)
            .map(|_| {
                let mut tokens = filler_sequence(&mut rng, p);
                let mut count = 0usize;
                for t in tokens.iter_mut() {
                    if rng.random_bool(p.count_rate) {
                        *t = KEYWORD_TOKEN;
                        count += 1;
                    }
                }
                let value = count as f64 / tokens.len() as f64;
                Example {
                    tokens,
                    target: Target::Value(value),
                }
            })
            .collect(),
    };
    let task = generator.task();
    let meta = DatasetMeta {
        task,
        vocab: p.vocab,
        max_len: p.max_len,
        classes: if task == Task::Classification { 2 } else { 1 },
        generator: Some(generator.name().to_string()),
        seed: Some(seed),
    };
    Dataset::new(meta, examples)
}

/// One round of a data stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamRound {
    /// 1-based round index.
    pub index: usize,
    pub phase: usize,
    pub train: Dataset,
}

/// Rounds of training data plus held-out evaluation sets fixed for the whole
/// stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub rounds: Vec<StreamRound>,
    /// Held-out split of the final round's phase, used for the per-round
    /// headline metric.
    pub eval: Dataset,
    /// Held-out split per phase (index 0 is phase 1).
    pub phase_eval: Vec<Dataset>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub sizes: Vec<usize>,
    /// First round (1-based) drawn from phase 2; past the last round means
    /// the stream never shifts.
    pub switch_round: usize,
    /// Held-out examples per phase.
    pub eval_per_phase: usize,
    pub seed: u64,
    pub params: GeneratorParams,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            sizes: vec![20, 40, 80, 160, 320, 640],
            switch_round: 4,
            eval_per_phase: 200,
            seed: 0,
            params: GeneratorParams::default(),
        }
    }
}

/// Geometric round sizes `first, 2·first, …` over `rounds` rounds.
pub fn geometric_sizes(first: usize, rounds: usize) -> Vec<usize> {
    (0..rounds).map(|k| first << k).collect()
}

/// The phase-shift drift stream. The headline held-out split is drawn from
/// the phase of the final round.
pub fn phase_shift_stream(cfg: &StreamConfig) -> Result<Stream> {
    if cfg.sizes.is_empty() || cfg.sizes.contains(&0) {
        return Err(Error::config("stream rounds must be non-empty"));
    }
    if cfg.switch_round < 1 {
        return Err(Error::config("switch_round is 1-based"));
    }
    if cfg.eval_per_phase == 0 {
        return Err(Error::config("eval_per_phase must be positive"));
    }
    let phase_params = |phase| GeneratorParams {
        phase,
        ..cfg.params.clone()
    };
    let rounds = cfg
        .sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let index = k + 1;
            let phase = if index >= cfg.switch_round { 2 } else { 1 };
            let seed = random::mix(cfg.seed, index as u64);
            let train = generate(Generator::PhaseShift, n, seed, &phase_params(phase))?;
            Ok(StreamRound { index, phase, train })
        })
        .collect::<Result<Vec<_>>>()?;
    let phase_eval = (1..=2)
        .map(|phase| {
            let seed = random::mix(cfg.seed, 0xE0A1_0000 + phase as u64);
            generate(Generator::PhaseShift, cfg.eval_per_phase, seed, &phase_params(phase))
        })
        .collect::<Result<Vec<_>>>()?;
    let final_phase = rounds.last().map_or(1, |r| r.phase);
    let eval = phase_eval[final_phase - 1].clone();
    Ok(Stream {
        rounds,
        eval,
        phase_eval,
    })
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// How to interpret a TSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct TextSpec {
    pub task: Task,
    pub vocab: usize,
    pub max_len: usize,
    /// Label names in class order; empty means labels are integer class ids
    /// (classification) or reals (regression).
    pub labels: Vec<String>,
    pub classes: usize,
}

pub fn tokenize(text: &str, vocab: usize, max_len: usize) -> Vec<u32> {
    text.to_lowercase()
        .split_whitespace()
        .take(max_len)
        .map(|w| (fnv1a64(w.as_bytes()) % vocab as u64) as u32)
        .collect()
}

/// Reads `text<TAB>label` lines.
pub fn load_text(path: &Path, spec: &TextSpec) -> Result<Dataset> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text(&content, spec)
}

pub fn parse_text(content: &str, spec: &TextSpec) -> Result<Dataset> {
    if spec.vocab == 0 || spec.max_len == 0 {
        return Err(Error::config("vocab and max_len must be positive"));
    }
    let mut examples = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (text, label) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::input(format!("line {lineno}: expected `text<TAB>label`")))?;
        let label = label.trim();
        let target = match spec.task {
            Task::Regression => Target::Value(
                label
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::input(format!("line {lineno}: bad regression target `{label}`")))?,
            ),
            Task::Classification => {
                let class = if spec.labels.is_empty() {
                    label.parse::<usize>().ok().filter(|c| *c < spec.classes)
                } else {
                    spec.labels.iter().position(|l| l == label)
                };
                Target::Class(class.ok_or_else(|| Error::input(format!("line {lineno}: unknown label `{label}`")))?)
            }
        };
        let tokens = tokenize(text, spec.vocab, spec.max_len);
        if tokens.is_empty() {
            return Err(Error::input(format!("line {lineno}: no tokens")));
        }
        examples.push(Example { tokens, target });
    }
    let classes = match spec.task {
        Task::Classification if !spec.labels.is_empty() => spec.labels.len(),
        Task::Classification => spec.classes,
        Task::Regression => 1,
    };
    Dataset::new(
        DatasetMeta {
            task: spec.task,
            vocab: spec.vocab,
            max_len: spec.max_len,
            classes,
            generator: None,
            seed: None,
        },
        examples,
    )
}
