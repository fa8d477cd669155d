//! The transfer benchmark: pretrain on a source corpus, re-initialize the
//! embeddings, fine-tune and test on each target, and average.
//!
//! Also the cross-source statistics: per-target normalization, percentile
//! bootstrap intervals of the mean, and the map back to raw cross-entropy.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{fit_to_token_budget, pack_into_blocks, read_jsonl, read_text_dir, Corpus};
use crate::error::{Error, Result};
use crate::model::{CausalLm, ModelConfig, PositionPolicy};
use crate::rng::{derive_seed, stream_rng};
use crate::tokenizer::tokenize_target;
use crate::trainer::{evaluate, train, write_loss_csv, StepLog, TrainConfig};

pub const REPORT_VERSION: u32 = 1;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Pretrain,
    NoPretrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Paper,
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetSource {
    /// Plain text: a `.txt` file or a directory of them.
    Text(PathBuf),
    /// A pre-tokenized JSONL corpus.
    Corpus(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub source: TargetSource,
}

impl TargetSpec {
    /// Every `.jsonl` file, `.txt` file and subdirectory of `dir`, named by
    /// file stem, in name order.
    pub fn discover(dir: impl AsRef<Path>) -> Result<Vec<TargetSpec>> {
        let dir = dir.as_ref();
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
            let path = entry.map_err(Error::io(dir))?.path();
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
                continue;
            };
            let source = match path.extension().and_then(|e| e.to_str()) {
                _ if path.is_dir() => TargetSource::Text(path),
                Some("txt") => TargetSource::Text(path),
                Some("jsonl") => TargetSource::Corpus(path),
                _ => continue,
            };
            out.push(TargetSpec { name: stem, source });
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        if out.is_empty() {
            return Err(Error::invalid(format!(
                "{}: no targets (.txt, .jsonl or text directories) found",
                dir.display()
            )));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub profile: Profile,
    pub mode: Mode,
    pub targets: Vec<TargetSpec>,
    pub pretrain_budget: usize,
    pub tune_budget: usize,
    pub test_budget: usize,
    /// Template; the vocabulary is set per phase.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub tune: TrainConfig,
    /// BPE vocabulary (EOS included) for plain-text targets.
    pub bpe_vocab: usize,
    /// Model vocabulary after the swap; defaults to the largest target
    /// corpus vocabulary + 1 (the extra id is EOS).
    pub target_vocab: Option<usize>,
    pub positions: PositionPolicy,
    pub seed: u64,
}

impl BenchmarkConfig {
    /// Paper budgets (15M / 2M / 200k tokens), the 65M-parameter model and
    /// the published training hyperparameters.
    pub fn paper(targets: Vec<TargetSpec>) -> Self {
        Self {
            profile: Profile::Paper,
            mode: Mode::Pretrain,
            targets,
            pretrain_budget: 15_000_000,
            tune_budget: 2_000_000,
            test_budget: 200_000,
            model: ModelConfig::paper(30_000),
            pretrain: TrainConfig::pretrain(),
            tune: TrainConfig::tune(),
            bpe_vocab: 30_000,
            target_vocab: None,
            positions: PositionPolicy::Redraw,
            seed: 0,
        }
    }

    /// Minutes on one CPU core. The tiny model needs a larger step size
    /// than the paper profile's 1e-4 to learn anything within the small budgets.
    pub fn desk(targets: Vec<TargetSpec>) -> Self {
        Self {
            profile: Profile::Desk,
            pretrain_budget: 200_000,
            tune_budget: 50_000,
            test_budget: 10_000,
            model: ModelConfig::desk(512),
            pretrain: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::pretrain()
            },
            tune: TrainConfig {
                lr: 1e-3,
                ..TrainConfig::tune()
            },
            bpe_vocab: 512,
            ..Self::paper(targets)
        }
    }

    pub fn for_profile(profile: Profile, targets: Vec<TargetSpec>) -> Self {
        match profile {
            Profile::Paper => Self::paper(targets),
            Profile::Desk => Self::desk(targets),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::invalid("at least one target is required"));
        }
        let mut names: Vec<&str> = self.targets.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("target names must be unique"));
        }
        self.validate_training()
    }

    /// Everything except the target list, which may be supplied pre-tokenized.
    fn validate_training(&self) -> Result<()> {
        if self.pretrain_budget == 0 || self.tune_budget == 0 || self.test_budget == 0 {
            return Err(Error::invalid("token budgets must be at least 1"));
        }
        self.model.validate()?;
        self.tune.validate()?;
        // Zero pretraining epochs is allowed: the phase then takes no steps.
        TrainConfig {
            epochs: self.pretrain.epochs.max(1),
            ..self.pretrain.clone()
        }
        .validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// A tokenized target ready for splitting.
#[derive(Clone, Debug)]
pub struct PreparedTarget {
    pub name: String,
    pub corpus: Corpus,
}

pub fn prepare_targets(config: &BenchmarkConfig) -> Result<Vec<PreparedTarget>> {
    config
        .targets
        .iter()
        .map(|t| {
            let corpus = match &t.source {
                TargetSource::Corpus(path) => read_jsonl(path),
                TargetSource::Text(path) => {
                    let text = if path.is_dir() {
                        read_text_dir(path)
                    } else {
                        fs::read_to_string(path).map_err(Error::io(path))
                    }?;
                    tokenize_target(&text, config.bpe_vocab).map(|(_, c)| c)
                }
            };
            corpus
                .map(|corpus| PreparedTarget {
                    name: t.name.clone(),
                    corpus,
                })
                .map_err(|e| e.in_phase("prepare", Some(&t.name)))
        })
        .collect()
}

/// Disjoint tune and test token ranges. The test range follows the tune
/// range when the corpus is long enough; otherwise it is the last
/// `test_budget` tokens and the remainder is repeated to fill the tune
/// budget.
pub fn split_target(corpus: &Corpus, tune_budget: usize, test_budget: usize, seed: u64) -> Result<(Corpus, Corpus)> {
    let total = corpus.total_tokens();
    if total <= test_budget {
        return Err(Error::invalid(format!(
            "target has {total} tokens; need more than the {test_budget}-token test split"
        )));
    }
    let (head, test) = if total >= tune_budget + test_budget {
        let (head, rest) = corpus.split_at_token(tune_budget);
        (head, rest.split_at_token(test_budget).0)
    } else {
        corpus.split_at_token(total - test_budget)
    };
    let tune = fit_to_token_budget(&head, tune_budget, Some(seed))?;
    Ok((tune, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub version: u32,
    pub source: String,
    pub profile: Profile,
    pub mode: Mode,
    /// h_{s,t}, nats per token, keyed by target name.
    pub per_target: BTreeMap<String, f64>,
    /// Mean of `per_target`; absent if any target failed.
    pub score: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Target name → error message for targets that did not complete.
    pub failures: BTreeMap<String, String>,
    pub seed: u64,
    pub positions: PositionPolicy,
    pub target_vocab: usize,
    pub config_hash: String,
    pub engine_version: String,
}

impl ScoreReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && self.score.is_some()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(Error::json(path))?;
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(Error::json(path))
    }
}

/// Arithmetic mean in ascending target-name order.
pub fn aggregate_score(per_target: &BTreeMap<String, f64>) -> Result<f64> {
    if per_target.is_empty() {
        return Err(Error::invalid("cannot aggregate zero targets"));
    }
    let sum: f64 = per_target.values().sum();
    Ok(sum / per_target.len() as f64)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Concurrent fine-tuning tasks; 0 or 1 runs targets sequentially.
    pub jobs: usize,
    /// Where to write loss traces and checkpoints, one subdirectory per target.
    pub artifacts: Option<PathBuf>,
}

/// Everything a run produced besides the report.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: ScoreReport,
    pub pretrain_trace: Vec<StepLog>,
    pub tune_traces: BTreeMap<String, Vec<StepLog>>,
}

/// Tokenizes the configured targets and runs the benchmark.
pub fn run_xferbench(
    source: Option<(&str, &Corpus)>,
    config: &BenchmarkConfig,
    options: &RunOptions,
) -> Result<RunOutput> {
    config.validate()?;
    let targets = prepare_targets(config)?;
    run_with_targets(source, &targets, config, options)
}

/// The benchmark on already-tokenized targets. `source` is required in
/// pretrain mode and ignored otherwise.
pub fn run_with_targets(
    source: Option<(&str, &Corpus)>,
    targets: &[PreparedTarget],
    config: &BenchmarkConfig,
    options: &RunOptions,
) -> Result<RunOutput> {
    config.validate_training()?;
    if targets.is_empty() {
        return Err(Error::invalid("at least one target is required"));
    }
    let seed = config.seed;
    let target_vocab = match config.target_vocab {
        Some(v) => v,
        None => targets.iter().map(|t| t.corpus.vocab_size()).max().unwrap_or(0) + 1,
    };
    if let Some(t) = targets.iter().find(|t| t.corpus.vocab_size() >= target_vocab) {
        return Err(Error::invalid(format!(
            "target {} needs vocabulary {} but the model has {target_vocab} (EOS included)",
            t.name,
            t.corpus.vocab_size() + 1
        )));
    }
    let artifacts = options.artifacts.as_deref();
    if let Some(dir) = artifacts {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }

    // Steps 1-3: initialize, optionally pretrain, swap in fresh embeddings.
    let init_seed = derive_seed(seed, "init");
    let (source_name, base, pretrain_trace) = match config.mode {
        Mode::NoPretrain => {
            let model = CausalLm::<f32>::init(with_vocab(&config.model, target_vocab), init_seed)?;
            ("no-pretrain".to_string(), model, Vec::new())
        }
        Mode::Pretrain => {
            let (name, corpus) = source.ok_or_else(|| Error::invalid("pretrain mode needs a source corpus"))?;
            let (model, trace) = pretrain(corpus, config, init_seed).map_err(|e| e.in_phase("pretrain", None))?;
            (name.to_string(), model, trace)
        }
    };
    let mut base = base;
    base.resize_vocab(target_vocab, derive_seed(seed, "reinit"), config.positions)?;
    if let Some(dir) = artifacts {
        if !pretrain_trace.is_empty() {
            write_loss_csv(&pretrain_trace, dir.join("pretrain_loss.csv"))?;
        }
        base.save(dir.join("base"))?;
    }

    // Step 4: independent fine-tune + test per target.
    let tune_one = |t: &PreparedTarget| -> Result<(f64, Vec<StepLog>)> {
        tune_and_test(&base, t, target_vocab, config, artifacts).map_err(|e| e.in_phase("tune", Some(&t.name)))
    };
    let results: Vec<Result<(f64, Vec<StepLog>)>> = if options.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs.min(targets.len()))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| targets.par_iter().map(tune_one).collect())
    } else {
        targets.iter().map(tune_one).collect()
    };

    // Step 5: aggregate in name order.
    let mut per_target = BTreeMap::new();
    let mut failures = BTreeMap::new();
    let mut tune_traces = BTreeMap::new();
    for (t, r) in targets.iter().zip(results) {
        match r {
            Ok((ce, trace)) => {
                per_target.insert(t.name.clone(), ce);
                tune_traces.insert(t.name.clone(), trace);
            }
            Err(e) => {
                failures.insert(t.name.clone(), e.to_string());
            }
        }
    }
    let score = if failures.is_empty() {
        Some(aggregate_score(&per_target)?)
    } else {
        None
    };
    let report = ScoreReport {
        version: REPORT_VERSION,
        source: source_name,
        profile: config.profile,
        mode: config.mode,
        per_target,
        score,
        ci: None,
        failures,
        seed,
        positions: config.positions,
        target_vocab,
        config_hash: config.hash(),
        engine_version: ENGINE_VERSION.to_string(),
    };
    Ok(RunOutput {
        report,
        pretrain_trace,
        tune_traces,
    })
}

fn with_vocab(template: &ModelConfig, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        ..template.clone()
    }
}

fn pretrain(source: &Corpus, config: &BenchmarkConfig, init_seed: u64) -> Result<(CausalLm<f32>, Vec<StepLog>)> {
    if source.is_empty() {
        return Err(Error::invalid("source corpus is empty"));
    }
    let vocab = source.vocab_size();
    let data = fit_to_token_budget(
        source,
        config.pretrain_budget,
        Some(derive_seed(config.seed, "pretrain/data")),
    )?;
    let blocks = pack_into_blocks(&data, config.model.context_len, vocab as u32)?;
    let mut model = CausalLm::init(with_vocab(&config.model, vocab + 1), init_seed)?;
    if config.pretrain.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let train_cfg = TrainConfig {
        seed: derive_seed(config.seed, "pretrain/train"),
        ..config.pretrain.clone()
    };
    log::info!("pretraining on {} blocks for {} epochs", blocks.len(), train_cfg.epochs);
    let trace = train(&mut model, &blocks, &train_cfg)?;
    if let Some(last) = trace.last() {
        log::info!(
            "pretraining done after {} steps, last loss {:.4}",
            trace.len(),
            last.loss
        );
    }
    Ok((model, trace))
}

fn tune_and_test(
    base: &CausalLm<f32>,
    target: &PreparedTarget,
    target_vocab: usize,
    config: &BenchmarkConfig,
    artifacts: Option<&Path>,
) -> Result<(f64, Vec<StepLog>)> {
    let label = |what: &str| derive_seed(config.seed, &format!("{what}/{}", target.name));
    let (tune, test) = split_target(&target.corpus, config.tune_budget, config.test_budget, label("split"))?;
    let eos = (target_vocab - 1) as u32;
    let ctx = config.model.context_len;
    let tune_blocks = pack_into_blocks(&tune, ctx, eos)?;
    let test_blocks = pack_into_blocks(&test, ctx, eos)?;
    if test_blocks.is_empty() {
        return Err(Error::invalid(format!(
            "test split of {} tokens is shorter than one {ctx}-token block",
            test.total_tokens()
        )));
    }
    let mut model = base.clone();
    let cfg = TrainConfig {
        seed: label("tune"),
        ..config.tune.clone()
    };
    let trace = train(&mut model, &tune_blocks, &cfg)?;
    let ce = evaluate(&model, &test_blocks)?;
    log::info!(
        "target {}: test cross-entropy {ce:.4} after {} steps",
        target.name,
        trace.len()
    );
    if let Some(dir) = artifacts {
        let dir = dir.join("targets").join(&target.name);
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        write_loss_csv(&trace, dir.join("tune_loss.csv"))?;
        model.save(dir.join("model"))?;
    }
    Ok((ce, trace))
}

/// h_{s,t} for several sources over a shared target set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `h[s][t]`
    pub h: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(sources: Vec<String>, targets: Vec<String>, h: Vec<Vec<f64>>) -> Result<Self> {
        if h.len() != sources.len() || h.iter().any(|r| r.len() != targets.len()) {
            return Err(Error::invalid("score matrix shape does not match its labels"));
        }
        if h.iter().flatten().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::invalid("cross-entropies must be finite and positive"));
        }
        Ok(Self { sources, targets, h })
    }

    /// Rows in report order; every report must be complete, share a
    /// profile and cover the same targets.
    pub fn from_reports(reports: &[ScoreReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::invalid("no reports given"))?;
        let targets: Vec<String> = first.per_target.keys().cloned().collect();
        let mut h = Vec::new();
        for r in reports {
            if r.profile != first.profile {
                return Err(Error::invalid(format!(
                    "reports mix profiles ({} vs {}); scores are not comparable",
                    first.profile.name(),
                    r.profile.name()
                )));
            }
            if !r.is_complete() {
                return Err(Error::invalid(format!("report for {} is incomplete", r.source)));
            }
            if !r.per_target.keys().eq(targets.iter()) {
                return Err(Error::invalid(format!(
                    "report for {} covers different targets than {}",
                    r.source, first.source
                )));
            }
            h.push(r.per_target.values().copied().collect());
        }
        Self::new(reports.iter().map(|r| r.source.clone()).collect(), targets, h)
    }

    /// Per-target (mean, population std) over sources.
    pub fn column_stats(&self) -> Vec<(f64, f64)> {
        let n = self.sources.len() as f64;
        (0..self.targets.len())
            .map(|t| {
                let mean = self.h.iter().map(|r| r[t]).sum::<f64>() / n;
                let var = self.h.iter().map(|r| (r[t] - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .collect()
    }
}

/// ĥ_{s,t} = (h_{s,t} − mean_s h_{·,t}) / std_s h_{·,t}, population std.
pub fn normalize_scores(m: &ScoreMatrix) -> Result<Vec<Vec<f64>>> {
    if m.sources.len() < 2 {
        return Err(Error::invalid("normalization needs at least two sources"));
    }
    let stats = m.column_stats();
    if let Some(t) = stats.iter().position(|(_, sd)| *sd == 0.0) {
        return Err(Error::invalid(format!(
            "target {} has identical scores for every source",
            m.targets[t]
        )));
    }
    Ok(m.h
        .iter()
        .map(|row| row.iter().zip(&stats).map(|(x, (mu, sd))| (x - mu) / sd).collect())
        .collect())
}

/// Linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of the mean of `row`.
pub fn bootstrap_ci(row: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if row.len() < 2 {
        return Err(Error::invalid("bootstrap needs at least two values"));
    }
    if n_resamples < 100 {
        return Err(Error::invalid(format!(
            "need at least 100 resamples, got {n_resamples}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    let n = row.len();
    let mut rng = stream_rng(seed, 0);
    // Means are taken relative to row[0], so a constant row resamples to
    // exactly its own value.
    let shift = row[0];
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| shift + (0..n).map(|_| row[rng.random_range(0..n)] - shift).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

/// h^± = ĥ^± · σ̄ + μ̄ with σ̄, μ̄ the per-target std and mean averaged
/// over targets.
pub fn denormalize_ci(lo: f64, hi: f64, m: &ScoreMatrix) -> Result<(f64, f64)> {
    normalize_scores(m)?;
    let stats = m.column_stats();
    let k = stats.len() as f64;
    let mu = stats.iter().map(|s| s.0).sum::<f64>() / k;
    let sd = stats.iter().map(|s| s.1).sum::<f64>() / k;
    Ok((lo * sd + mu, hi * sd + mu))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub source: String,
    pub per_target: Vec<f64>,
    pub mean: f64,
    pub ci: Option<(f64, f64)>,
}

/// One row per source with raw-space bootstrap intervals. Intervals are
/// omitted when there are fewer than two sources or two targets.
pub fn leaderboard(m: &ScoreMatrix, n_resamples: usize, level: f64, seed: u64) -> Result<Vec<LeaderboardRow>> {
    let with_ci = m.sources.len() >= 2 && m.targets.len() >= 2;
    let norm = if with_ci { Some(normalize_scores(m)?) } else { None };
    m.sources
        .iter()
        .enumerate()
        .map(|(s, name)| {
            let row = &m.h[s];
            let ci = match &norm {
                Some(nh) => {
                    let (lo, hi) = bootstrap_ci(&nh[s], n_resamples, level, derive_seed(seed, name))?;
                    Some(denormalize_ci(lo, hi, m)?)
                }
                None => None,
            };
            Ok(LeaderboardRow {
                source: name.clone(),
                per_target: row.clone(),
                mean: row.iter().sum::<f64>() / row.len() as f64,
                ci,
            })
        })
        .collect()
}
