//! Two-stage training on the toy backend: supervised cross-training on
//! teacher chains, then rounds of self-generated chain filtering and
//! fine-tuning.

mod eval;
mod loss;
mod sarr;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    self, BackendError, GenerationRequest, ImageStore, TokenStat, ToyBackend, ToyModel,
    TrainExample, Vocab, EOS,
};
use crate::chain::{render_chain, Section};
use crate::corpus::{build_prompts, Corpus, CorpusError, PromptTemplates, SplitPlan};
use crate::record::{ChainRecord, RecordError};
use crate::seed::derive_seed;

pub use eval::{evaluate_accuracy, AccuracyReport, DomainAccuracy, EvalPathway};
pub use loss::{dual_loss, mtct_loss, sarr_loss, DualScores};
pub use sarr::{
    run_sarr, sarr_generate_and_filter, DomainRejection, EmptyRoundPolicy, RejectionStats,
    SarrOutcome, SarrRoundState,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("chain for unknown sample {0}")]
    OrphanChain(String),
    #[error("round {0} retained no chains")]
    EmptyRetainedSet(usize),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("evaluation sample {0} reached a training batch")]
    EvalLeak(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("io error on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Mtct,
    Sarr,
    ReasoningOnly,
    ClsOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Mtct,
        TrainMode::Sarr,
        TrainMode::ReasoningOnly,
        TrainMode::ClsOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Mtct => "mtct",
            TrainMode::Sarr => "sarr",
            TrainMode::ReasoningOnly => "reasoning-only",
            TrainMode::ClsOnly => "cls-only",
        }
    }

    pub fn uses_cls(self) -> bool {
        self != TrainMode::ReasoningOnly
    }

    pub fn uses_reasoning(self) -> bool {
        self != TrainMode::ClsOnly
    }

    /// The pathway a trained model answers through: a reasoning-only model
    /// never saw the classification prompt.
    pub fn eval_pathway(self) -> EvalPathway {
        match self {
            TrainMode::ReasoningOnly => EvalPathway::Reasoning,
            _ => EvalPathway::Classification,
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown training mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Self-alignment rounds after the supervised stage.
    pub rounds: usize,
    /// Epochs of fine-tuning inside each self-alignment round.
    pub round_epochs: usize,
    pub seeds: Vec<u64>,
    /// Reset to the supervised-stage weights before each round's fine-tune.
    pub restart_each_round: bool,
    pub empty_round_policy: EmptyRoundPolicy,
    /// Sampling temperature for self-generated chains (0 = greedy).
    pub generation_temperature: f64,
    pub max_chain_tokens: usize,
    pub max_label_tokens: usize,
    pub eval_pathway: Option<EvalPathway>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.1,
            rounds: 3,
            round_epochs: 1,
            seeds: vec![0, 1, 2],
            restart_each_round: false,
            empty_round_policy: EmptyRoundPolicy::Halt,
            generation_temperature: 0.0,
            max_chain_tokens: 64,
            max_label_tokens: 4,
            eval_pathway: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.generation_temperature >= 0.0 && self.generation_temperature.is_finite()) {
            return bad("generation_temperature must be >= 0");
        }
        if self.max_chain_tokens == 0 || self.max_label_tokens == 0 {
            return bad("token budgets must be >= 1");
        }
        Ok(())
    }
}

/// One sample bound to both prompts. `reason_target` is `None` for
/// classification-only records (no retained chain).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualRecord {
    pub sample_id: String,
    pub image_ref: String,
    pub domain: String,
    pub cls_prompt: String,
    pub cls_target: Vec<String>,
    pub reason_prompt: String,
    pub reason_target: Option<Vec<String>>,
}

impl DualRecord {
    pub fn is_classification_only(&self) -> bool {
        self.reason_target.is_none()
    }
}

pub fn chain_tokens(chain: &crate::chain::ReasoningChain) -> Vec<String> {
    render_chain(chain)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// One record per (sample, chain) pair, in `samples` order; samples with no
/// chain get a classification-only record.
pub fn assemble_dual_records<'a>(
    corpus: &Corpus,
    samples: impl IntoIterator<Item = &'a crate::corpus::Sample>,
    chains: &[ChainRecord],
    templates: &PromptTemplates,
) -> Result<Vec<DualRecord>, TrainError> {
    let samples: Vec<_> = samples.into_iter().collect();
    let known: BTreeSet<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
    let mut by_sample: HashMap<&str, Vec<&ChainRecord>> = HashMap::new();
    for c in chains {
        if !known.contains(c.sample_id.as_str()) {
            return Err(TrainError::OrphanChain(c.sample_id.clone()));
        }
        by_sample.entry(c.sample_id.as_str()).or_default().push(c);
    }
    let mut out = Vec::new();
    for sample in samples {
        let prompts = build_prompts(sample, corpus, templates)?;
        let cls_target: Vec<String> = sample
            .label
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let base = DualRecord {
            sample_id: sample.sample_id.clone(),
            image_ref: sample.image_ref.clone(),
            domain: sample.domain.clone(),
            cls_prompt: prompts.classification_prompt,
            cls_target,
            reason_prompt: prompts.reasoning_prompt,
            reason_target: None,
        };
        match by_sample.get(sample.sample_id.as_str()) {
            Some(cs) => {
                for c in cs {
                    out.push(DualRecord {
                        reason_target: Some(chain_tokens(&c.chain)),
                        ..base.clone()
                    });
                }
            }
            None => out.push(base),
        }
    }
    Ok(out)
}

/// Vocabulary for a toy model: section tags, label and template words, chain
/// tokens and image tokens of every sample.
pub fn build_vocab(
    corpus: &Corpus,
    chains: &[ChainRecord],
    templates: &PromptTemplates,
) -> Result<Vocab, TrainError> {
    let mut tokens: Vec<String> = Section::all_tags().map(str::to_string).collect();
    tokens.extend(
        corpus
            .labels()
            .iter()
            .flat_map(|l| l.split_whitespace().map(str::to_string)),
    );
    for text in [&templates.classification, &templates.reasoning] {
        tokens.extend(
            text.split_whitespace()
                .map(|w| {
                    w.trim_matches(|c: char| c.is_ascii_punctuation())
                        .to_string()
                })
                .filter(|w| !w.is_empty() && !w.contains(['{', '}'])),
        );
    }
    for c in chains {
        tokens.extend(chain_tokens(&c.chain));
    }
    for s in corpus.samples() {
        tokens.extend(ImageStore::tokens(&s.image_ref)?);
    }
    Ok(Vocab::new(tokens))
}

/// The untrained model every run for `seed` starts from.
pub fn initial_model(
    corpus: &Corpus,
    chains: &[ChainRecord],
    templates: &PromptTemplates,
    seed: u64,
) -> Result<ToyModel, TrainError> {
    Ok(ToyModel::new(
        build_vocab(corpus, chains, templates)?,
        derive_seed(seed, &[&"init"]),
    ))
}

/// Where per-token statistics are read from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsSource {
    /// The record's own targets, teacher-forced.
    #[default]
    TeacherForced,
    /// The model's greedy decode under each prompt.
    FreeDecode,
}

/// Per-token probability and entropy over every target a record trains on
/// under `mode`, in record order.
pub fn token_stats(
    backend: &ToyBackend,
    records: &[&DualRecord],
    mode: TrainMode,
    source: StatsSource,
    max_tokens: usize,
) -> Result<Vec<TokenStat>, TrainError> {
    let mut out = Vec::new();
    for rec in records {
        let mut targets: Vec<(&str, Option<Vec<String>>)> = Vec::new();
        if mode.uses_cls() {
            targets.push((&rec.cls_prompt, Some(rec.cls_target.clone())));
        }
        if mode.uses_reasoning() && rec.reason_target.is_some() {
            targets.push((&rec.reason_prompt, rec.reason_target.clone()));
        }
        for (prompt, target) in targets {
            let tokens = match source {
                StatsSource::TeacherForced => target.unwrap_or_default(),
                StatsSource::FreeDecode => {
                    let request = GenerationRequest {
                        image_ref: rec.image_ref.clone(),
                        prompt: prompt.to_string(),
                        num_candidates: 1,
                        temperature: 0.0,
                        max_tokens,
                        seed: 0,
                    };
                    let text = backend::generate(backend, &request)?.remove(0);
                    text.split_whitespace().map(str::to_string).collect()
                }
            };
            if !tokens.is_empty() {
                out.extend(backend.position_stats(&rec.image_ref, prompt, &tokens)?);
            }
        }
    }
    Ok(out)
}

/// Training examples for a batch. Label tokens carry weight `1/B`, chain
/// tokens `1/(B*T)` with `T` the chain length including the end token, so the
/// weighted cross-entropy equals [`dual_loss`] on the same batch.
pub fn batch_examples(
    backend: &ToyBackend,
    batch: &[&DualRecord],
    mode: TrainMode,
) -> Result<Vec<TrainExample>, TrainError> {
    let b = batch.len() as f64;
    let mut out = Vec::with_capacity(2 * batch.len());
    for rec in batch {
        if mode.uses_cls() {
            out.push(backend.example(&rec.image_ref, &rec.cls_prompt, &rec.cls_target, 1.0 / b)?);
        }
        if let (true, Some(target)) = (mode.uses_reasoning(), &rec.reason_target) {
            let t = (target.len() + 1) as f64;
            out.push(backend.example(&rec.image_ref, &rec.reason_prompt, target, 1.0 / (b * t))?);
        }
    }
    Ok(out)
}

/// Teacher-forced scores of a record under `mode`, end token included.
pub fn score_record(
    backend: &ToyBackend,
    rec: &DualRecord,
    mode: TrainMode,
) -> Result<DualScores, TrainError> {
    use crate::backend::score_sequence;
    let with_eos = |t: &[String]| {
        let mut v = t.to_vec();
        v.push(EOS.to_string());
        v
    };
    let cls = if mode.uses_cls() {
        Some(score_sequence(
            backend,
            &rec.image_ref,
            &rec.cls_prompt,
            &with_eos(&rec.cls_target),
        )?)
    } else {
        None
    };
    let reason = match (&rec.reason_target, mode.uses_reasoning()) {
        (Some(t), true) => Some(score_sequence(
            backend,
            &rec.image_ref,
            &rec.reason_prompt,
            &with_eos(t),
        )?),
        _ => None,
    };
    Ok(DualScores { cls, reason })
}

/// Records that contribute to the objective under `mode`.
pub fn records_for_mode(records: &[DualRecord], mode: TrainMode) -> Vec<&DualRecord> {
    records
        .iter()
        .filter(|r| mode.uses_cls() || (mode.uses_reasoning() && r.reason_target.is_some()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    /// 0 for the supervised stage, k for self-alignment round k.
    pub round: usize,
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    pub loss: f64,
}

/// Epochs of full-batch-sequence gradient descent over `records`, shuffled
/// per epoch from `seed`. Returns one pre-step loss per step.
#[allow(clippy::too_many_arguments)]
pub fn fit_records(
    backend: &mut ToyBackend,
    records: &[DualRecord],
    mode: TrainMode,
    epochs: usize,
    cfg: &TrainConfig,
    split: &SplitPlan,
    seed: u64,
    round: usize,
) -> Result<Vec<StepLoss>, TrainError> {
    if let Some(leak) = records
        .iter()
        .find(|r| split.eval_ids.contains(&r.sample_id))
    {
        return Err(TrainError::EvalLeak(leak.sample_id.clone()));
    }
    let usable = records_for_mode(records, mode);
    if usable.is_empty() && epochs > 0 {
        return Err(TrainError::EmptyBatch);
    }
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&"epoch", &round, &epoch]));
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&DualRecord> = chunk.iter().map(|&i| usable[i]).collect();
            let examples = batch_examples(backend, &batch, mode)?;
            let loss = backend.fine_tune_step(&examples, cfg.learning_rate)?;
            history.push(StepLoss {
                round,
                epoch,
                step,
                batch_size: batch.len(),
                loss,
            });
        }
    }
    Ok(history)
}

/// Supervised stage under `mode` on the split's training samples.
#[allow(clippy::too_many_arguments)]
pub fn run_supervised(
    backend: &mut ToyBackend,
    corpus: &Corpus,
    split: &SplitPlan,
    chains: &[ChainRecord],
    templates: &PromptTemplates,
    mode: TrainMode,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<StepLoss>, TrainError> {
    cfg.validate()?;
    let records = assemble_dual_records(corpus, split.train_samples(corpus), chains, templates)?;
    let stage_mode = if mode == TrainMode::Sarr {
        TrainMode::Mtct
    } else {
        mode
    };
    fit_records(
        backend, &records, stage_mode, cfg.epochs, cfg, split, seed, 0,
    )
}

/// Supervised cross-training on teacher chains.
pub fn run_mtct(
    backend: &mut ToyBackend,
    corpus: &Corpus,
    split: &SplitPlan,
    chains: &[ChainRecord],
    templates: &PromptTemplates,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<StepLoss>, TrainError> {
    run_supervised(
        backend,
        corpus,
        split,
        chains,
        templates,
        TrainMode::Mtct,
        cfg,
        seed,
    )
}

/// Everything one training run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub mode: TrainMode,
    pub seed: u64,
    pub history: Vec<StepLoss>,
    pub sarr: Option<SarrOutcome>,
    pub accuracy: AccuracyReport,
}

/// Fresh toy model, supervised stage under `mode`, self-alignment rounds for
/// [`TrainMode::Sarr`], then held-out evaluation.
#[allow(clippy::too_many_arguments)]
pub fn run_mode(
    corpus: &Corpus,
    split: &SplitPlan,
    chains: &[ChainRecord],
    templates: &PromptTemplates,
    mode: TrainMode,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModeRun, ToyBackend), TrainError> {
    cfg.validate()?;
    let mut backend = ToyBackend::new(initial_model(corpus, chains, templates, seed)?);
    let mut history = run_supervised(
        &mut backend,
        corpus,
        split,
        chains,
        templates,
        mode,
        cfg,
        seed,
    )?;
    let sarr = if mode == TrainMode::Sarr {
        let out = run_sarr(
            &mut backend,
            corpus,
            split,
            templates,
            cfg,
            seed,
            checkpoint_dir,
        )?;
        history.extend(out.history.iter().cloned());
        Some(out)
    } else {
        None
    };
    let pathway = cfg.eval_pathway.unwrap_or(mode.eval_pathway());
    let max_tokens = match pathway {
        EvalPathway::Classification => cfg.max_label_tokens,
        EvalPathway::Reasoning => cfg.max_chain_tokens,
    };
    let accuracy = evaluate_accuracy(&backend, corpus, split, templates, pathway, max_tokens)?;
    Ok((
        ModeRun {
            mode,
            seed,
            history,
            sarr,
            accuracy,
        },
        backend,
    ))
}

/// Mean loss per epoch of a history, in epoch order.
pub fn epoch_means(history: &[StepLoss]) -> Vec<f64> {
    let mut out: Vec<(usize, usize, f64, usize)> = Vec::new();
    for s in history {
        match out.last_mut() {
            Some((r, e, sum, n)) if *r == s.round && *e == s.epoch => {
                *sum += s.loss;
                *n += 1;
            }
            _ => out.push((s.round, s.epoch, s.loss, 1)),
        }
    }
    out.into_iter()
        .map(|(_, _, sum, n)| sum / n as f64)
        .collect()
}
