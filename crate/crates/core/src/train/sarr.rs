//! Self-alignment rounds: the model writes chains for its own training
//! samples, chains whose conclusion names the ground-truth label are kept,
//! and the model is fine-tuned on them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{self, Backend, GenerationRequest, ToyBackend, ToyModel};
use crate::chain::{extract_conclusion, match_label, parse_chain, render_chain, FailureReason};
use crate::corpus::{build_prompts, Corpus, PromptTemplates, Sample, SplitPlan};
use crate::manifest::{json_digest, sha256_hex};
use crate::record::{ChainRecord, ChainSource};
use crate::seed::derive_seed;

use super::{assemble_dual_records, fit_records, StepLoss, TrainConfig, TrainError, TrainMode};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyRoundPolicy {
    /// Stop with [`TrainError::EmptyRetainedSet`].
    #[default]
    Halt,
    /// Keep the current weights and move on to the next round.
    SkipRound,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRejection {
    pub attempted: usize,
    pub retained: usize,
}

impl DomainRejection {
    pub fn rejection_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            1.0 - self.retained as f64 / self.attempted as f64
        }
    }
}

/// Rejection of self-generated chains by a model that has completed `round`
/// self-alignment fine-tunes (0 = straight after the supervised stage).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub round: usize,
    pub per_domain: BTreeMap<String, DomainRejection>,
    pub per_reason: BTreeMap<String, usize>,
}

impl RejectionStats {
    pub fn attempted(&self) -> usize {
        self.per_domain.values().map(|d| d.attempted).sum()
    }

    pub fn retained(&self) -> usize {
        self.per_domain.values().map(|d| d.retained).sum()
    }

    /// Pooled over domains: `1 - retained / attempted`.
    pub fn rejection_rate(&self) -> f64 {
        match self.attempted() {
            0 => 0.0,
            n => 1.0 - self.retained() as f64 / n as f64,
        }
    }

    /// Unweighted mean of per-domain rates.
    pub fn domain_average(&self) -> f64 {
        if self.per_domain.is_empty() {
            return 0.0;
        }
        self.per_domain
            .values()
            .map(DomainRejection::rejection_rate)
            .sum::<f64>()
            / self.per_domain.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarrRoundState {
    /// Round index k, from 1.
    pub round: usize,
    pub retained: Vec<ChainRecord>,
    /// Measured on the generations that produced `retained`.
    pub rejection: RejectionStats,
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarrOutcome {
    pub rounds: Vec<SarrRoundState>,
    /// Rejection of the model after the last round.
    pub final_rejection: RejectionStats,
    pub history: Vec<StepLoss>,
}

impl SarrOutcome {
    /// Rejection after 0, 1, ..., N completed rounds.
    pub fn rejection_trace(&self) -> Vec<RejectionStats> {
        self.rounds
            .iter()
            .map(|r| r.rejection.clone())
            .chain(std::iter::once(self.final_rejection.clone()))
            .collect()
    }
}

enum Judged {
    Kept(ChainRecord),
    Rejected(FailureReason),
}

fn judge(
    backend: &dyn Backend,
    corpus: &Corpus,
    sample: &Sample,
    templates: &PromptTemplates,
    round: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Judged, TrainError> {
    let prompts = build_prompts(sample, corpus, templates)?;
    let request = GenerationRequest {
        image_ref: sample.image_ref.clone(),
        prompt: prompts.reasoning_prompt,
        num_candidates: 1,
        temperature: cfg.generation_temperature,
        max_tokens: cfg.max_chain_tokens,
        seed: derive_seed(seed, &[&"self-generate", &round, &sample.sample_id]),
    };
    let text = backend::generate(backend, &request)?.remove(0);
    let conclusion = match extract_conclusion(&text) {
        Ok(c) => c,
        Err(_) => return Ok(Judged::Rejected(FailureReason::NoConclusionTag)),
    };
    if !match_label(&conclusion, &sample.label) {
        return Ok(Judged::Rejected(FailureReason::LabelMismatch));
    }
    let chain = match parse_chain(&text) {
        Ok(c) => c,
        Err(e) => return Ok(Judged::Rejected(FailureReason::Structure(e))),
    };
    let tokens = backend.count_tokens(&render_chain(&chain)).max(1);
    Ok(Judged::Kept(ChainRecord::new(
        sample.sample_id.clone(),
        chain,
        tokens,
        ChainSource::SelfGenerated,
        round.max(1),
    )?))
}

/// One self-generated chain per training sample, kept iff its conclusion
/// names the sample's label and the chain is well formed.
pub fn sarr_generate_and_filter(
    backend: &dyn Backend,
    corpus: &Corpus,
    split: &SplitPlan,
    templates: &PromptTemplates,
    round: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SarrRoundState, TrainError> {
    if round == 0 {
        return Err(TrainError::InvalidConfig("round index starts at 1".into()));
    }
    let samples: Vec<&Sample> = split.train_samples(corpus).collect();
    let judged: Vec<Judged> = samples
        .par_iter()
        .map(|s| judge(backend, corpus, s, templates, round, cfg, seed))
        .collect::<Result<_, _>>()?;
    let mut rejection = RejectionStats {
        round: round - 1,
        ..RejectionStats::default()
    };
    let mut retained = Vec::new();
    for (sample, j) in samples.iter().zip(judged) {
        let d = rejection
            .per_domain
            .entry(sample.domain.clone())
            .or_default();
        d.attempted += 1;
        match j {
            Judged::Kept(rec) => {
                d.retained += 1;
                retained.push(rec);
            }
            Judged::Rejected(reason) => {
                *rejection.per_reason.entry(reason.to_string()).or_default() += 1;
            }
        }
    }
    Ok(SarrRoundState {
        round,
        retained,
        rejection,
        snapshot: None,
    })
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    digest: String,
    state: SarrRoundState,
    history: Vec<StepLoss>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn state_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("round_{k}.state.json"))
}

fn snapshot_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("round_{k}.snapshot"))
}

/// Completed rounds recorded in `dir` under `digest`, in order, stopping at
/// the first gap.
fn load_checkpoints(dir: &Path, digest: &str, rounds: usize) -> Vec<(Checkpoint, ToyModel)> {
    let mut out = Vec::new();
    for k in 1..=rounds {
        let Ok(text) = fs::read_to_string(state_path(dir, k)) else {
            break;
        };
        let Ok(cp) = serde_json::from_str::<Checkpoint>(&text) else {
            break;
        };
        if cp.digest != digest || cp.state.round != k {
            break;
        }
        let Ok(bytes) = fs::read(snapshot_path(dir, k)) else {
            break;
        };
        let Ok(model) = ToyModel::restore(&bytes) else {
            break;
        };
        out.push((cp, model));
    }
    out
}

/// Runs `cfg.rounds` self-alignment rounds starting from the backend's
/// current (supervised-stage) weights.
///
/// With a checkpoint directory, each finished round's weights and state are
/// written there, and rounds already present for the same configuration and
/// starting weights are loaded instead of recomputed.
pub fn run_sarr(
    backend: &mut ToyBackend,
    corpus: &Corpus,
    split: &SplitPlan,
    templates: &PromptTemplates,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<SarrOutcome, TrainError> {
    cfg.validate()?;
    let stage1 = backend.model().clone();
    let digest = json_digest(&(
        cfg,
        seed,
        templates,
        &split.train_ids,
        sha256_hex(&stage1.snapshot()),
    ));
    let mut rounds = Vec::new();
    let mut history = Vec::new();

    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut last = None;
        for (cp, model) in load_checkpoints(dir, &digest, cfg.rounds) {
            rounds.push(cp.state);
            history.extend(cp.history);
            last = Some(model);
        }
        if let Some(model) = last {
            backend.set_model(model);
        }
    }

    for k in rounds.len() + 1..=cfg.rounds {
        let mut state =
            sarr_generate_and_filter(&*backend, corpus, split, templates, k, cfg, seed)?;
        let mut round_history = Vec::new();
        if state.retained.is_empty() {
            if cfg.empty_round_policy == EmptyRoundPolicy::Halt {
                return Err(TrainError::EmptyRetainedSet(k));
            }
        } else {
            let records = assemble_dual_records(
                corpus,
                split.train_samples(corpus),
                &state.retained,
                templates,
            )?;
            if cfg.restart_each_round {
                backend.set_model(stage1.clone());
            }
            round_history = fit_records(
                backend,
                &records,
                TrainMode::Sarr,
                cfg.round_epochs,
                cfg,
                split,
                seed,
                k,
            )?;
        }
        if let Some(dir) = checkpoint_dir {
            let snap = snapshot_path(dir, k);
            write_atomic(&snap, &backend.model().snapshot())?;
            state.snapshot = Some(snap);
            let cp = Checkpoint {
                digest: digest.clone(),
                state: state.clone(),
                history: round_history.clone(),
            };
            let text = serde_json::to_string_pretty(&cp).expect("checkpoint serializes");
            write_atomic(&state_path(dir, k), text.as_bytes())?;
        }
        history.extend(round_history);
        rounds.push(state);
    }

    let final_rejection = sarr_generate_and_filter(
        &*backend,
        corpus,
        split,
        templates,
        cfg.rounds + 1,
        cfg,
        seed,
    )?
    .rejection;
    Ok(SarrOutcome {
        rounds,
        final_rejection,
        history,
    })
}
