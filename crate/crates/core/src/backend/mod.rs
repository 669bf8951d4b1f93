//! Model backend contract: generate candidate texts, score target sequences
//! under teacher forcing, and (toy only) fine-tune.

mod mock;
mod toy;
mod wire;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::ScriptedBackend;
pub use toy::{
    ImageStore, ParamIndex, TokenStat, ToyBackend, ToyModel, TrainExample, Vocab, BOS, EOS,
    INIT_SCALE,
};
pub use wire::{WireBackend, WireConfig, API_KEY_ENV, ENDPOINT_ENV};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Generate,
    Score,
    Finetune,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Generate => "generate",
            Capability::Score => "score",
            Capability::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Wire,
    Toy,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub capabilities: BTreeSet<Capability>,
}

impl BackendDescriptor {
    pub fn has(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend lacks the {0} capability")]
    CapabilityMissing(Capability),
    #[error("token {0:?} is not in the vocabulary")]
    TokenNotInVocab(String),
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    BackendUnavailable { attempts: u32, message: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("backend returned {got} candidates, expected {expected}")]
    CandidateCount { expected: usize, got: usize },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("cannot resolve image {image_ref}: {message}")]
    ImageUnavailable { image_ref: String, message: String },
    #[error("no script entry for {0}")]
    Unscripted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub image_ref: String,
    pub prompt: String,
    pub num_candidates: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.num_candidates == 0 {
            return Err(BackendError::InvalidRequest(
                "num_candidates must be >= 1".into(),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequenceKind {
    LabelTokens,
    ChainTokens,
}

/// Per-token log-probabilities of a target sequence, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    tokens: Vec<String>,
    logprobs: Vec<f64>,
    kind: SequenceKind,
}

impl ScoredSequence {
    pub fn new(
        tokens: Vec<String>,
        logprobs: Vec<f64>,
        kind: SequenceKind,
    ) -> Result<Self, String> {
        if tokens.len() != logprobs.len() {
            return Err(format!(
                "{} tokens but {} logprobs",
                tokens.len(),
                logprobs.len()
            ));
        }
        if let Some(lp) = logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(format!("logprob {lp} is not <= 0"));
        }
        Ok(Self {
            tokens,
            logprobs,
            kind,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn kind(&self) -> SequenceKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn probabilities(&self) -> impl Iterator<Item = f64> + '_ {
        self.logprobs.iter().map(|lp| lp.exp())
    }
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Returns `request.num_candidates` texts. Callers should go through
    /// [`generate`], which checks capabilities and the request first.
    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError>;

    fn score(
        &self,
        _image_ref: &str,
        _prompt: &str,
        _target: &[String],
    ) -> Result<ScoredSequence, BackendError> {
        Err(BackendError::CapabilityMissing(Capability::Score))
    }

    /// Token count under this backend's tokenizer.
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

fn require(backend: &dyn Backend, cap: Capability) -> Result<(), BackendError> {
    if backend.descriptor().has(cap) {
        Ok(())
    } else {
        Err(BackendError::CapabilityMissing(cap))
    }
}

pub fn generate(
    backend: &dyn Backend,
    request: &GenerationRequest,
) -> Result<Vec<String>, BackendError> {
    require(backend, Capability::Generate)?;
    request.validate()?;
    let texts = backend.generate(request)?;
    if texts.len() != request.num_candidates {
        return Err(BackendError::CandidateCount {
            expected: request.num_candidates,
            got: texts.len(),
        });
    }
    Ok(texts)
}

pub fn score_sequence(
    backend: &dyn Backend,
    image_ref: &str,
    prompt: &str,
    target: &[String],
) -> Result<ScoredSequence, BackendError> {
    require(backend, Capability::Score)?;
    if target.is_empty() {
        return Err(BackendError::InvalidRequest(
            "target must be non-empty".into(),
        ));
    }
    backend.score(image_ref, prompt, target)
}
