//! Reasoning-chain construction: sample candidates from a teacher model with
//! the ground-truth label withheld, then keep the first candidate that has
//! all five sections and concludes with exactly one of the class options.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, Backend, BackendError, Capability, GenerationRequest};
use crate::chain::{parse_chain, render_chain, validate_chain, FailureReason, ReasoningChain};
use crate::corpus::{
    build_prompts, Corpus, CorpusError, PromptPair, PromptTemplates, Sample, SplitPlan,
};
use crate::manifest::json_digest;
use crate::record::{ChainRecord, ChainSource, RecordError};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("rejection sampling needs at least one candidate")]
    NoCandidates,
    #[error("sample {sample_id}: {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Capability(BackendError),
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Candidates requested per sample.
    pub candidates: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
    /// Keep every valid candidate instead of the first one.
    pub retain_all: bool,
    /// Extra passes over samples whose candidates all failed, with fresh seeds.
    pub retry_sweeps: usize,
    pub templates: PromptTemplates,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            candidates: 4,
            temperature: 0.7,
            max_tokens: 512,
            seed: 0,
            retain_all: false,
            retry_sweeps: 0,
            templates: PromptTemplates::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCount {
    pub attempted: usize,
    pub retained: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenStats {
    pub attempted: usize,
    pub retained: usize,
    pub per_failure_reason: BTreeMap<String, usize>,
    pub per_domain: BTreeMap<String, DomainCount>,
}

impl GenStats {
    fn record(&mut self, domain: &str, outcome: &Outcome) {
        self.attempted += 1;
        let dc = self.per_domain.entry(domain.to_string()).or_default();
        dc.attempted += 1;
        match outcome {
            Outcome::Retained { .. } => {
                self.retained += 1;
                dc.retained += 1;
            }
            Outcome::Failed { reason } => {
                *self.per_failure_reason.entry(reason.clone()).or_default() += 1;
            }
        }
    }

    pub fn retention_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.retained as f64 / self.attempted as f64
        }
    }
}

/// Result of rejection sampling over one sample's candidates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Retained { index: usize, chain: ReasoningChain },
    Rejected { reason: FailureReason },
}

/// First-valid rejection sampling. Also returns each candidate's first
/// failure reason (`None` for valid candidates).
pub fn reject_sample(
    candidates: &[String],
    options: &[String],
) -> Result<(Verdict, Vec<Option<FailureReason>>), GenError> {
    if candidates.is_empty() {
        return Err(GenError::NoCandidates);
    }
    let reasons: Vec<Option<FailureReason>> = candidates
        .iter()
        .map(|c| validate_chain(c, options).failure_reason())
        .collect();
    let verdict = match reasons.iter().position(Option::is_none) {
        Some(index) => Verdict::Retained {
            index,
            chain: parse_chain(&candidates[index]).expect("valid candidate parses"),
        },
        None => Verdict::Rejected {
            reason: reasons
                .last()
                .cloned()
                .flatten()
                .expect("invalid candidate has a reason"),
        },
    };
    Ok((verdict, reasons))
}

/// Requests `k` chains for `sample` under the reasoning prompt. Neither the
/// label nor the option list is sent.
pub fn generate_chain_candidates(
    backend: &dyn Backend,
    sample: &Sample,
    prompts: &PromptPair,
    k: usize,
    temperature: f64,
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<String>, BackendError> {
    let request = GenerationRequest {
        image_ref: sample.image_ref.clone(),
        prompt: prompts.reasoning_prompt.clone(),
        num_candidates: k,
        temperature,
        max_tokens,
        seed,
    };
    backend::generate(backend, &request)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
enum Outcome {
    Retained { chains: Vec<(String, usize)> },
    Failed { reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProgressLine {
    config_hash: String,
    sample_id: String,
    domain: String,
    outcome: Outcome,
}

fn process_sample(
    backend: &dyn Backend,
    corpus: &Corpus,
    sample: &Sample,
    cfg: &GenConfig,
) -> Result<Outcome, GenError> {
    let prompts = build_prompts(sample, corpus, &cfg.templates)?;
    let mut reason = None;
    for sweep in 0..=cfg.retry_sweeps {
        let seed = derive_seed(cfg.seed, &[&sample.sample_id, &sweep]);
        let candidates = generate_chain_candidates(
            backend,
            sample,
            &prompts,
            cfg.candidates,
            cfg.temperature,
            cfg.max_tokens,
            seed,
        )
        .map_err(|source| GenError::Backend {
            sample_id: sample.sample_id.clone(),
            source,
        })?;
        let (verdict, reasons) = reject_sample(&candidates, &prompts.options)?;
        match verdict {
            Verdict::Retained { index, chain } => {
                let keep: Vec<usize> = if cfg.retain_all {
                    reasons
                        .iter()
                        .enumerate()
                        .filter(|(_, r)| r.is_none())
                        .map(|(i, _)| i)
                        .collect()
                } else {
                    vec![index]
                };
                let chains = keep
                    .into_iter()
                    .map(|i| {
                        let text = if i == index {
                            render_chain(&chain)
                        } else {
                            render_chain(
                                &parse_chain(&candidates[i]).expect("valid candidate parses"),
                            )
                        };
                        let tokens = backend.count_tokens(&text).max(1);
                        (text, tokens)
                    })
                    .collect();
                return Ok(Outcome::Retained { chains });
            }
            Verdict::Rejected { reason: r } => reason = Some(r),
        }
    }
    Ok(Outcome::Failed {
        reason: reason.expect("at least one sweep").to_string(),
    })
}

fn config_hash(backend: &dyn Backend, cfg: &GenConfig) -> String {
    let d = backend.descriptor();
    json_digest(&(cfg, &d.kind, &d.model_name))
}

fn read_progress(path: &Path, hash: &str) -> Result<HashMap<String, Outcome>, GenError> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let io = |source| GenError::IoFailure {
        path: path.to_path_buf(),
        source,
    };
    for line in BufReader::new(File::open(path).map_err(io)?).lines() {
        let line = line.map_err(io)?;
        // A torn final line from an interrupted write is ignored.
        if let Ok(p) = serde_json::from_str::<ProgressLine>(&line) {
            if p.config_hash == hash {
                done.insert(p.sample_id, p.outcome);
            }
        }
    }
    Ok(done)
}

/// Runs rejection sampling over every training sample of `split`.
///
/// With a `progress` path, each finished sample is appended to that file and
/// samples already recorded there under the same configuration are not
/// regenerated, so an interrupted run resumes to the same output.
pub fn build_reasoning_dataset(
    corpus: &Corpus,
    split: &SplitPlan,
    backend: &dyn Backend,
    cfg: &GenConfig,
    progress: Option<&Path>,
) -> Result<(Vec<ChainRecord>, GenStats), GenError> {
    if !backend.descriptor().has(Capability::Generate) {
        return Err(GenError::Capability(BackendError::CapabilityMissing(
            Capability::Generate,
        )));
    }
    let hash = config_hash(backend, cfg);
    let samples: Vec<&Sample> = split.train_samples(corpus).collect();
    let mut done = match progress {
        Some(p) => read_progress(p, &hash)?,
        None => HashMap::new(),
    };

    let writer = match progress {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|source| GenError::IoFailure {
                    path: dir.to_path_buf(),
                    source,
                })?;
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|source| GenError::IoFailure {
                    path: p.to_path_buf(),
                    source,
                })?;
            Some(Mutex::new(file))
        }
        None => None,
    };

    let pending: Vec<&Sample> = samples
        .iter()
        .copied()
        .filter(|s| !done.contains_key(&s.sample_id))
        .collect();
    let fresh: Vec<(String, Outcome)> = pending
        .par_iter()
        .map(|sample| {
            let outcome = process_sample(backend, corpus, sample, cfg)?;
            if let (Some(w), Some(path)) = (&writer, progress) {
                let line = ProgressLine {
                    config_hash: hash.clone(),
                    sample_id: sample.sample_id.clone(),
                    domain: sample.domain.clone(),
                    outcome: outcome.clone(),
                };
                let mut f = w.lock().expect("progress lock");
                writeln!(
                    f,
                    "{}",
                    serde_json::to_string(&line).expect("progress serializes")
                )
                .and_then(|_| f.flush())
                .map_err(|source| GenError::IoFailure {
                    path: path.to_path_buf(),
                    source,
                })?;
            }
            Ok((sample.sample_id.clone(), outcome))
        })
        .collect::<Result<_, GenError>>()?;
    done.extend(fresh);

    let mut records = Vec::new();
    let mut stats = GenStats::default();
    for sample in samples {
        let outcome = &done[&sample.sample_id];
        stats.record(&sample.domain, outcome);
        if let Outcome::Retained { chains } = outcome {
            for (text, tokens) in chains {
                let chain = parse_chain(text).map_err(|e| {
                    RecordError::InvalidRecord(format!("{}: {e}", sample.sample_id))
                })?;
                records.push(ChainRecord::new(
                    sample.sample_id.clone(),
                    chain,
                    *tokens,
                    ChainSource::ExternalModel,
                    0,
                )?);
            }
        }
    }
    Ok((records, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptedBackend, ToyBackend, ToyModel, Vocab};
    use crate::chain::Section;
    use crate::corpus::{make_split, tests::toy_corpus};

    fn chain_text(conclusion: &str) -> String {
        format!(
            "<SUMMARY>plan</SUMMARY><CAPTION>a photo</CAPTION><REASONING>it looks so</REASONING>\
             <REFLECTION>checked</REFLECTION><CONCLUSION>{conclusion}</CONCLUSION>"
        )
    }

    fn no_reflection() -> String {
        "<SUMMARY>plan</SUMMARY><CAPTION>a photo</CAPTION><REASONING>r</REASONING>\
         <CONCLUSION>cat</CONCLUSION>"
            .to_string()
    }

    fn options() -> Vec<String> {
        vec!["cat".into(), "dog".into()]
    }

    #[test]
    fn first_valid_rule() {
        let (v, reasons) =
            reject_sample(&[no_reflection(), chain_text("dog")], &options()).unwrap();
        assert!(matches!(v, Verdict::Retained { index: 1, .. }));
        assert_eq!(
            reasons[0],
            Some(FailureReason::MissingSection(Section::Reflection))
        );
        assert_eq!(reasons[1], None);

        let (v, _) = reject_sample(&[chain_text("cat"), chain_text("dog")], &options()).unwrap();
        match v {
            Verdict::Retained { index, chain } => {
                assert_eq!(index, 0);
                assert_eq!(chain.conclusion(), "cat");
            }
            other => panic!("{other:?}"),
        }

        let (v, reasons) =
            reject_sample(&[chain_text("animal"), chain_text("bird")], &options()).unwrap();
        assert_eq!(
            v,
            Verdict::Rejected {
                reason: FailureReason::NoMatchingOption
            }
        );
        assert!(reasons
            .iter()
            .all(|r| r.as_ref().unwrap().to_string() == "no matching option"));
        assert!(matches!(
            reject_sample(&[], &options()),
            Err(GenError::NoCandidates)
        ));
    }

    #[test]
    fn first_valid_rule_exhaustive() {
        // every validity pattern over k = 4 candidates
        for mask in 0u32..16 {
            let cands: Vec<String> = (0..4)
                .map(|i| {
                    if mask >> i & 1 == 1 {
                        chain_text("cat")
                    } else {
                        no_reflection()
                    }
                })
                .collect();
            let (v, _) = reject_sample(&cands, &options()).unwrap();
            match (v, mask.trailing_zeros()) {
                (Verdict::Retained { index, .. }, tz) => assert_eq!(index as u32, tz),
                (Verdict::Rejected { .. }, tz) => assert_eq!(tz, 32),
            }
        }
    }

    #[test]
    fn label_is_withheld_from_requests() {
        let corpus = toy_corpus(&["a", "b"], &["bobcat", "lynx"], 1);
        let b = ScriptedBackend::new()
            .with_responder(|r| Ok(vec![chain_text("lynx"); r.num_candidates]));
        let sample = corpus
            .samples()
            .iter()
            .find(|s| s.label == "bobcat")
            .unwrap();
        let prompts = build_prompts(sample, &corpus, &PromptTemplates::default()).unwrap();
        let out = generate_chain_candidates(&b, sample, &prompts, 2, 0.7, 64, 1).unwrap();
        assert_eq!(out.len(), 2);
        let req = &b.requests()[0];
        let body = serde_json::to_string(req).unwrap();
        assert!(!req.prompt.contains("bobcat") && !req.prompt.contains("lynx"));
        assert!(!body.contains("bobcat") || req.image_ref.contains("bobcat"));
    }

    #[test]
    fn toy_greedy_single_candidate_is_reproducible() {
        let corpus = toy_corpus(&["a", "b"], &["cat"], 1);
        let toy = ToyBackend::new(ToyModel::new(Vocab::new(["x", "y"]), 1));
        let sample = &corpus.samples()[0];
        let sample = Sample {
            image_ref: "tokens:x".into(),
            ..sample.clone()
        };
        let prompts = build_prompts(&sample, &corpus, &PromptTemplates::default()).unwrap();
        let a = generate_chain_candidates(&toy, &sample, &prompts, 1, 0.0, 8, 3).unwrap();
        let b = generate_chain_candidates(&toy, &sample, &prompts, 1, 0.0, 8, 9).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
    }

    fn scripted_for(corpus: &Corpus, bad: &[&str]) -> ScriptedBackend {
        let mut b = ScriptedBackend::new();
        for s in corpus.samples() {
            let cands = if bad.contains(&s.sample_id.as_str()) {
                vec![no_reflection(), chain_text("wolf")]
            } else {
                vec![no_reflection(), chain_text(&s.label)]
            };
            b = b.with_script(s.image_ref.clone(), cands);
        }
        b
    }

    #[test]
    fn all_valid_corpus() {
        let corpus = toy_corpus(&["a", "b", "t"], &["cat", "dog"], 1);
        let split = make_split(&corpus, "t").unwrap();
        let b = scripted_for(&corpus, &[]);
        let (records, stats) =
            build_reasoning_dataset(&corpus, &split, &b, &GenConfig::default(), None).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(stats.retained, 4);
        assert!(records
            .iter()
            .all(|r| r.round == 0 && r.source == ChainSource::ExternalModel));
        assert!(records
            .iter()
            .all(|r| !split.eval_ids.contains(&r.sample_id)));
    }

    #[test]
    fn one_failed_sample() {
        let corpus = toy_corpus(&["a", "b", "t"], &["cat", "dog"], 1);
        let split = make_split(&corpus, "t").unwrap();
        let bad = corpus.samples()[1].sample_id.clone();
        let b = scripted_for(&corpus, &[&bad]);
        let (records, stats) =
            build_reasoning_dataset(&corpus, &split, &b, &GenConfig::default(), None).unwrap();
        assert_eq!(stats.attempted, 4);
        assert_eq!(stats.retained, 3);
        assert_eq!(records.len(), 3);
        // the last candidate tried names an off-list class
        assert_eq!(
            stats.per_failure_reason,
            BTreeMap::from([("no matching option".to_string(), 1)])
        );
        let failed_sum: usize = stats.per_failure_reason.values().sum();
        assert_eq!(failed_sum, stats.attempted - stats.retained);
        let per_domain_attempted: usize = stats.per_domain.values().map(|d| d.attempted).sum();
        assert_eq!(per_domain_attempted, 4);
    }

    #[test]
    fn retain_all_and_retry_sweeps() {
        let corpus = toy_corpus(&["a", "t"], &["cat", "dog"], 1);
        let split = make_split(&corpus, "t").unwrap();
        let b = ScriptedBackend::new().with_responder(|r| {
            Ok(vec![chain_text("cat"), chain_text("dog"), no_reflection()]
                .into_iter()
                .cycle()
                .take(r.num_candidates)
                .collect())
        });
        let cfg = GenConfig {
            candidates: 3,
            retain_all: true,
            ..GenConfig::default()
        };
        let (records, stats) = build_reasoning_dataset(&corpus, &split, &b, &cfg, None).unwrap();
        assert_eq!(stats.retained, 2);
        assert_eq!(records.len(), 4);

        let failing =
            ScriptedBackend::new().with_responder(|r| Ok(vec![no_reflection(); r.num_candidates]));
        let cfg = GenConfig {
            retry_sweeps: 1,
            ..GenConfig::default()
        };
        let (_, stats) = build_reasoning_dataset(&corpus, &split, &failing, &cfg, None).unwrap();
        assert_eq!(stats.retained, 0);
        assert_eq!(failing.requests().len(), 4);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let corpus = toy_corpus(&["a", "b", "t"], &["cat", "dog"], 1);
        let split = make_split(&corpus, "t").unwrap();
        let bad = corpus.samples()[0].sample_id.clone();
        let cfg = GenConfig::default();

        let full =
            build_reasoning_dataset(&corpus, &split, &scripted_for(&corpus, &[&bad]), &cfg, None)
                .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let progress = dir.path().join("progress.jsonl");
        build_reasoning_dataset(
            &corpus,
            &split,
            &scripted_for(&corpus, &[&bad]),
            &cfg,
            Some(&progress),
        )
        .unwrap();
        // keep the first two finished samples plus a torn line
        let text = fs::read_to_string(&progress).unwrap();
        let mut kept: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        kept.push_str("{\"config_hash\":");
        fs::write(&progress, kept).unwrap();

        let b = scripted_for(&corpus, &[&bad]);
        let resumed = build_reasoning_dataset(&corpus, &split, &b, &cfg, Some(&progress)).unwrap();
        assert_eq!(b.requests().len(), 2);
        assert_eq!(resumed.0, full.0);
        assert_eq!(resumed.1, full.1);

        // a different configuration ignores earlier progress
        let other = GenConfig { seed: 5, ..cfg };
        let b = scripted_for(&corpus, &[&bad]);
        build_reasoning_dataset(&corpus, &split, &b, &other, Some(&progress)).unwrap();
        assert_eq!(b.requests().len(), 4);
    }

    #[test]
    fn backend_error_propagates() {
        let corpus = toy_corpus(&["a", "t"], &["cat"], 1);
        let split = make_split(&corpus, "t").unwrap();
        let err = build_reasoning_dataset(
            &corpus,
            &split,
            &ScriptedBackend::new(),
            &GenConfig::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            GenError::Backend {
                source: BackendError::Unscripted(_),
                ..
            }
        ));
    }
}
