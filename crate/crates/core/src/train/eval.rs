use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{self, Backend, GenerationRequest};
use crate::chain::{extract_conclusion, match_label};
use crate::corpus::{build_prompts, Corpus, PromptTemplates, Sample, SplitPlan};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPathway {
    /// Greedy decode under the classification prompt, matched as a whole.
    Classification,
    /// Greedy chain decode under the reasoning prompt; only the conclusion
    /// block is matched.
    Reasoning,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub pathway: EvalPathway,
    pub per_domain: BTreeMap<String, DomainAccuracy>,
    /// Unweighted mean over target domains.
    pub average: f64,
}

fn is_correct(
    backend: &dyn Backend,
    corpus: &Corpus,
    sample: &Sample,
    templates: &PromptTemplates,
    pathway: EvalPathway,
    max_tokens: usize,
) -> Result<bool, TrainError> {
    let prompts = build_prompts(sample, corpus, templates)?;
    let prompt = match pathway {
        EvalPathway::Classification => prompts.classification_prompt,
        EvalPathway::Reasoning => prompts.reasoning_prompt,
    };
    let request = GenerationRequest {
        image_ref: sample.image_ref.clone(),
        prompt,
        num_candidates: 1,
        temperature: 0.0,
        max_tokens,
        seed: 0,
    };
    let text = backend::generate(backend, &request)?.remove(0);
    Ok(match pathway {
        EvalPathway::Classification => match_label(&text, &sample.label),
        EvalPathway::Reasoning => extract_conclusion(&text)
            .map(|c| match_label(&c, &sample.label))
            .unwrap_or(false),
    })
}

/// Held-out accuracy over the split's evaluation samples.
pub fn evaluate_accuracy(
    backend: &dyn Backend,
    corpus: &Corpus,
    split: &SplitPlan,
    templates: &PromptTemplates,
    pathway: EvalPathway,
    max_tokens: usize,
) -> Result<AccuracyReport, TrainError> {
    let samples: Vec<&Sample> = split.eval_samples(corpus).collect();
    if samples.is_empty() {
        return Err(TrainError::EmptyEvalSet);
    }
    let verdicts: Vec<bool> = samples
        .par_iter()
        .map(|s| is_correct(backend, corpus, s, templates, pathway, max_tokens))
        .collect::<Result<_, _>>()?;
    let mut per_domain: BTreeMap<String, DomainAccuracy> = BTreeMap::new();
    for (s, ok) in samples.iter().zip(verdicts) {
        let d = per_domain.entry(s.domain.clone()).or_default();
        d.total += 1;
        d.correct += usize::from(ok);
    }
    for d in per_domain.values_mut() {
        d.accuracy = d.correct as f64 / d.total as f64;
    }
    let average = per_domain.values().map(|d| d.accuracy).sum::<f64>() / per_domain.len() as f64;
    Ok(AccuracyReport {
        pathway,
        per_domain,
        average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptedBackend, ToyBackend};
    use crate::corpus::make_split;
    use crate::train::tests::{tiny_setup, tiny_templates};
    use crate::train::{run_mtct, TrainConfig};

    #[test]
    fn scripted_three_of_four() {
        let corpus = crate::corpus::tests::toy_corpus(&["s", "t"], &["cat", "dog"], 2);
        let split = make_split(&corpus, "t").unwrap();
        let eval: Vec<&Sample> = split.eval_samples(&corpus).collect();
        let mut b = ScriptedBackend::new();
        for (i, s) in eval.iter().enumerate() {
            let answer = if i == 0 {
                "bird".to_string()
            } else {
                format!("It is a {}.", s.label)
            };
            b = b.with_script(s.image_ref.clone(), [answer]);
        }
        let r = evaluate_accuracy(
            &b,
            &corpus,
            &split,
            &PromptTemplates::default(),
            EvalPathway::Classification,
            8,
        )
        .unwrap();
        assert!((r.average - 0.75).abs() < 1e-12);
        assert_eq!(r.per_domain["t"].correct, 3);
    }

    #[test]
    fn reasoning_pathway_reads_conclusion() {
        let corpus = crate::corpus::tests::toy_corpus(&["s", "t"], &["cat", "dog"], 1);
        let split = make_split(&corpus, "t").unwrap();
        let b = ScriptedBackend::new().with_responder(|r| {
            Ok(vec![if r.image_ref.contains("cat") {
                "<CAPTION>dog</CAPTION><CONCLUSION>cat</CONCLUSION>".to_string()
            } else {
                "dog".to_string()
            }])
        });
        let r = evaluate_accuracy(
            &b,
            &corpus,
            &split,
            &PromptTemplates::default(),
            EvalPathway::Reasoning,
            8,
        )
        .unwrap();
        assert_eq!(r.per_domain["t"].correct, 1);
    }

    #[test]
    fn empty_eval_set() {
        let corpus = crate::corpus::tests::toy_corpus(&["s", "t"], &["cat"], 1);
        let mut split = make_split(&corpus, "t").unwrap();
        split.eval_ids.clear();
        let err = evaluate_accuracy(
            &ScriptedBackend::new(),
            &corpus,
            &split,
            &PromptTemplates::default(),
            EvalPathway::Classification,
            4,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::EmptyEvalSet));
    }

    #[test]
    fn trained_toy_is_perfect_on_separable_task() {
        let (corpus, split, chains, backend) = tiny_setup();
        let mut backend = ToyBackend::new(backend.into_model());
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 0.5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        run_mtct(
            &mut backend,
            &corpus,
            &split,
            &chains,
            &tiny_templates(),
            &cfg,
            0,
        )
        .unwrap();
        for pathway in [EvalPathway::Classification, EvalPathway::Reasoning] {
            let r = evaluate_accuracy(&backend, &corpus, &split, &tiny_templates(), pathway, 32)
                .unwrap();
            assert_eq!(r.average, 1.0, "{pathway:?}");
        }
    }
}
