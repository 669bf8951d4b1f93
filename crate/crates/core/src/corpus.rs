//! DomainBed-style corpora, leave-one-domain-out splits and prompt binding.
//!
//! On disk a corpus is `root/<domain>/<class>/<file>`. Image bytes are never
//! read here; `image_ref` is handed to backends as an opaque path.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{match_label, normalize_label};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{0} is not a dataset root (expected <domain>/<class>/<file>)")]
    NotADataset(PathBuf),
    #[error("domain {0} has no samples")]
    EmptyDomain(String),
    #[error("duplicate sample id {0}")]
    DuplicateSampleId(String),
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("corpus has a single domain; leave-one-domain-out needs at least two")]
    SingleDomainCorpus,
    #[error("prompt template is missing the {0} placeholder")]
    TemplateMissingPlaceholder(&'static str),
    #[error("reasoning template must not carry the option list")]
    OptionsInReasoningTemplate,
    #[error("reasoning prompt would reveal the label {0:?}")]
    LabelLeak(String),
    #[error("sample {0} has a label outside the corpus label set")]
    UnknownLabel(String),
    #[error("invalid synthetic task: {0}")]
    InvalidTask(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub image_ref: String,
    pub label: String,
    pub domain: String,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Corpus {
    samples: Vec<Sample>,
    domains: Vec<String>,
    labels: Vec<String>,
    per_domain_counts: BTreeMap<String, usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus from in-memory samples. Domains and labels are sorted;
    /// `class_index` is reassigned from the sorted label list.
    pub fn from_samples(mut samples: Vec<Sample>) -> Result<Self, CorpusError> {
        let labels: Vec<String> = samples
            .iter()
            .map(|s| s.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut per_domain_counts = BTreeMap::new();
        let mut index = HashMap::with_capacity(samples.len());
        for (i, sample) in samples.iter_mut().enumerate() {
            sample.class_index = labels
                .binary_search(&sample.label)
                .expect("label collected");
            *per_domain_counts.entry(sample.domain.clone()).or_insert(0) += 1;
            if index.insert(sample.sample_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateSampleId(sample.sample_id.clone()));
            }
        }
        let domains = per_domain_counts.keys().cloned().collect();
        Ok(Self {
            samples,
            domains,
            labels,
            per_domain_counts,
            index,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn per_domain_counts(&self) -> &BTreeMap<String, usize> {
        &self.per_domain_counts
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    /// Samples whose id is in `ids`, in corpus order.
    pub fn select<'a>(
        &'a self,
        ids: &'a BTreeSet<String>,
    ) -> impl Iterator<Item = &'a Sample> + 'a {
        self.samples
            .iter()
            .filter(move |s| ids.contains(&s.sample_id))
    }

    pub fn summary(&self) -> String {
        format!(
            "{} domains, {} classes, {} samples",
            self.domains.len(),
            self.labels.len(),
            self.samples.len()
        )
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut entries = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>, _>>()?;
    entries.retain(|p| {
        p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| !n.starts_with('.'))
    });
    entries.sort();
    Ok(entries)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Scans `root/<domain>/<class>/<file>`. Hidden entries are skipped; loose
/// files at the domain level are ignored.
pub fn scan_dataset(root: &Path) -> Result<Corpus, CorpusError> {
    if !root.is_dir() {
        return Err(CorpusError::NotADataset(root.to_path_buf()));
    }
    let domain_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if domain_dirs.is_empty() {
        return Err(CorpusError::NotADataset(root.to_path_buf()));
    }

    let mut samples = Vec::new();
    for domain_dir in &domain_dirs {
        let domain = file_name(domain_dir);
        let class_dirs: Vec<PathBuf> = sorted_entries(domain_dir)?
            .into_iter()
            .filter(|p| p.is_dir())
            .collect();
        let before = samples.len();
        for class_dir in &class_dirs {
            let label = file_name(class_dir);
            for file in sorted_entries(class_dir)? {
                if !file.is_file() {
                    continue;
                }
                samples.push(Sample {
                    sample_id: format!("{domain}/{label}/{}", file_name(&file)),
                    image_ref: file.to_string_lossy().into_owned(),
                    label: label.clone(),
                    domain: domain.clone(),
                    class_index: 0,
                });
            }
        }
        if samples.len() == before {
            return Err(CorpusError::EmptyDomain(domain));
        }
    }
    Corpus::from_samples(samples)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub target_domain: String,
    pub source_domains: Vec<String>,
    pub train_ids: BTreeSet<String>,
    pub eval_ids: BTreeSet<String>,
}

impl SplitPlan {
    pub fn train_samples<'a>(
        &'a self,
        corpus: &'a Corpus,
    ) -> impl Iterator<Item = &'a Sample> + 'a {
        corpus.select(&self.train_ids)
    }

    pub fn eval_samples<'a>(&'a self, corpus: &'a Corpus) -> impl Iterator<Item = &'a Sample> + 'a {
        corpus.select(&self.eval_ids)
    }
}

/// Leave-one-domain-out: `target_domain` is held out for evaluation, every
/// other domain is a source.
pub fn make_split(corpus: &Corpus, target_domain: &str) -> Result<SplitPlan, CorpusError> {
    if !corpus.domains.iter().any(|d| d == target_domain) {
        return Err(CorpusError::UnknownDomain(target_domain.to_string()));
    }
    if corpus.domains.len() < 2 {
        return Err(CorpusError::SingleDomainCorpus);
    }
    let source_domains = corpus
        .domains
        .iter()
        .filter(|d| *d != target_domain)
        .cloned()
        .collect();
    let (eval, train): (Vec<&Sample>, Vec<&Sample>) = corpus
        .samples
        .iter()
        .partition(|s| s.domain == target_domain);
    Ok(SplitPlan {
        target_domain: target_domain.to_string(),
        source_domains,
        train_ids: train.into_iter().map(|s| s.sample_id.clone()).collect(),
        eval_ids: eval.into_iter().map(|s| s.sample_id.clone()).collect(),
    })
}

pub const OPTIONS_PLACEHOLDER: &str = "{options}";

pub const DEFAULT_CLASSIFICATION_TEMPLATE: &str =
    "What type of object is in this photo? Choose from the following options: {options}";

pub const DEFAULT_REASONING_TEMPLATE: &str = "\
Look carefully at the photo and work out what kind of object it shows. \
Think it through step by step and write your answer in exactly five tagged sections, in this order:
<SUMMARY> a short plan of how you will approach the question </SUMMARY>
<CAPTION> a description of the visual content that matters for the answer </CAPTION>
<REASONING> step-by-step reasoning from the visual evidence to a category </REASONING>
<REFLECTION> a check of the reasoning above; correct any mistake before answering </REFLECTION>
<CONCLUSION> the category name only </CONCLUSION>
Every section must be present and non-empty, and each tag must appear exactly once.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub classification: String,
    pub reasoning: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            classification: DEFAULT_CLASSIFICATION_TEMPLATE.to_string(),
            reasoning: DEFAULT_REASONING_TEMPLATE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub classification_prompt: String,
    pub reasoning_prompt: String,
    pub options: Vec<String>,
}

pub fn format_options(options: &[String]) -> String {
    options.join(", ")
}

/// Binds the classification and reasoning prompts for one sample. The option
/// list is the corpus label order; the reasoning prompt never carries options
/// or the sample's label.
pub fn build_prompts(
    sample: &Sample,
    corpus: &Corpus,
    templates: &PromptTemplates,
) -> Result<PromptPair, CorpusError> {
    if !templates.classification.contains(OPTIONS_PLACEHOLDER) {
        return Err(CorpusError::TemplateMissingPlaceholder(OPTIONS_PLACEHOLDER));
    }
    if templates.reasoning.contains(OPTIONS_PLACEHOLDER) {
        return Err(CorpusError::OptionsInReasoningTemplate);
    }
    if !corpus.labels.contains(&sample.label) {
        return Err(CorpusError::UnknownLabel(sample.sample_id.clone()));
    }
    let options = corpus.labels.clone();
    let classification_prompt = templates
        .classification
        .replace(OPTIONS_PLACEHOLDER, &format_options(&options));
    let reasoning_prompt = templates.reasoning.clone();
    if match_label(&reasoning_prompt, &sample.label) && !normalize_label(&sample.label).is_empty() {
        return Err(CorpusError::LabelLeak(sample.label.clone()));
    }
    Ok(PromptPair {
        classification_prompt,
        reasoning_prompt,
        options,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::fs;

    fn touch(root: &Path, rel: &str) {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, b"x").unwrap();
    }

    pub(crate) fn toy_corpus(domains: &[&str], labels: &[&str], per_cell: usize) -> Corpus {
        let mut samples = Vec::new();
        for d in domains {
            for l in labels {
                for i in 0..per_cell {
                    samples.push(Sample {
                        sample_id: format!("{d}/{l}/{i}"),
                        image_ref: format!("mem:{d}/{l}/{i}"),
                        label: l.to_string(),
                        domain: d.to_string(),
                        class_index: 0,
                    });
                }
            }
        }
        Corpus::from_samples(samples).unwrap()
    }

    #[test]
    fn scan_counts() {
        let dir = tempfile::tempdir().unwrap();
        for rel in [
            "d1/cat/a.jpg",
            "d1/dog/b.jpg",
            "d2/cat/c.jpg",
            "d2/dog/d.jpg",
        ] {
            touch(dir.path(), rel);
        }
        touch(dir.path(), "README.txt");
        touch(dir.path(), "d1/.hidden/x");
        let corpus = scan_dataset(dir.path()).unwrap();
        assert_eq!(corpus.len(), 4);
        assert_eq!(corpus.per_domain_counts()["d1"], 2);
        assert_eq!(corpus.per_domain_counts()["d2"], 2);
        assert_eq!(corpus.labels(), ["cat", "dog"]);
        assert_eq!(corpus.sample("d2/dog/d.jpg").unwrap().class_index, 1);
        assert_eq!(corpus.summary(), "2 domains, 2 classes, 4 samples");
        assert_eq!(corpus, scan_dataset(dir.path()).unwrap());
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            scan_dataset(&dir.path().join("nope")),
            Err(CorpusError::NotADataset(_))
        ));
        assert!(matches!(
            scan_dataset(dir.path()),
            Err(CorpusError::NotADataset(_))
        ));
        touch(dir.path(), "d1/cat/a.jpg");
        fs::create_dir_all(dir.path().join("d2")).unwrap();
        assert!(matches!(
            scan_dataset(dir.path()),
            Err(CorpusError::EmptyDomain(d)) if d == "d2"
        ));
    }

    #[test]
    fn terra_shaped_tree() {
        let dir = tempfile::tempdir().unwrap();
        let classes = [
            "bird", "bobcat", "cat", "coyote", "dog", "empty", "opossum", "rabbit", "raccoon",
            "squirrel",
        ];
        for d in ["L100", "L38", "L43", "L46"] {
            for c in classes {
                touch(dir.path(), &format!("{d}/{c}/0.jpg"));
            }
        }
        let corpus = scan_dataset(dir.path()).unwrap();
        assert_eq!(corpus.labels().len(), 10);
        assert_eq!(corpus.domains().len(), 4);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = Sample {
            sample_id: "a".into(),
            image_ref: "x".into(),
            label: "cat".into(),
            domain: "d".into(),
            class_index: 0,
        };
        assert!(matches!(
            Corpus::from_samples(vec![s.clone(), s]),
            Err(CorpusError::DuplicateSampleId(_))
        ));
    }

    #[test]
    fn split_sources_and_errors() {
        let corpus = toy_corpus(&["A", "C", "P", "R"], &["x"], 1);
        let plan = make_split(&corpus, "C").unwrap();
        assert_eq!(plan.source_domains, ["A", "P", "R"]);
        assert_eq!(plan.eval_ids.len(), 1);
        assert!(matches!(
            make_split(&corpus, "Z"),
            Err(CorpusError::UnknownDomain(_))
        ));
        let single = toy_corpus(&["A"], &["x"], 2);
        assert!(matches!(
            make_split(&single, "A"),
            Err(CorpusError::SingleDomainCorpus)
        ));
    }

    #[test]
    fn split_membership_brute_force() {
        let corpus = toy_corpus(&["d1", "d2", "d3", "d4"], &["a", "b"], 3);
        for target in corpus.domains() {
            let plan = make_split(&corpus, target).unwrap();
            for s in corpus.samples() {
                let in_eval = plan.eval_ids.contains(&s.sample_id);
                let in_train = plan.train_ids.contains(&s.sample_id);
                assert_eq!(in_eval, &s.domain == target);
                assert_eq!(in_train, &s.domain != target);
            }
        }
    }

    #[test]
    fn prompts_default_and_custom() {
        let corpus = toy_corpus(&["d1", "d2"], &["cat", "dog"], 1);
        let sample = &corpus.samples()[0];
        let pair = build_prompts(sample, &corpus, &PromptTemplates::default()).unwrap();
        assert!(pair.classification_prompt.starts_with(
            "What type of object is in this photo? Choose from the following options:"
        ));
        assert_eq!(pair.classification_prompt.matches("cat").count(), 1);
        assert_eq!(pair.classification_prompt.matches("dog").count(), 1);
        assert!(!match_label(&pair.reasoning_prompt, "cat"));
        assert!(pair.reasoning_prompt.contains("<REFLECTION>"));

        let bad = PromptTemplates {
            classification: "no placeholder".into(),
            reasoning: "r".into(),
        };
        assert!(matches!(
            build_prompts(sample, &corpus, &bad),
            Err(CorpusError::TemplateMissingPlaceholder(_))
        ));

        let single = toy_corpus(&["d1", "d2"], &["a"], 1);
        let custom = PromptTemplates {
            classification: "Q {options}".into(),
            reasoning: "think".into(),
        };
        let pair = build_prompts(&single.samples()[0], &single, &custom).unwrap();
        assert_eq!(pair.classification_prompt, "Q a");
    }

    #[test]
    fn reasoning_template_cannot_leak() {
        let corpus = toy_corpus(&["d1", "d2"], &["cat", "dog"], 1);
        let leaky = PromptTemplates {
            classification: "{options}".into(),
            reasoning: "is it a cat?".into(),
        };
        assert!(matches!(
            build_prompts(&corpus.samples()[0], &corpus, &leaky),
            Err(CorpusError::LabelLeak(_))
        ));
        let with_opts = PromptTemplates {
            classification: "{options}".into(),
            reasoning: "pick {options}".into(),
        };
        assert!(matches!(
            build_prompts(&corpus.samples()[0], &corpus, &with_opts),
            Err(CorpusError::OptionsInReasoningTemplate)
        ));
    }
}
