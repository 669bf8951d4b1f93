//! A small synthetic multi-domain classification task for the toy backend,
//! plus a scripted teacher that writes five-section chains for it.
//!
//! Each "image" is a bag of feature tokens `f<class><variant>` and style
//! tokens `s<domain><variant>`. Features name the true class with
//! probability `feature_fidelity`; within a domain one feature variant is
//! preferred, so a held-out domain mostly shows variants that are rare in the
//! source domains.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, BackendDescriptor, BackendError, BackendKind, Capability, GenerationRequest,
    ImageStore,
};
use crate::corpus::{Corpus, CorpusError, PromptTemplates, Sample};
use crate::seed::derive_seed;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub domains: Vec<String>,
    pub labels: Vec<String>,
    pub per_cell: usize,
    pub feature_variants: usize,
    pub features_per_image: usize,
    pub style_variants: usize,
    pub styles_per_image: usize,
    /// Probability that a feature token belongs to the true class.
    pub feature_fidelity: f64,
    /// Probability that a feature uses its domain's preferred variant.
    pub domain_affinity: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            domains: ["art", "cartoon", "photo", "sketch"]
                .map(String::from)
                .to_vec(),
            labels: ["bird", "fox", "frog", "owl"].map(String::from).to_vec(),
            per_cell: 25,
            feature_variants: 4,
            features_per_image: 4,
            style_variants: 3,
            styles_per_image: 2,
            feature_fidelity: 0.75,
            domain_affinity: 0.6,
            seed: 0,
        }
    }
}

pub const CLS_TEMPLATE: &str = "task_cls {options}";
pub const REASON_TEMPLATE: &str = "task_reason";

pub fn synth_templates() -> PromptTemplates {
    PromptTemplates {
        classification: CLS_TEMPLATE.to_string(),
        reasoning: REASON_TEMPLATE.to_string(),
    }
}

/// Training settings tuned for the default task on the toy backend.
pub fn synth_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 8,
        learning_rate: 0.5,
        round_epochs: 2,
        ..TrainConfig::default()
    }
}

fn feature(class: usize, variant: usize) -> String {
    format!("f{class}{variant}")
}

fn style(domain: usize, variant: usize) -> String {
    format!("s{domain}{variant}")
}

/// Class index named by a feature token.
fn feature_class(token: &str) -> Option<usize> {
    let rest = token.strip_prefix('f')?;
    if rest.len() != 2 || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(usize::from(rest.as_bytes()[0] - b'0'))
}

impl SynthConfig {
    fn check(&self) -> Result<(), CorpusError> {
        if self.labels.is_empty() || self.domains.is_empty() || self.per_cell == 0 {
            return Err(CorpusError::InvalidTask(
                "needs domains, labels and samples".into(),
            ));
        }
        if self.feature_variants == 0 || self.style_variants == 0 {
            return Err(CorpusError::InvalidTask(
                "variant counts must be >= 1".into(),
            ));
        }
        if self.labels.len() > 10
            || self.domains.len() > 10
            || self.feature_variants > 10
            || self.style_variants > 10
        {
            return Err(CorpusError::InvalidTask(
                "at most 10 domains, classes and variants".into(),
            ));
        }
        Ok(())
    }

    fn image_tokens(&self, d: usize, c: usize, i: usize) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[&"image", &d, &c, &i]));
        let n_classes = self.labels.len();
        let mut tokens = Vec::new();
        for _ in 0..self.features_per_image {
            let class = if n_classes < 2 || rng.random::<f64>() < self.feature_fidelity {
                c
            } else {
                let other = rng.random_range(0..n_classes - 1);
                if other >= c {
                    other + 1
                } else {
                    other
                }
            };
            let variant = if rng.random::<f64>() < self.domain_affinity {
                d % self.feature_variants
            } else {
                rng.random_range(0..self.feature_variants)
            };
            tokens.push(feature(class, variant));
        }
        for _ in 0..self.styles_per_image {
            tokens.push(style(d, rng.random_range(0..self.style_variants)));
        }
        tokens
    }

    /// All tokens the task can produce, teacher chains included.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for c in 0..self.labels.len() {
            for j in 0..self.feature_variants {
                v.push(feature(c, j));
            }
        }
        for d in 0..self.domains.len() {
            for j in 0..self.style_variants {
                v.push(style(d, j));
            }
        }
        v.extend(self.labels.iter().cloned());
        v.extend(["task_cls", "task_reason"].map(String::from));
        v.extend(crate::chain::Section::all_tags().map(String::from));
        v.extend(TEACHER_WORDS.map(String::from));
        v
    }

    /// In-memory corpus with inline `tokens:` image references.
    pub fn corpus(&self) -> Result<Corpus, CorpusError> {
        self.check()?;
        let mut samples = Vec::new();
        for (d, domain) in self.domains.iter().enumerate() {
            for (c, label) in self.labels.iter().enumerate() {
                for i in 0..self.per_cell {
                    samples.push(Sample {
                        sample_id: format!("{domain}/{label}/{i:03}.tok"),
                        image_ref: format!(
                            "{}{}",
                            ImageStore::INLINE_PREFIX,
                            self.image_tokens(d, c, i).join(" ")
                        ),
                        label: label.clone(),
                        domain: domain.clone(),
                        class_index: c,
                    });
                }
            }
        }
        Corpus::from_samples(samples)
    }

    /// Writes the task as a `root/<domain>/<class>/<nnn>.tok` tree.
    pub fn write_dataset(&self, root: &Path) -> Result<usize, CorpusError> {
        self.check()?;
        let mut n = 0;
        for (d, domain) in self.domains.iter().enumerate() {
            for (c, label) in self.labels.iter().enumerate() {
                let dir = root.join(domain).join(label);
                fs::create_dir_all(&dir).map_err(|source| CorpusError::Io {
                    path: dir.clone(),
                    source,
                })?;
                for i in 0..self.per_cell {
                    let path = dir.join(format!("{i:03}.tok"));
                    fs::write(&path, self.image_tokens(d, c, i).join(" ") + "\n")
                        .map_err(|source| CorpusError::Io { path, source })?;
                    n += 1;
                }
            }
        }
        Ok(n)
    }
}

const TEACHER_WORDS: [&str; 4] = ["observe", "shows", "compare", "verify"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// Probability that the teacher names a wrong class.
    pub label_noise: f64,
    /// Probability that a candidate is malformed or concludes off-list.
    pub invalid_rate: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            label_noise: 0.1,
            invalid_rate: 0.25,
        }
    }
}

/// Scripted stand-in for a hosted teacher model. It sees only the image
/// tokens, guesses the class by majority feature vote and writes a chain.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    labels: Vec<String>,
    config: TeacherConfig,
}

impl SyntheticTeacher {
    pub fn new(labels: Vec<String>, config: TeacherConfig) -> Self {
        Self { labels, config }
    }

    fn candidate(&self, image: &[String], rng: &mut ChaCha8Rng) -> String {
        let n = self.labels.len();
        let mut votes = vec![0usize; n];
        for t in image {
            if let Some(c) = feature_class(t).filter(|&c| c < n) {
                votes[c] += 1;
            }
        }
        let best = votes.iter().copied().max().unwrap_or(0);
        let tied: Vec<usize> = (0..n).filter(|&c| votes[c] == best).collect();
        let mut class = tied[rng.random_range(0..tied.len())];
        if n > 1 && rng.random::<f64>() < self.config.label_noise {
            class = (class + rng.random_range(1..n)) % n;
        }
        let cue = image
            .iter()
            .find(|t| feature_class(t) == Some(class))
            .or_else(|| image.first())
            .map(String::as_str)
            .unwrap_or("nothing");
        let label = &self.labels[class];
        let broken = rng.random::<f64>() < self.config.invalid_rate;
        let missing_reflection = broken && rng.random::<bool>();
        let conclusion = if broken && !missing_reflection {
            "animal"
        } else {
            label
        };
        let mut text = format!(
            "<SUMMARY> observe </SUMMARY>\n<CAPTION> shows {cue} </CAPTION>\n<REASONING> compare </REASONING>\n"
        );
        if !missing_reflection {
            text.push_str("<REFLECTION> verify </REFLECTION>\n");
        }
        text.push_str(&format!("<CONCLUSION> {conclusion} </CONCLUSION>"));
        text
    }
}

impl Backend for SyntheticTeacher {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Mock,
            endpoint: None,
            model_name: "synthetic-teacher".into(),
            capabilities: [Capability::Generate].into_iter().collect(),
        }
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        let image = ImageStore::tokens(&request.image_ref)?;
        Ok((0..request.num_candidates)
            .map(|i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(request.seed, &[&"teacher", &i]));
                self.candidate(&image, &mut rng)
            })
            .collect())
    }
}
