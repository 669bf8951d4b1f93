//! Five-section reasoning chain grammar.
//!
//! A chain is written as five tagged blocks in a fixed order:
//!
//! ```text
//! <SUMMARY>...</SUMMARY>
//! <CAPTION>...</CAPTION>
//! <REASONING>...</REASONING>
//! <REFLECTION>...</REFLECTION>
//! <CONCLUSION>...</CONCLUSION>
//! ```
//!
//! Tags are matched case-sensitively. Text outside the blocks is tolerated by
//! the parser (models like to add a preamble), but each tag must appear exactly
//! once and in canonical order.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the five chain sections, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Section {
    Summary,
    Caption,
    Reasoning,
    Reflection,
    Conclusion,
}

impl Section {
    pub const ALL: [Section; 5] = [
        Section::Summary,
        Section::Caption,
        Section::Reasoning,
        Section::Reflection,
        Section::Conclusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Section::Summary => "SUMMARY",
            Section::Caption => "CAPTION",
            Section::Reasoning => "REASONING",
            Section::Reflection => "REFLECTION",
            Section::Conclusion => "CONCLUSION",
        }
    }

    pub fn open_tag(self) -> &'static str {
        match self {
            Section::Summary => "<SUMMARY>",
            Section::Caption => "<CAPTION>",
            Section::Reasoning => "<REASONING>",
            Section::Reflection => "<REFLECTION>",
            Section::Conclusion => "<CONCLUSION>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            Section::Summary => "</SUMMARY>",
            Section::Caption => "</CAPTION>",
            Section::Reasoning => "</REASONING>",
            Section::Reflection => "</REFLECTION>",
            Section::Conclusion => "</CONCLUSION>",
        }
    }

    /// All ten canonical tags, opens and closes interleaved in section order.
    pub fn all_tags() -> impl Iterator<Item = &'static str> {
        Section::ALL
            .into_iter()
            .flat_map(|s| [s.open_tag(), s.close_tag()])
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ChainError {
    #[error("missing section {0}")]
    MissingSection(Section),
    #[error("duplicate section {0}")]
    DuplicateSection(Section),
    #[error("sections out of order")]
    OutOfOrderSections,
    #[error("empty section {0}")]
    EmptySection(Section),
    #[error("malformed tag {0:?}")]
    MalformedTag(String),
    #[error("section {0} body contains a section tag")]
    TagInBody(Section),
    #[error("no <CONCLUSION> block")]
    NoConclusionTag,
}

/// A parsed reasoning chain. Bodies are stored verbatim (untrimmed) so that
/// rendering and re-parsing is byte-identical.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReasoningChain {
    summary: String,
    caption: String,
    reasoning: String,
    reflection: String,
    conclusion: String,
}

impl ReasoningChain {
    pub fn new(
        summary: impl Into<String>,
        caption: impl Into<String>,
        reasoning: impl Into<String>,
        reflection: impl Into<String>,
        conclusion: impl Into<String>,
    ) -> Result<Self, ChainError> {
        let chain = Self {
            summary: summary.into(),
            caption: caption.into(),
            reasoning: reasoning.into(),
            reflection: reflection.into(),
            conclusion: conclusion.into(),
        };
        for section in Section::ALL {
            let body = chain.body(section);
            if body.trim().is_empty() {
                return Err(ChainError::EmptySection(section));
            }
            if Section::all_tags().any(|tag| body.contains(tag)) {
                return Err(ChainError::TagInBody(section));
            }
        }
        Ok(chain)
    }

    pub fn body(&self, section: Section) -> &str {
        match section {
            Section::Summary => &self.summary,
            Section::Caption => &self.caption,
            Section::Reasoning => &self.reasoning,
            Section::Reflection => &self.reflection,
            Section::Conclusion => &self.conclusion,
        }
    }

    pub fn summary(&self) -> &str {
        &self.summary
    }

    pub fn caption(&self) -> &str {
        &self.caption
    }

    pub fn reasoning(&self) -> &str {
        &self.reasoning
    }

    pub fn reflection(&self) -> &str {
        &self.reflection
    }

    pub fn conclusion(&self) -> &str {
        &self.conclusion
    }
}

/// Canonical text: one block per section, a single newline between blocks.
pub fn render_chain(chain: &ReasoningChain) -> String {
    let mut out = String::new();
    for (i, section) in Section::ALL.into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(section.open_tag());
        out.push_str(chain.body(section));
        out.push_str(section.close_tag());
    }
    out
}

impl fmt::Display for ReasoningChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_chain(self))
    }
}

/// Finds tag-like fragments (`<summary>`, `< /CAPTION >`, ...) that name a
/// section but are not spelled exactly as a canonical tag.
fn find_malformed_tag(text: &str) -> Option<String> {
    let mut start = 0;
    while let Some(off) = text[start..].find('<') {
        let lt = start + off;
        start = lt + 1;
        let Some(gt_off) = text[lt..].find('>') else {
            break;
        };
        let candidate = &text[lt..=lt + gt_off];
        // Only consider short fragments; long spans are ordinary prose.
        if candidate.len() > 24 || candidate[1..].contains('<') {
            continue;
        }
        let inner = candidate[1..candidate.len() - 1].trim();
        let inner = inner.strip_prefix('/').unwrap_or(inner).trim();
        let names_section = Section::ALL
            .iter()
            .any(|s| s.name().eq_ignore_ascii_case(inner));
        if names_section && !Section::all_tags().any(|tag| tag == candidate) {
            return Some(candidate.to_string());
        }
    }
    None
}

fn occurrences(text: &str, pat: &str) -> Vec<usize> {
    text.match_indices(pat).map(|(i, _)| i).collect()
}

/// Sections whose open or close tag does not occur at all.
pub fn missing_sections(text: &str) -> Vec<Section> {
    Section::ALL
        .into_iter()
        .filter(|s| !text.contains(s.open_tag()) || !text.contains(s.close_tag()))
        .collect()
}

pub fn parse_chain(text: &str) -> Result<ReasoningChain, ChainError> {
    if let Some(tag) = find_malformed_tag(text) {
        return Err(ChainError::MalformedTag(tag));
    }

    let mut spans = Vec::with_capacity(5);
    for section in Section::ALL {
        let opens = occurrences(text, section.open_tag());
        let closes = occurrences(text, section.close_tag());
        if opens.len() > 1 || closes.len() > 1 {
            return Err(ChainError::DuplicateSection(section));
        }
        match (opens.first(), closes.first()) {
            (Some(&open), Some(&close)) => spans.push((section, open, close)),
            _ => return Err(ChainError::MissingSection(section)),
        }
    }

    let mut cursor = 0usize;
    for &(section, open, close) in &spans {
        if open < cursor || close < open + section.open_tag().len() {
            return Err(ChainError::OutOfOrderSections);
        }
        cursor = close + section.close_tag().len();
    }

    let mut bodies = spans.iter().map(|&(section, open, close)| {
        let body = &text[open + section.open_tag().len()..close];
        if body.trim().is_empty() {
            Err(ChainError::EmptySection(section))
        } else {
            Ok(body.to_string())
        }
    });
    let mut next = || bodies.next().expect("five spans");
    let summary = next()?;
    let caption = next()?;
    let reasoning = next()?;
    let reflection = next()?;
    let conclusion = next()?;
    Ok(ReasoningChain {
        summary,
        caption,
        reasoning,
        reflection,
        conclusion,
    })
}

/// Trimmed body of the first `<CONCLUSION>` block. Works on raw text, so it
/// still answers when the full chain does not parse.
pub fn extract_conclusion(text: &str) -> Result<String, ChainError> {
    let open = Section::Conclusion.open_tag();
    let close = Section::Conclusion.close_tag();
    let start = text.find(open).ok_or(ChainError::NoConclusionTag)? + open.len();
    let len = text[start..]
        .find(close)
        .ok_or(ChainError::NoConclusionTag)?;
    Ok(text[start..start + len].trim().to_string())
}

/// Lowercases, collapses whitespace runs and strips leading/trailing
/// punctuation.
pub fn normalize_label(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn contains_whole_phrase(haystack: &str, phrase: &str) -> bool {
    if phrase.is_empty() {
        return false;
    }
    haystack.match_indices(phrase).any(|(i, m)| {
        let before_ok = haystack[..i]
            .chars()
            .next_back()
            .is_none_or(|c| !is_word_char(c));
        let after_ok = haystack[i + m.len()..]
            .chars()
            .next()
            .is_none_or(|c| !is_word_char(c));
        before_ok && after_ok
    })
}

/// True iff the normalized conclusion equals the normalized label or contains
/// it as a word-boundary-delimited phrase.
pub fn match_label(conclusion: &str, label: &str) -> bool {
    let conclusion = normalize_label(conclusion);
    let label = normalize_label(label);
    if label.is_empty() {
        return false;
    }
    conclusion == label || contains_whole_phrase(&conclusion, &label)
}

/// Options matched by a conclusion, in option order.
pub fn matching_options<'a>(conclusion: &str, options: &'a [String]) -> Vec<&'a str> {
    options
        .iter()
        .filter(|opt| match_label(conclusion, opt))
        .map(String::as_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub is_valid: bool,
    pub missing_sections: Vec<Section>,
    /// Only computed for chains that parse; a structurally broken chain never
    /// has a coherent conclusion.
    pub conclusion_matches_option: bool,
    pub matched_option: Option<String>,
    /// First structural error reported by the parser, if any.
    pub parse_error: Option<ChainError>,
    /// Number of options the conclusion named (0 when it did not parse).
    pub options_matched: usize,
}

impl ValidationReport {
    /// The first reason this chain was rejected, if it was.
    pub fn failure_reason(&self) -> Option<FailureReason> {
        if self.is_valid {
            return None;
        }
        if let Some(section) = self.missing_sections.first() {
            return Some(FailureReason::MissingSection(*section));
        }
        if let Some(err) = &self.parse_error {
            return Some(FailureReason::Structure(err.clone()));
        }
        if self.options_matched == 0 {
            Some(FailureReason::NoMatchingOption)
        } else {
            Some(FailureReason::AmbiguousConclusion)
        }
    }
}

/// Why a candidate chain was not retained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureReason {
    MissingSection(Section),
    Structure(ChainError),
    NoMatchingOption,
    AmbiguousConclusion,
    NoConclusionTag,
    LabelMismatch,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::MissingSection(s) => write!(f, "missing section {s}"),
            FailureReason::Structure(err) => match err {
                ChainError::DuplicateSection(s) => write!(f, "duplicate section {s}"),
                ChainError::EmptySection(s) => write!(f, "empty section {s}"),
                ChainError::OutOfOrderSections => f.write_str("sections out of order"),
                ChainError::MalformedTag(_) => f.write_str("malformed tag"),
                other => write!(f, "{other}"),
            },
            FailureReason::NoMatchingOption => f.write_str("no matching option"),
            FailureReason::AmbiguousConclusion => f.write_str("ambiguous conclusion"),
            FailureReason::NoConclusionTag => f.write_str("no conclusion tag"),
            FailureReason::LabelMismatch => f.write_str("label mismatch"),
        }
    }
}

/// Structural check plus the "coherent conclusion" rule: the conclusion must
/// name exactly one of `options`. Correctness against the ground truth is not
/// checked here.
pub fn validate_chain(text: &str, options: &[String]) -> ValidationReport {
    let missing = missing_sections(text);
    let parsed = parse_chain(text);
    let (matched, count, parse_error) = match &parsed {
        Ok(chain) => {
            let hits = matching_options(chain.conclusion(), options);
            let matched = (hits.len() == 1).then(|| hits[0].to_string());
            (matched, hits.len(), None)
        }
        Err(err) => (None, 0, Some(err.clone())),
    };
    let matches = matched.is_some();
    ValidationReport {
        is_valid: missing.is_empty() && matches,
        missing_sections: missing,
        conclusion_matches_option: matches,
        matched_option: matched,
        parse_error,
        options_matched: count,
    }
}
