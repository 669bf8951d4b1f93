//! Analysis machinery: linear-kernel MMD, token-probability histograms,
//! entropy-reduction rankings and rejection-rate tables.

mod entropy;
mod histogram;
mod mmd;
mod rejection;

use thiserror::Error;

pub use entropy::{
    entropy_occurrences, entropy_reduction_ranking, token_entropy, EntropyReport, TokenEntropy,
    DEFAULT_MIN_OCCURRENCES,
};
pub use histogram::{prob_histogram, ProbHistogram, DEFAULT_BINS, HIGH_THRESHOLD, LOW_THRESHOLD};
pub use mmd::{
    aggregate_mmd_table, mmd_linear, paired_reduction, EmbeddingSet, MmdReport, PairedMmd,
    TABLE_DECIMALS,
};
pub use rejection::{rejection_table, RejectionRow, RejectionTable};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding set {0:?} is empty")]
    EmptySet(String),
    #[error("non-finite component in embedding set {0:?}")]
    NonFinite(String),
    #[error("empty table")]
    EmptyTable,
    #[error("value {0} outside [0, 1]")]
    ValueOutOfRange(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("round {round} covers domains {found:?}, expected {expected:?}")]
    DomainMismatch {
        round: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Pairwise (cascade) summation; error grows with log n rather than n.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Rounds half away from zero at `decimals` places via a decimal string, so
/// values such as 16.295 (stored as 16.29499..) still round the way they read.
pub(crate) fn round_decimal(x: f64, decimals: usize) -> f64 {
    let s = format!("{:.*}", decimals + 6, x);
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.as_str()),
    };
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    let mut scaled: i128 = format!("{int}{}", &frac[..decimals]).parse().unwrap_or(0);
    let rest = &frac[decimals..];
    if rest >= "5" {
        scaled += 1;
    }
    let v = scaled as f64 / 10f64.powi(decimals as i32);
    if neg {
        -v
    } else {
        v
    }
}
