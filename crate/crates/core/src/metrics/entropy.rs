use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{pairwise_sum, MetricsError};
use crate::backend::TokenStat;

/// Tokens seen fewer times than this (before or after) are not ranked.
pub const DEFAULT_MIN_OCCURRENCES: usize = 5;

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// `−Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn token_entropy(distribution: &[f64]) -> Result<f64, MetricsError> {
    if distribution.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(&bad) = distribution.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(MetricsError::ValueOutOfRange(bad));
    }
    let total = pairwise_sum(distribution);
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(MetricsError::NotNormalized(total));
    }
    let terms: Vec<f64> = distribution
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .collect();
    Ok(pairwise_sum(&terms).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntropy {
    pub token: String,
    pub before: f64,
    pub after: f64,
    /// `before − after`.
    pub reduction: f64,
    /// Fewer of the before and after occurrence counts.
    pub occurrences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub per_token: BTreeMap<String, TokenEntropy>,
    /// Largest reductions first; ties by token.
    pub top_k: Vec<TokenEntropy>,
    pub min_occurrences: usize,
}

/// Groups per-position entropies by token.
pub fn entropy_occurrences(stats: &[TokenStat]) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in stats {
        out.entry(s.token.clone()).or_default().push(s.entropy);
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Mean entropy per token before and after fine-tuning, ranked by reduction.
/// Tokens missing from either side or seen fewer than `min_occurrences` times
/// are left out.
pub fn entropy_reduction_ranking(
    before: &BTreeMap<String, Vec<f64>>,
    after: &BTreeMap<String, Vec<f64>>,
    k: usize,
    min_occurrences: usize,
) -> EntropyReport {
    let mut per_token = BTreeMap::new();
    for (token, after_values) in after {
        let Some(before_values) = before.get(token) else {
            continue;
        };
        let occurrences = before_values.len().min(after_values.len());
        if occurrences == 0 || occurrences < min_occurrences {
            continue;
        }
        let (b, a) = (mean(before_values), mean(after_values));
        per_token.insert(
            token.clone(),
            TokenEntropy {
                token: token.clone(),
                before: b,
                after: a,
                reduction: b - a,
                occurrences,
            },
        );
    }
    let mut ranked: Vec<TokenEntropy> = per_token.values().cloned().collect();
    ranked.sort_by(|x, y| {
        y.reduction
            .total_cmp(&x.reduction)
            .then_with(|| x.token.cmp(&y.token))
    });
    ranked.truncate(k);
    EntropyReport {
        per_token,
        top_k: ranked,
        min_occurrences,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occ(entries: &[(&str, &[f64])]) -> BTreeMap<String, Vec<f64>> {
        entries
            .iter()
            .map(|(t, v)| (t.to_string(), v.to_vec()))
            .collect()
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn closed_forms() {
        assert!((token_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-6);
        assert!((token_entropy(&[0.25; 4]).unwrap() - 1.3863).abs() < 1e-4);
        assert_eq!(token_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((token_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn entropy_errors() {
        assert!(matches!(
            token_entropy(&[0.5, 0.4]),
            Err(MetricsError::NotNormalized(_))
        ));
        assert!(matches!(
            token_entropy(&[1.5, -0.5]),
            Err(MetricsError::ValueOutOfRange(_))
        ));
        assert!(matches!(token_entropy(&[]), Err(MetricsError::EmptyInput)));
        assert!(token_entropy(&[0.5, 0.5 + 5e-7]).is_ok());
    }

    #[test]
    fn arithmetic_reduction() {
        let r = entropy_reduction_ranking(
            &occ(&[("bird", &[2.0; 5])]),
            &occ(&[("bird", &[0.5; 5])]),
            15,
            5,
        );
        assert_eq!(r.top_k.len(), 1);
        assert!((r.top_k[0].reduction - 1.5).abs() < 1e-12);
        assert_eq!(r.top_k[0].occurrences, 5);
    }

    #[test]
    fn absent_after_is_excluded() {
        let before = occ(&[("bird", &[2.0; 5]), ("fox", &[1.0; 5])]);
        let after = occ(&[("bird", &[0.5; 5])]);
        let r = entropy_reduction_ranking(&before, &after, 15, 5);
        assert!(!r.per_token.contains_key("fox"));
    }

    #[test]
    fn ties_break_by_token() {
        let before = occ(&[
            ("zeta", &[1.0; 5]),
            ("alpha", &[1.0; 5]),
            ("mid", &[3.0; 5]),
        ]);
        let after = occ(&[
            ("zeta", &[0.5; 5]),
            ("alpha", &[0.5; 5]),
            ("mid", &[0.0; 5]),
        ]);
        let r = entropy_reduction_ranking(&before, &after, 15, 5);
        let order: Vec<&str> = r.top_k.iter().map(|t| t.token.as_str()).collect();
        assert_eq!(order, ["mid", "alpha", "zeta"]);
        let r2 = entropy_reduction_ranking(&before, &after, 2, 5);
        assert_eq!(r2.top_k.len(), 2);
    }

    #[test]
    fn rare_tokens_filtered() {
        let before = occ(&[("rare", &[3.0; 4]), ("common", &[1.0; 6])]);
        let after = occ(&[("rare", &[0.0; 4]), ("common", &[0.9; 6])]);
        let r = entropy_reduction_ranking(&before, &after, 15, DEFAULT_MIN_OCCURRENCES);
        assert_eq!(r.top_k.len(), 1);
        assert_eq!(r.top_k[0].token, "common");
        assert_eq!(
            entropy_reduction_ranking(&before, &after, 15, 1).top_k[0].token,
            "rare"
        );
    }

    #[test]
    fn occurrences_group_by_token() {
        let stat = |t: &str, e: f64| TokenStat {
            token: t.into(),
            prob: 0.5,
            entropy: e,
        };
        let g = entropy_occurrences(&[stat("a", 1.0), stat("b", 2.0), stat("a", 3.0)]);
        assert_eq!(g["a"], vec![1.0, 3.0]);
        assert_eq!(g["b"], vec![2.0]);
    }
}
