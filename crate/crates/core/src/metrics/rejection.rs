use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{round_decimal, MetricsError};
use crate::train::RejectionStats;

const PERCENT_DECIMALS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionRow {
    pub round: usize,
    /// Rejection percentage per domain, at two decimals.
    pub per_domain: BTreeMap<String, f64>,
    /// Unweighted mean of the per-domain percentages, at two decimals.
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionTable {
    pub domains: Vec<String>,
    pub rows: Vec<RejectionRow>,
}

impl RejectionTable {
    /// Builds a table from percentages already in table form, one row per
    /// round in `domains` order.
    pub fn from_percentages(
        domains: Vec<String>,
        rows: Vec<(usize, Vec<f64>)>,
    ) -> Result<Self, MetricsError> {
        if domains.is_empty() {
            return Err(MetricsError::EmptyTable);
        }
        let mut seen = domains.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != domains.len() {
            return Err(MetricsError::InvalidArgument(format!(
                "duplicate domain in {domains:?}"
            )));
        }
        let mut out = Vec::with_capacity(rows.len());
        for (round, values) in rows {
            if values.len() != domains.len() {
                return Err(MetricsError::DomainMismatch {
                    round,
                    expected: domains.clone(),
                    found: domains.iter().take(values.len()).cloned().collect(),
                });
            }
            if let Some(&bad) = values.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return Err(MetricsError::ValueOutOfRange(bad / 100.0));
            }
            let per_domain: BTreeMap<String, f64> = domains
                .iter()
                .cloned()
                .zip(values.iter().map(|v| round_decimal(*v, PERCENT_DECIMALS)))
                .collect();
            out.push(RejectionRow {
                round,
                average: average_of_displayed(per_domain.values().copied()),
                per_domain,
            });
        }
        Ok(Self { domains, rows: out })
    }

    /// Parses a whitespace table: a header `round <domain>...` then one row
    /// of percentages per round.
    pub fn parse(text: &str, origin: &str) -> Result<Self, MetricsError> {
        let parse_err = |line: usize, message: String| MetricsError::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(MetricsError::EmptyTable)?;
        let mut cols = header.split_whitespace();
        if cols.next() != Some("round") {
            return Err(parse_err(hline, "header must start with \"round\"".into()));
        }
        let domains: Vec<String> = cols.map(String::from).collect();
        let mut rows = Vec::new();
        for (n, line) in lines {
            let mut cells = line.split_whitespace();
            let round = cells
                .next()
                .and_then(|r| r.parse::<usize>().ok())
                .ok_or_else(|| parse_err(n, "bad round number".into()))?;
            let values: Vec<f64> = cells
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| parse_err(n, format!("bad percentage {c:?}")))
                })
                .collect::<Result<_, _>>()?;
            rows.push((round, values));
        }
        Self::from_percentages(domains, rows)
    }

    /// Aligned text table with an `avg` column.
    pub fn render_text(&self) -> String {
        let width = self
            .domains
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(6);
        let mut out = format!("{:<6}", "round");
        for d in &self.domains {
            out.push_str(&format!(" {d:>width$}"));
        }
        out.push_str(&format!(" {:>width$}\n", "avg"));
        for row in &self.rows {
            out.push_str(&format!("{:<6}", row.round));
            for d in &self.domains {
                out.push_str(&format!(" {:>width$.2}", row.per_domain[d]));
            }
            out.push_str(&format!(" {:>width$.2}\n", row.average));
        }
        out
    }
}

/// Mean of two-decimal values, rounded to two decimals in exact hundredths.
fn average_of_displayed(values: impl Iterator<Item = f64>) -> f64 {
    let hundredths: Vec<i64> = values.map(|v| (v * 100.0).round() as i64).collect();
    if hundredths.is_empty() {
        return 0.0;
    }
    let n = hundredths.len() as i64;
    let sum: i64 = hundredths.iter().sum();
    // half away from zero; percentages are non-negative
    let rounded = (2 * sum + n).div_euclid(2 * n);
    rounded as f64 / 100.0
}

/// Per-round, per-domain rejection percentages with domain averages.
pub fn rejection_table(rounds: &[RejectionStats]) -> Result<RejectionTable, MetricsError> {
    let first = rounds.first().ok_or(MetricsError::EmptyTable)?;
    let domains: Vec<String> = first.per_domain.keys().cloned().collect();
    let mut rows = Vec::with_capacity(rounds.len());
    for stats in rounds {
        let found: Vec<String> = stats.per_domain.keys().cloned().collect();
        if found != domains {
            return Err(MetricsError::DomainMismatch {
                round: stats.round,
                expected: domains,
                found,
            });
        }
        let values = stats
            .per_domain
            .values()
            .map(|d| d.rejection_rate() * 100.0)
            .collect();
        rows.push((stats.round, values));
    }
    RejectionTable::from_percentages(domains, rows)
}
