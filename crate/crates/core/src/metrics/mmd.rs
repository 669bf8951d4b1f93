use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{pairwise_sum, round_decimal, MetricsError};

/// Decimal places of published per-class divergence tables.
pub const TABLE_DECIMALS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    vectors: Vec<Vec<f64>>,
    tag: String,
}

impl EmbeddingSet {
    pub fn new(tag: impl Into<String>, vectors: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let tag = tag.into();
        let Some(first) = vectors.first() else {
            return Err(MetricsError::EmptySet(tag));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(MetricsError::InvalidArgument(format!(
                "set {tag:?} has zero-dimensional vectors"
            )));
        }
        for v in &vectors {
            if v.len() != dim {
                return Err(MetricsError::DimensionMismatch(dim, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(MetricsError::NonFinite(tag));
            }
        }
        Ok(Self { vectors, tag })
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Result<Self, MetricsError> {
        Self::new(
            self.tag.clone(),
            self.vectors
                .iter()
                .map(|v| v.iter().map(|x| x * c).collect())
                .collect(),
        )
    }

    fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim())
            .map(|j| {
                let column: Vec<f64> = self.vectors.iter().map(|v| v[j]).collect();
                pairwise_sum(&column) / n
            })
            .collect()
    }

    /// Parses `<dim> <tag>` followed by one whitespace-separated vector per
    /// line. Blank lines and `#` comments are skipped.
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
        let (hline, header) = lines
            .next()
            .ok_or_else(|| MetricsError::EmptySet(origin.to_string()))?;
        let (dim, tag) = header
            .split_once(char::is_whitespace)
            .unwrap_or((header, ""));
        let dim: usize = dim
            .parse()
            .map_err(|_| parse_err(hline, format!("bad dimension {dim:?}")))?;
        let mut vectors = Vec::new();
        for (n, line) in lines {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|_| parse_err(n, format!("bad number {x:?}")))
                })
                .collect::<Result<_, _>>()?;
            if v.len() != dim {
                return Err(MetricsError::DimensionMismatch(dim, v.len()));
            }
            vectors.push(v);
        }
        Self::new(tag.trim(), vectors)
    }

    pub fn read(path: &Path) -> Result<Self, MetricsError> {
        let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Inverse of [`EmbeddingSet::parse`]; floats use shortest round-trip form.
    pub fn render(&self) -> String {
        let mut out = format!("{} {}\n", self.dim(), self.tag);
        for v in &self.vectors {
            let line: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    /// Squared distance between mean embeddings.
    pub value: f64,
    pub set_a_tag: String,
    pub set_b_tag: String,
    pub n_a: usize,
    pub n_b: usize,
}

/// Linear-kernel MMD²: `‖mean(a) − mean(b)‖²`.
pub fn mmd_linear(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<MmdReport, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (ma, mb) = (a.mean(), b.mean());
    let squares: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(MmdReport {
        value: pairwise_sum(&squares),
        set_a_tag: a.tag.clone(),
        set_b_tag: b.tag.clone(),
        n_a: a.len(),
        n_b: b.len(),
    })
}

/// Unweighted mean of per-class values.
pub fn aggregate_mmd_table(per_class: &BTreeMap<String, f64>) -> Result<f64, MetricsError> {
    if per_class.is_empty() {
        return Err(MetricsError::EmptyTable);
    }
    let values: Vec<f64> = per_class.values().copied().collect();
    Ok(pairwise_sum(&values) / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedMmd {
    pub first_average: f64,
    pub second_average: f64,
    /// Averages as displayed, at `decimals` places.
    pub first_display: f64,
    pub second_display: f64,
    pub decimals: usize,
    /// `1 − second/first`, from the displayed averages.
    pub reduction: f64,
}

/// Averages two per-class tables and the relative reduction from the first
/// to the second. The reduction uses the averages as displayed so that the
/// report line agrees with the table above it.
pub fn paired_reduction(
    first: &BTreeMap<String, f64>,
    second: &BTreeMap<String, f64>,
    decimals: usize,
) -> Result<PairedMmd, MetricsError> {
    let first_average = aggregate_mmd_table(first)?;
    let second_average = aggregate_mmd_table(second)?;
    let first_display = round_decimal(first_average, decimals);
    let second_display = round_decimal(second_average, decimals);
    if first_display == 0.0 {
        return Err(MetricsError::InvalidArgument(
            "reduction from a zero average".into(),
        ));
    }
    Ok(PairedMmd {
        first_average,
        second_average,
        first_display,
        second_display,
        decimals,
        reduction: 1.0 - second_display / first_display,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(tag: &str, v: &[&[f64]]) -> EmbeddingSet {
        EmbeddingSet::new(tag, v.iter().map(|x| x.to_vec()).collect()).unwrap()
    }

    fn table(values: &[f64]) -> BTreeMap<String, f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("c{i:02}"), *v))
            .collect()
    }

    pub(crate) const VISUAL: [f64; 10] = [
        0.209, 0.251, 0.314, 0.387, 0.213, 0.144, 0.266, 0.167, 0.258, 0.176,
    ];
    pub(crate) const TEXT: [f64; 10] = [
        0.054, 0.048, 0.103, 0.114, 0.093, 0.126, 0.091, 0.103, 0.142, 0.115,
    ];

    #[test]
    fn identical_sets_are_zero() {
        let a = set("a", &[&[1.5, -2.0], &[0.25, 3.0], &[7.0, 1.0]]);
        assert_eq!(mmd_linear(&a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn mean_difference_oracle() {
        let a = set("a", &[&[1.0, 0.0], &[3.0, 0.0]]);
        let b = set("b", &[&[0.0, 0.0], &[0.0, 0.0]]);
        let r = mmd_linear(&a, &b).unwrap();
        assert!((r.value - 4.0).abs() < 1e-12);
        assert_eq!((r.n_a, r.n_b), (2, 2));
        assert_eq!((r.set_a_tag.as_str(), r.set_b_tag.as_str()), ("a", "b"));
    }

    #[test]
    fn unequal_sizes() {
        // means (2, 2) and (0, 1): 4 + 1
        let a = set("a", &[&[1.0, 1.0], &[3.0, 3.0]]);
        let b = set("b", &[&[0.0, 0.0], &[0.0, 1.0], &[0.0, 2.0]]);
        assert!((mmd_linear(&a, &b).unwrap().value - 5.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_sets() {
        assert!(matches!(
            EmbeddingSet::new("x", vec![]),
            Err(MetricsError::EmptySet(_))
        ));
        assert!(matches!(
            EmbeddingSet::new("x", vec![vec![1.0], vec![1.0, 2.0]]),
            Err(MetricsError::DimensionMismatch(1, 2))
        ));
        assert!(matches!(
            EmbeddingSet::new("x", vec![vec![f64::NAN]]),
            Err(MetricsError::NonFinite(_))
        ));
        let a = set("a", &[&[1.0]]);
        let b = set("b", &[&[1.0, 2.0]]);
        assert!(matches!(
            mmd_linear(&a, &b),
            Err(MetricsError::DimensionMismatch(1, 2))
        ));
    }

    #[test]
    fn file_round_trip() {
        let a = set("photo visual", &[&[0.1, -2.5e-7], &[1.0 / 3.0, 4.0]]);
        let text = a.render();
        assert!(text.starts_with("2 photo visual\n"));
        assert_eq!(EmbeddingSet::parse(&text, "mem").unwrap(), a);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.emb");
        fs::write(&path, &text).unwrap();
        assert_eq!(EmbeddingSet::read(&path).unwrap(), a);
    }

    #[test]
    fn malformed_files() {
        assert!(matches!(
            EmbeddingSet::parse("", "f"),
            Err(MetricsError::EmptySet(_))
        ));
        assert!(matches!(
            EmbeddingSet::parse("2 t\n", "f"),
            Err(MetricsError::EmptySet(_))
        ));
        assert!(matches!(
            EmbeddingSet::parse("x t\n1 2\n", "f"),
            Err(MetricsError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            EmbeddingSet::parse("2 t\n# c\n1 zz\n", "f"),
            Err(MetricsError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            EmbeddingSet::parse("2 t\n1 2 3\n", "f"),
            Err(MetricsError::DimensionMismatch(2, 3))
        ));
    }

    #[test]
    fn visual_table_average() {
        let avg = aggregate_mmd_table(&table(&VISUAL)).unwrap();
        assert!((avg - 0.239).abs() <= 0.001, "{avg}");
    }

    #[test]
    fn text_table_average() {
        let avg = aggregate_mmd_table(&table(&TEXT)).unwrap();
        assert!((avg - 0.099).abs() <= 0.001, "{avg}");
    }

    #[test]
    fn visual_to_text_reduction() {
        let p = paired_reduction(&table(&VISUAL), &table(&TEXT), TABLE_DECIMALS).unwrap();
        assert_eq!((p.first_display, p.second_display), (0.239, 0.099));
        assert!((p.reduction - 0.586).abs() <= 0.003, "{}", p.reduction);
        assert_eq!(format!("{:.1}%", p.reduction * 100.0), "58.6%");
        // unrounded averages land inside the same band
        assert!((1.0 - p.second_average / p.first_average - 0.586).abs() <= 0.003);
    }

    #[test]
    fn trivial_tables() {
        let t = table(&VISUAL);
        assert_eq!(paired_reduction(&t, &t, 3).unwrap().reduction, 0.0);
        let single: BTreeMap<String, f64> = [("c".to_string(), 0.5)].into();
        assert_eq!(aggregate_mmd_table(&single).unwrap(), 0.5);
        assert!(matches!(
            aggregate_mmd_table(&BTreeMap::new()),
            Err(MetricsError::EmptyTable)
        ));
    }
}
