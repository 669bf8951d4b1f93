use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use serde::Deserialize;

use dgreason_core::backend::TokenStat;
use dgreason_core::metrics::{
    entropy_occurrences, entropy_reduction_ranking, mmd_linear, paired_reduction, prob_histogram,
    rejection_table, EmbeddingSet, MetricsError, RejectionTable, TABLE_DECIMALS,
};
use dgreason_core::record::load_records;
use dgreason_core::train::RejectionStats;

use super::{usage, write_json, write_text, Context};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(subcommand)]
    pub kind: Kind,
}

#[derive(Debug, clap::Subcommand)]
pub enum Kind {
    /// Per-class linear MMD between paired embedding sets, grouped.
    Mmd {
        /// TOML list of `[[pair]]` entries with `group`, `class`, `a`, `b`.
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Histogram of label-token probabilities.
    Histogram {
        /// One probability per line or token-statistics JSONL.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Tokens ranked by mean entropy reduction.
    Entropy {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        min_occurrences: Option<usize>,
    },
    /// Rejection percentages per round and domain.
    Rejection {
        /// Rejection statistics JSONL or a `round <domain>...` text table.
        #[arg(long)]
        input: PathBuf,
    },
}

impl Kind {
    fn name(&self) -> &'static str {
        match self {
            Kind::Mmd { .. } => "mmd",
            Kind::Histogram { .. } => "histogram",
            Kind::Entropy { .. } => "entropy",
            Kind::Rejection { .. } => "rejection",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairFile {
    pair: Vec<Pair>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Pair {
    group: String,
    class: String,
    a: PathBuf,
    b: PathBuf,
}

pub fn run(ctx: &Context, args: Args) -> anyhow::Result<()> {
    let name = args.kind.name();
    ctx.prepare_out_dir()?;
    let mut manifest = ctx.manifest(&format!("analyze-{name}"), vec![])?;
    let (text, json) = match &args.kind {
        Kind::Mmd { pairs } => {
            manifest.add_input("pairs", pairs)?;
            mmd_report(pairs)?
        }
        Kind::Histogram { scores, bins } => {
            manifest.add_input("scores", scores)?;
            let probs = read_scores(scores)?;
            let h = prob_histogram(&probs, bins.unwrap_or(ctx.config.analysis.bins))?;
            let mut text = String::new();
            for (i, count) in h.counts.iter().enumerate() {
                text.push_str(&format!(
                    "[{:.2}, {:.2}{} {count}\n",
                    h.bin_edges[i],
                    h.bin_edges[i + 1],
                    close(i, &h.counts)
                ));
            }
            let (low, mid, high) = h.low_mid_high;
            text.push_str(&format!(
                "n={} low={:.2}% mid={:.2}% high={:.2}%\n",
                h.total,
                100.0 * low,
                100.0 * mid,
                100.0 * high
            ));
            (text, serde_json::to_value(&h)?)
        }
        Kind::Entropy {
            before,
            after,
            top_k,
            min_occurrences,
        } => {
            manifest.add_input("before", before)?;
            manifest.add_input("after", after)?;
            let b: Vec<TokenStat> = load_records(before)?;
            let a: Vec<TokenStat> = load_records(after)?;
            if b.is_empty() || a.is_empty() {
                return Err(MetricsError::EmptyInput.into());
            }
            let report = entropy_reduction_ranking(
                &entropy_occurrences(&b),
                &entropy_occurrences(&a),
                top_k.unwrap_or(ctx.config.analysis.top_k),
                min_occurrences.unwrap_or(ctx.config.analysis.min_occurrences),
            );
            let mut text = format!(
                "{:<20} {:>8} {:>8} {:>9} {:>6}\n",
                "token", "before", "after", "reduction", "n"
            );
            for t in &report.top_k {
                text.push_str(&format!(
                    "{:<20} {:>8.4} {:>8.4} {:>9.4} {:>6}\n",
                    t.token, t.before, t.after, t.reduction, t.occurrences
                ));
            }
            (text, serde_json::to_value(&report)?)
        }
        Kind::Rejection { input } => {
            manifest.add_input("input", input)?;
            let table = read_rejection(input)?;
            (table.render_text(), serde_json::to_value(&table)?)
        }
    };
    let text_path = ctx.out(&format!("{name}.txt"));
    write_text(&text_path, &text)?;
    let json_path = ctx.out(&format!("{name}.json"));
    write_json(&json_path, &json)?;
    manifest.add_output("text", text_path);
    manifest.add_output("json", json_path);
    ctx.finish(manifest)?;
    print!("{text}");
    Ok(())
}

fn close(i: usize, counts: &[usize]) -> &'static str {
    if i + 1 == counts.len() {
        "]"
    } else {
        ")"
    }
}

fn read_scores(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let stats: Vec<TokenStat> = load_records(path)?;
        return Ok(stats.into_iter().map(|s| s.prob).collect());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        for cell in line.split_whitespace() {
            let v = cell.parse::<f64>().map_err(|_| MetricsError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("bad probability {cell:?}"),
            })?;
            out.push(v);
        }
    }
    Ok(out)
}

fn read_rejection(path: &Path) -> anyhow::Result<RejectionTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let stats: Vec<RejectionStats> = load_records(path)?;
        return Ok(rejection_table(&stats)?);
    }
    Ok(RejectionTable::parse(&text, &path.display().to_string())?)
}

fn mmd_report(pairs_path: &Path) -> anyhow::Result<(String, serde_json::Value)> {
    let text = fs::read_to_string(pairs_path)
        .with_context(|| format!("reading {}", pairs_path.display()))?;
    let file: PairFile =
        toml::from_str(&text).with_context(|| format!("in {}", pairs_path.display()))?;
    let base = pairs_path.parent().unwrap_or(Path::new("."));
    let mut groups: Vec<String> = Vec::new();
    let mut tables: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for p in &file.pair {
        let a = EmbeddingSet::read(&base.join(&p.a))?;
        let b = EmbeddingSet::read(&base.join(&p.b))?;
        let value = mmd_linear(&a, &b)?.value;
        if !groups.contains(&p.group) {
            groups.push(p.group.clone());
        }
        if tables
            .entry(p.group.clone())
            .or_default()
            .insert(p.class.clone(), value)
            .is_some()
        {
            return Err(usage(format!(
                "class {:?} listed twice in group {:?}",
                p.class, p.group
            )));
        }
    }
    if groups.is_empty() {
        return Err(MetricsError::EmptyTable.into());
    }
    let classes: Vec<String> = {
        let mut c: Vec<String> = tables.values().flat_map(|t| t.keys().cloned()).collect();
        c.sort();
        c.dedup();
        c
    };
    let width = groups.iter().map(String::len).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}", "class");
    for c in &classes {
        out.push_str(&format!(" {c:>8}"));
    }
    out.push_str(&format!(" {:>8}\n", "avg"));
    let mut averages = BTreeMap::new();
    for g in &groups {
        let t = &tables[g];
        out.push_str(&format!("{g:<width$}"));
        for c in &classes {
            match t.get(c) {
                Some(v) => out.push_str(&format!(" {v:>8.prec$}", prec = TABLE_DECIMALS)),
                None => out.push_str(&format!(" {:>8}", "-")),
            }
        }
        let avg = dgreason_core::metrics::aggregate_mmd_table(t)?;
        out.push_str(&format!(" {avg:>8.prec$}\n", prec = TABLE_DECIMALS));
        averages.insert(g.clone(), avg);
    }
    let mut json =
        serde_json::json!({ "groups": groups, "per_class": tables, "averages": averages });
    if let [first, second] = groups.as_slice() {
        let paired = paired_reduction(&tables[first], &tables[second], TABLE_DECIMALS)?;
        out.push_str(&format!(
            "reduction {first} -> {second}: {:.prec$} -> {:.prec$} ({:.1}%)\n",
            paired.first_display,
            paired.second_display,
            100.0 * paired.reduction,
            prec = TABLE_DECIMALS
        ));
        json["reduction"] = serde_json::to_value(&paired)?;
    }
    Ok((out, json))
}
