use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::Context as _;

use dgreason_core::metrics::rejection_table;
use dgreason_core::record::load_records;
use dgreason_core::train::RejectionStats;

use super::train::TrainSummary;
use super::{write_text, Context};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Output directory of a finished `train` run.
    #[arg(long)]
    pub run: PathBuf,
}

pub fn run(ctx: &Context, args: Args) -> anyhow::Result<()> {
    let summary_path = args.run.join("summary.json");
    let text = fs::read_to_string(&summary_path)
        .with_context(|| format!("reading {}", summary_path.display()))?;
    let summary: TrainSummary = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", summary_path.display()))?;

    let mut out = String::new();
    writeln!(
        out,
        "mode {} target {} pathway {:?}",
        summary.mode.name(),
        summary.target_domain,
        summary.pathway
    )?;
    for s in &summary.seeds {
        write!(out, "seed {:<6} accuracy {:.4}", s.seed, s.accuracy.average)?;
        for (domain, acc) in &s.accuracy.per_domain {
            write!(out, "  {domain} {}/{}", acc.correct, acc.total)?;
        }
        if let Some(loss) = s.final_loss {
            write!(out, "  final loss {loss:.4}")?;
        }
        writeln!(out)?;
    }
    writeln!(
        out,
        "average accuracy {:.4} over {} seed(s)",
        summary.average_accuracy,
        summary.seeds.len()
    )?;

    for s in &summary.seeds {
        let path = args
            .run
            .join(format!("seed_{}", s.seed))
            .join("rejection.jsonl");
        if !path.exists() {
            continue;
        }
        let stats: Vec<RejectionStats> = load_records(&path)?;
        writeln!(out, "\nrejection (%), seed {}", s.seed)?;
        out.push_str(&rejection_table(&stats)?.render_text());
    }

    ctx.prepare_out_dir()?;
    let mut manifest = ctx.manifest("report", summary.seeds.iter().map(|s| s.seed).collect())?;
    manifest.add_input("summary", &summary_path)?;
    let report = ctx.out("report.txt");
    write_text(&report, &out)?;
    manifest.add_output("report", report);
    ctx.finish(manifest)?;
    print!("{out}");
    Ok(())
}
