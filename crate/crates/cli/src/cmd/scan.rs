use std::path::PathBuf;

use dgreason_core::record::emit_records;

use super::{write_json, Context};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset root; defaults to `dataset.root`.
    pub root: Option<PathBuf>,
}

pub fn run(ctx: &Context, args: Args) -> anyhow::Result<()> {
    let root = ctx.dataset_root(args.root.as_deref())?;
    let corpus = ctx.load_corpus(&root)?;
    ctx.prepare_out_dir()?;
    let mut manifest = ctx.manifest("scan", vec![])?;
    manifest.add_input("dataset", &root)?;

    let samples = ctx.out("samples.jsonl");
    emit_records(corpus.samples(), &samples)?;
    let summary = ctx.out("summary.json");
    write_json(
        &summary,
        &serde_json::json!({
            "summary": corpus.summary(),
            "domains": corpus.per_domain_counts(),
            "classes": corpus.labels(),
        }),
    )?;
    manifest.add_output("samples", samples);
    manifest.add_output("summary", summary);
    ctx.finish(manifest)?;
    println!("{}", corpus.summary());
    Ok(())
}
