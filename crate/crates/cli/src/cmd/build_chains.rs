use std::fs;
use std::path::PathBuf;

use anyhow::Context as _;

use dgreason_core::backend::{Backend, ToyBackend, ToyModel, WireBackend};
use dgreason_core::corpus::make_split;
use dgreason_core::genpipe::build_reasoning_dataset;
use dgreason_core::record::emit_records;
use dgreason_core::synth::SyntheticTeacher;

use super::{usage, write_json, Context};
use crate::BackendChoice;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Held-out domain; chains are built for the other domains only.
    #[arg(long)]
    pub target: Option<String>,
    /// Candidates per sample; overrides `generation.candidates`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Toy-model snapshot to generate with (toy backend only).
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

pub fn run(mut ctx: Context, args: Args) -> anyhow::Result<()> {
    if let Some(k) = args.k {
        ctx.config.generation.candidates = k;
    }
    if ctx.config.generation.candidates == 0 {
        return Err(usage("k must be at least 1"));
    }
    let root = ctx.dataset_root(args.root.as_deref())?;
    let corpus = ctx.load_corpus(&root)?;
    let target = ctx.target_domain(args.target.as_deref(), &corpus)?;
    ctx.config.dataset.target_domain = Some(target.clone());
    let split = make_split(&corpus, &target)?;

    let backend: Box<dyn Backend> = match ctx.backend.unwrap_or(BackendChoice::Wire) {
        BackendChoice::Wire => Box::new(WireBackend::from_env(ctx.config.wire.clone())?),
        BackendChoice::Mock => Box::new(SyntheticTeacher::new(
            corpus.labels().to_vec(),
            ctx.config.teacher.clone(),
        )),
        BackendChoice::Toy => {
            let path = args
                .snapshot
                .as_ref()
                .ok_or_else(|| usage("the toy backend needs --snapshot to generate chains"))?;
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            Box::new(ToyBackend::new(ToyModel::restore(&bytes)?))
        }
    };

    ctx.prepare_out_dir()?;
    let progress = ctx.out("progress.jsonl");
    if !ctx.resume && progress.exists() {
        fs::remove_file(&progress).with_context(|| format!("removing {}", progress.display()))?;
    }
    let gen = ctx.config.gen_config();
    let mut manifest = ctx.manifest("build-chains", vec![gen.seed])?;
    manifest.add_input("dataset", &root)?;
    if let Some(s) = &args.snapshot {
        manifest.add_input("snapshot", s)?;
    }

    let (records, stats) =
        build_reasoning_dataset(&corpus, &split, backend.as_ref(), &gen, Some(&progress))?;

    let chains = ctx.out("chains.jsonl");
    emit_records(&records, &chains)?;
    let stats_path = ctx.out("gen_stats.json");
    write_json(&stats_path, &stats)?;
    manifest.add_output("chains", chains);
    manifest.add_output("stats", stats_path);
    manifest.add_output("progress", progress);
    ctx.finish(manifest)?;

    println!(
        "{} of {} samples retained ({:.2}%)",
        stats.retained,
        stats.attempted,
        100.0 * stats.retention_rate()
    );
    for (reason, n) in &stats.per_failure_reason {
        println!("  {reason}: {n}");
    }
    Ok(())
}
