use std::path::PathBuf;

use anyhow::Context as _;

use dgreason_core::synth::{synth_templates, synth_train_config};

use super::{usage, write_text, Context};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Held-out domain written into the generated config.
    #[arg(long, default_value = "sketch")]
    pub target: String,
    /// Samples per domain and class; overrides `synth.per_cell`.
    #[arg(long)]
    pub per_cell: Option<usize>,
}

pub fn run(ctx: &Context, args: Args) -> anyhow::Result<()> {
    let mut synth = ctx.config.synth.clone();
    if let Some(n) = args.per_cell {
        synth.per_cell = n;
    }
    if !synth.domains.contains(&args.target) {
        return Err(usage(format!(
            "target domain {:?} not in {:?}",
            args.target, synth.domains
        )));
    }
    let out = ctx.prepare_out_dir()?;
    let out = out
        .canonicalize()
        .with_context(|| format!("resolving {}", out.display()))?;
    let root: PathBuf = out.join("data");
    let written = synth.write_dataset(&root)?;

    let mut config = ctx.config.clone();
    config.synth = synth;
    config.templates = synth_templates();
    config.train = synth_train_config();
    config.dataset.root = Some(root.clone());
    config.dataset.target_domain = Some(args.target.clone());
    let config_path = out.join("config.toml");
    write_text(&config_path, &config.to_toml())?;

    let mut manifest = ctx.manifest("synth", vec![config.synth.seed])?;
    manifest.add_output("dataset", root.clone());
    manifest.add_output("config", config_path.clone());
    ctx.finish(manifest)?;
    println!("{written} samples under {}", root.display());
    println!("config: {}", config_path.display());
    Ok(())
}
