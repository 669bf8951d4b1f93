use std::fs;
use std::path::PathBuf;

use anyhow::Context as _;
use serde::{Deserialize, Serialize};

use dgreason_core::backend::ToyBackend;
use dgreason_core::corpus::make_split;
use dgreason_core::record::{emit_records, load_chains, ChainRecord};
use dgreason_core::train::{
    assemble_dual_records, initial_model, records_for_mode, run_mode, token_stats, AccuracyReport,
    DualRecord, EmptyRoundPolicy, EvalPathway, RejectionStats, TrainConfig, TrainMode,
};

use super::{usage, write_json, Context};
use crate::BackendChoice;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// mtct, sarr, reasoning-only or cls-only.
    #[arg(long)]
    pub mode: TrainMode,
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    /// Chain records from `build-chains`; defaults to `dataset.chains`.
    #[arg(long)]
    pub chains: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// Flag overrides for every `[train]` setting.
#[derive(Debug, Default, clap::Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Self-training rounds after the first stage (sarr mode).
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub round_epochs: Option<usize>,
    /// Comma-separated seed list; replaces `--seed` and `train.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub restart_each_round: Option<bool>,
    /// halt or skip-round.
    #[arg(long, value_parser = kebab::<EmptyRoundPolicy>)]
    pub empty_round_policy: Option<EmptyRoundPolicy>,
    #[arg(long)]
    pub generation_temperature: Option<f64>,
    #[arg(long)]
    pub max_chain_tokens: Option<usize>,
    #[arg(long)]
    pub max_label_tokens: Option<usize>,
    /// classification or reasoning; defaults to the mode's own pathway.
    #[arg(long, value_parser = kebab::<EvalPathway>)]
    pub eval_pathway: Option<EvalPathway>,
}

fn kebab<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(
            epochs,
            batch_size,
            learning_rate,
            rounds,
            round_epochs,
            seeds,
            restart_each_round,
            empty_round_policy,
            generation_temperature,
            max_chain_tokens,
            max_label_tokens
        );
        if self.eval_pathway.is_some() {
            cfg.eval_pathway = self.eval_pathway;
        }
    }
}

/// One line of `train_records.jsonl`: the pathways a record trained on.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainedRecord {
    pub sample_id: String,
    pub domain: String,
    pub classification: Option<Pathway>,
    pub reasoning: Option<Pathway>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Pathway {
    pub prompt: String,
    pub target: Vec<String>,
}

impl TrainedRecord {
    fn new(rec: &DualRecord, mode: TrainMode) -> Self {
        Self {
            sample_id: rec.sample_id.clone(),
            domain: rec.domain.clone(),
            classification: mode.uses_cls().then(|| Pathway {
                prompt: rec.cls_prompt.clone(),
                target: rec.cls_target.clone(),
            }),
            reasoning: match (&rec.reason_target, mode.uses_reasoning()) {
                (Some(t), true) => Some(Pathway {
                    prompt: rec.reason_prompt.clone(),
                    target: t.clone(),
                }),
                _ => None,
            },
        }
    }
}

/// One line of `rounds.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub retained: usize,
    pub rejection_rate: f64,
    pub rejection: RejectionStats,
    pub retained_ids: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub accuracy: AccuracyReport,
    pub steps: usize,
    pub final_loss: Option<f64>,
    /// Rejection rate before round 1 and after every round.
    pub rejection_trace: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: TrainMode,
    pub target_domain: String,
    pub pathway: EvalPathway,
    pub seeds: Vec<SeedSummary>,
    pub average_accuracy: f64,
}

pub fn run(mut ctx: Context, args: Args) -> anyhow::Result<()> {
    if ctx.backend.is_some_and(|b| b != BackendChoice::Toy) {
        return Err(usage(
            "training needs a fine-tunable backend; only --backend toy qualifies",
        ));
    }
    args.overrides.apply(&mut ctx.config.train);
    let cfg = ctx.config.train.clone();
    cfg.validate()?;
    let root = ctx.dataset_root(args.root.as_deref())?;
    let corpus = ctx.load_corpus(&root)?;
    let target = ctx.target_domain(args.target.as_deref(), &corpus)?;
    ctx.config.dataset.target_domain = Some(target.clone());
    let split = make_split(&corpus, &target)?;
    let chains_path = args
        .chains
        .clone()
        .or_else(|| ctx.config.dataset.chains.clone());
    let chains: Vec<ChainRecord> = match &chains_path {
        Some(p) => {
            let loaded = load_chains(p)?;
            if let Some(bad) = loaded.rejects.first() {
                anyhow::bail!("{}:{}: {}", p.display(), bad.line, bad.reason);
            }
            loaded.records
        }
        None if args.mode.uses_reasoning() => {
            return Err(usage(format!("mode {} needs --chains", args.mode.name())));
        }
        None => Vec::new(),
    };
    ctx.config.dataset.chains = chains_path.clone();
    let templates = ctx.config.templates.clone();

    ctx.prepare_out_dir()?;
    let mut manifest = ctx.manifest("train", cfg.seeds.clone())?;
    manifest.add_input("dataset", &root)?;
    if let Some(p) = &chains_path {
        manifest.add_input("chains", p)?;
    }

    let records =
        assemble_dual_records(&corpus, split.train_samples(&corpus), &chains, &templates)?;
    let without_chain = records
        .iter()
        .filter(|r| r.is_classification_only())
        .count();
    if without_chain > 0 && args.mode.uses_cls() {
        manifest.add_note(format!(
            "{without_chain} of {} training samples have no retained chain and train on classification only",
            records.len()
        ));
    }
    let used = records_for_mode(&records, args.mode);
    let pathway = cfg.eval_pathway.unwrap_or(args.mode.eval_pathway());
    let stats_tokens = cfg.max_chain_tokens.max(cfg.max_label_tokens);
    let source = ctx.config.analysis.stats_source;

    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let dir = ctx.out(&format!("seed_{seed}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let ckpt = dir.join("rounds");
        if !ctx.resume && ckpt.exists() {
            fs::remove_dir_all(&ckpt).with_context(|| format!("clearing {}", ckpt.display()))?;
        }
        let ckpt_arg = (args.mode == TrainMode::Sarr).then_some(ckpt.as_path());
        let (run, backend) = run_mode(
            &corpus, &split, &chains, &templates, args.mode, &cfg, seed, ckpt_arg,
        )?;

        let history = dir.join("history.jsonl");
        emit_records(&run.history, &history)?;
        let accuracy = dir.join("accuracy.json");
        write_json(&accuracy, &run.accuracy)?;
        let snapshot = dir.join("model.snapshot");
        fs::write(&snapshot, backend.model().snapshot())
            .with_context(|| format!("writing {}", snapshot.display()))?;
        let trained = dir.join("train_records.jsonl");
        let views: Vec<TrainedRecord> = used
            .iter()
            .map(|r| TrainedRecord::new(r, args.mode))
            .collect();
        emit_records(&views, &trained)?;

        let before = ToyBackend::new(initial_model(&corpus, &chains, &templates, seed)?);
        let before_path = dir.join("token_stats_before.jsonl");
        emit_records(
            &token_stats(&before, &used, args.mode, source, stats_tokens)?,
            &before_path,
        )?;
        let after_path = dir.join("token_stats_after.jsonl");
        emit_records(
            &token_stats(&backend, &used, args.mode, source, stats_tokens)?,
            &after_path,
        )?;

        for (name, path) in [
            ("history", &history),
            ("accuracy", &accuracy),
            ("snapshot", &snapshot),
            ("train_records", &trained),
            ("token_stats_before", &before_path),
            ("token_stats_after", &after_path),
        ] {
            manifest.add_output(&format!("seed_{seed}.{name}"), path.clone());
        }

        let mut trace = None;
        if let Some(sarr) = &run.sarr {
            let rejection = dir.join("rejection.jsonl");
            let full = sarr.rejection_trace();
            emit_records(&full, &rejection)?;
            let rounds: Vec<RoundReport> = sarr
                .rounds
                .iter()
                .map(|r| RoundReport {
                    round: r.round,
                    retained: r.retained.len(),
                    rejection_rate: r.rejection.rejection_rate(),
                    rejection: r.rejection.clone(),
                    retained_ids: r.retained.iter().map(|c| c.sample_id.clone()).collect(),
                })
                .collect();
            let rounds_path = dir.join("rounds.jsonl");
            emit_records(&rounds, &rounds_path)?;
            manifest.add_output(&format!("seed_{seed}.rejection"), rejection);
            manifest.add_output(&format!("seed_{seed}.rounds"), rounds_path);
            trace = Some(full.iter().map(RejectionStats::rejection_rate).collect());
        }

        println!(
            "seed {seed}: {} accuracy {:.4}",
            args.mode.name(),
            run.accuracy.average
        );
        seeds.push(SeedSummary {
            seed,
            steps: run.history.len(),
            final_loss: run.history.last().map(|s| s.loss),
            accuracy: run.accuracy,
            rejection_trace: trace,
        });
    }

    let average_accuracy =
        seeds.iter().map(|s| s.accuracy.average).sum::<f64>() / seeds.len() as f64;
    let summary = TrainSummary {
        mode: args.mode,
        target_domain: target,
        pathway,
        seeds,
        average_accuracy,
    };
    let summary_path = ctx.out("summary.json");
    write_json(&summary_path, &summary)?;
    manifest.add_output("summary", summary_path);
    ctx.finish(manifest)?;
    println!(
        "average over {} seed(s): {average_accuracy:.4}",
        summary.seeds.len()
    );
    Ok(())
}
