use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use retain_core::merge::{merge_uniform, AlphaSelection};
use retain_core::toylab::protocol::{eval_seed, select_on_val};
use retain_core::toylab::{evaluate, EvalReport};
use retain_core::load_checkpoint;

use crate::error::CliResult;
use crate::manifest::ManifestBuilder;

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    ft: PathBuf,
    /// Comma-separated candidate coefficients, e.g. "0.25,0.5,0.75".
    #[arg(long, allow_hyphen_values = true)]
    alphas: String,
    /// Lab config defining the regimes, episode count and seed.
    #[arg(long)]
    eval_config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct SweepReport {
    seed: u64,
    episodes: usize,
    selection: AlphaSelection,
    selected: EvalReport,
}

pub fn run(args: SweepArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::start();
    let alphas = crate::parse_alpha_list(&args.alphas)?;
    manifest.config(&args.eval_config)?;
    let cfg = crate::load_lab_config(&args.eval_config)?;
    manifest.seed(cfg.seed);
    manifest.input(&args.pre);
    manifest.input(&args.ft);
    let pre = load_checkpoint(&args.pre)?;
    let ft = load_checkpoint(&args.ft)?;
    let episodes = cfg.eval.episodes;
    let selection = select_on_val(&cfg, &pre, &ft, &alphas, episodes)?;
    for (a, s) in &selection.scores {
        println!("alpha={a}: ood_val={s:.3}");
    }
    let merged = merge_uniform(&pre, &ft, selection.alpha)?;
    let selected = evaluate(&cfg, &merged, &format!("merged@{}", selection.alpha), episodes, eval_seed(&cfg))?;
    println!(
        "selected alpha={}: id={:.3} ood_test={:.3} generalist={:.3}",
        selection.alpha,
        selected.id,
        selected.ood_test_mean(),
        selected.generalist
    );
    let report = SweepReport { seed: cfg.seed, episodes, selection, selected };
    crate::write_json(&args.out, &report)?;
    manifest.output(&args.out);
    manifest.finish(&args.out)?;
    Ok(())
}
