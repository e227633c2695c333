use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use serde::Serialize;

use retain_core::toylab::protocol::{
    alpha_sweep, eval_seed, finetune, pretrain, pretrain_data, run_continual, run_protocol, run_scaling, step_curves,
    target_data,
};
use retain_core::toylab::{evaluate, evaluate_regime, LabConfig, Regime};
use retain_core::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::error::CliResult;
use crate::manifest::ManifestBuilder;

#[derive(Debug, Subcommand)]
pub enum LabCommand {
    /// Train the base policy; writes the final checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Finetune on the target task; writes one checkpoint per capture into a directory.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint; pretrains from the config when absent.
        #[arg(long)]
        pre: Option<PathBuf>,
    },
    /// Evaluate a policy checkpoint in one or all regimes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// id, ood_val, ood_test_<k> or generalist; all regimes when absent.
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Metric-vs-steps or metric-vs-alpha series for plotting.
    Curve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long, value_enum)]
        x: Axis,
        #[arg(long)]
        pre: Option<PathBuf>,
        #[arg(long)]
        ft: Option<PathBuf>,
    },
    /// Pretrain, finetune, sweep and select alpha, and report every regime.
    Protocol {
        #[command(flatten)]
        common: Common,
        /// Also write the pretrained, finetuned and selected merged checkpoints here.
        #[arg(long)]
        save_dir: Option<PathBuf>,
    },
    /// Sequential finetune-and-merge over `continual.tasks`, against sequential co-finetuning.
    Continual {
        #[command(flatten)]
        common: Common,
    },
    /// Rerun the protocol with pretraining diversity scaled by each fraction.
    Scaling {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0.25,1.0")]
        fractions: String,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Id,
    /// Mean success over the test shifts.
    Ood,
    OodVal,
    Generalist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Steps,
    Alpha,
}

#[derive(Serialize)]
struct Series {
    metric: Metric,
    x: Axis,
    seed: u64,
    points: Vec<[f64; 2]>,
}

struct Ctx {
    cfg: LabConfig,
    manifest: ManifestBuilder,
    out: PathBuf,
}

fn setup(common: &Common) -> CliResult<Ctx> {
    let mut manifest = ManifestBuilder::start();
    manifest.config(&common.config)?;
    let cfg = crate::load_lab_config(&common.config)?;
    manifest.seed(cfg.seed);
    Ok(Ctx { cfg, manifest, out: common.out.clone() })
}

fn load_or_pretrain(ctx: &mut Ctx, pre: Option<&Path>) -> CliResult<Checkpoint> {
    match pre {
        Some(p) => {
            ctx.manifest.input(p);
            Ok(load_checkpoint(p)?)
        }
        None => Ok(pretrain(&ctx.cfg, &pretrain_data(&ctx.cfg))?.final_checkpoint().clone()),
    }
}

fn finetuned_run(ctx: &Ctx, pre: &Checkpoint) -> CliResult<retain_core::toylab::TrainRun> {
    let task = ctx.cfg.tasks.target_task;
    Ok(finetune(&ctx.cfg, pre, &target_data(&ctx.cfg, task), &pretrain_data(&ctx.cfg), task as u64)?)
}

fn finish_json<T: Serialize>(mut ctx: Ctx, value: &T) -> CliResult<()> {
    crate::write_json(&ctx.out, value)?;
    ctx.manifest.output(&ctx.out);
    ctx.manifest.finish(&ctx.out)?;
    println!("wrote {}", ctx.out.display());
    Ok(())
}

pub fn run(command: LabCommand) -> CliResult<()> {
    match command {
        LabCommand::Pretrain { common } => {
            let mut ctx = setup(&common)?;
            let run = pretrain(&ctx.cfg, &pretrain_data(&ctx.cfg))?;
            println!("pretrain loss {:.5} -> {:.5}", run.losses[0], run.losses.last().unwrap());
            save_checkpoint(run.final_checkpoint(), &ctx.out)?;
            ctx.manifest.output(&ctx.out);
            ctx.manifest.finish(&ctx.out)?;
            Ok(())
        }
        LabCommand::Finetune { common, pre } => {
            let mut ctx = setup(&common)?;
            let base = load_or_pretrain(&mut ctx, pre.as_deref())?;
            let run = finetuned_run(&ctx, &base)?;
            crate::ensure_dir(&ctx.out)?;
            for (step, ckpt) in &run.captures {
                let path = ctx.out.join(format!("step_{step:08}.safetensors"));
                save_checkpoint(ckpt, &path)?;
                ctx.manifest.output(&path);
            }
            println!(
                "{}: {} captures, loss {:.5} -> {:.5}",
                ctx.cfg.finetune.baseline.label(),
                run.captures.len(),
                run.losses[0],
                run.losses.last().unwrap()
            );
            ctx.manifest.finish(&ctx.out)?;
            Ok(())
        }
        LabCommand::Eval { common, policy, regime, episodes } => {
            let mut ctx = setup(&common)?;
            ctx.manifest.input(&policy);
            let ckpt = load_checkpoint(&policy)?;
            let episodes = episodes.unwrap_or(ctx.cfg.eval.episodes);
            let seed = eval_seed(&ctx.cfg);
            let label = ckpt.metadata().get("label").cloned().unwrap_or_else(|| policy.display().to_string());
            match regime {
                Some(r) => {
                    let regime: Regime = r.parse()?;
                    let rate = evaluate_regime(&ctx.cfg, &ckpt, regime, episodes, seed)?;
                    println!("{regime}: {rate:.3}");
                    #[derive(Serialize)]
                    struct One {
                        label: String,
                        regime: String,
                        seed: u64,
                        episodes: usize,
                        success: f64,
                    }
                    let one = One { label, regime: regime.to_string(), seed, episodes, success: rate };
                    finish_json(ctx, &one)
                }
                None => {
                    let report = evaluate(&ctx.cfg, &ckpt, &label, episodes, seed)?;
                    println!(
                        "id={:.3} ood_val={:.3} ood_test={:.3} generalist={:.3}",
                        report.id,
                        report.ood_val,
                        report.ood_test_mean(),
                        report.generalist
                    );
                    finish_json(ctx, &report)
                }
            }
        }
        LabCommand::Curve { common, metric, x, pre, ft } => {
            let mut ctx = setup(&common)?;
            let base = load_or_pretrain(&mut ctx, pre.as_deref())?;
            let points = match x {
                Axis::Steps => {
                    let run = finetuned_run(&ctx, &base)?;
                    step_curves(&ctx.cfg, &run)?
                        .into_iter()
                        .map(|p| {
                            let y = match metric {
                                Metric::Id => p.id,
                                Metric::Ood => p.ood_test,
                                Metric::OodVal => p.ood_val,
                                Metric::Generalist => p.generalist,
                            };
                            [p.step as f64, y]
                        })
                        .collect()
                }
                Axis::Alpha => {
                    let finetuned = match &ft {
                        Some(p) => {
                            ctx.manifest.input(p);
                            load_checkpoint(p)?
                        }
                        None => finetuned_run(&ctx, &base)?.final_checkpoint().clone(),
                    };
                    let sweep = alpha_sweep(&ctx.cfg, &base, &finetuned, &ctx.cfg.eval.alpha_grid, ctx.cfg.eval.episodes)?;
                    sweep
                        .into_iter()
                        .map(|p| {
                            let y = match metric {
                                Metric::Id => p.report.id,
                                Metric::Ood => p.report.ood_test_mean(),
                                Metric::OodVal => p.report.ood_val,
                                Metric::Generalist => p.report.generalist,
                            };
                            [p.alpha, y]
                        })
                        .collect()
                }
            };
            let series = Series { metric, x, seed: ctx.cfg.seed, points };
            finish_json(ctx, &series)
        }
        LabCommand::Protocol { common, save_dir } => {
            let mut ctx = setup(&common)?;
            let run = run_protocol(&ctx.cfg)?;
            let r = &run.report;
            for (name, e) in [("pretrained", &r.pretrained), ("finetuned", &r.finetuned), ("merged", &r.merged)] {
                println!(
                    "{name:>10}: id={:.3} ood_val={:.3} ood_test={:.3} generalist={:.3}",
                    e.id,
                    e.ood_val,
                    e.ood_test_mean(),
                    e.generalist
                );
            }
            println!("selected alpha={}", r.selection.alpha);
            if let Some(dir) = save_dir {
                crate::ensure_dir(&dir)?;
                for (name, ckpt) in [
                    ("pretrained", &run.pretrained),
                    ("finetuned", run.finetune.final_checkpoint()),
                    ("merged", &run.merged),
                ] {
                    let path = dir.join(format!("{name}.safetensors"));
                    save_checkpoint(ckpt, &path)?;
                    ctx.manifest.output(&path);
                }
            }
            let report = run.report;
            finish_json(ctx, &report)
        }
        LabCommand::Continual { common } => {
            let ctx = setup(&common)?;
            let run = run_continual(&ctx.cfg)?;
            println!("merged ID per task: {:?}", run.report.merged_id);
            println!("co-finetuned ID per task: {:?}", run.report.cofinetune_id);
            let report = run.report;
            finish_json(ctx, &report)
        }
        LabCommand::Scaling { common, fractions } => {
            let ctx = setup(&common)?;
            let fractions = crate::parse_alpha_list(&fractions)?;
            let points = run_scaling(&ctx.cfg, &fractions)?;
            for p in &points {
                println!(
                    "fraction {}: alpha={} merged ood_test={:.3}",
                    p.fraction,
                    p.selected_alpha,
                    p.merged.ood_test_mean()
                );
            }
            finish_json(ctx, &points)
        }
    }
}
