use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{ArgGroup, Args};
use serde::Deserialize;

use retain_core::grouping::partition;
use retain_core::merge::{merge_continual, merge_grouped, merge_uniform_ext, MergePlan, SkillSequence, SkillStep};
use retain_core::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["alpha", "plan", "continual"])))]
pub struct MergeArgs {
    #[arg(long)]
    pre: Option<PathBuf>,
    #[arg(long)]
    ft: Option<PathBuf>,
    /// Uniform coefficient: (1 - alpha) * pre + alpha * ft.
    #[arg(long)]
    alpha: Option<f64>,
    /// Group-wise plan JSON; may also name `pre`, `ft` and `out`.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Skill-sequence JSON for repeated merging.
    #[arg(long)]
    continual: Option<PathBuf>,
    /// Output checkpoint (a directory for --continual).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accept coefficients outside [0, 1].
    #[arg(long)]
    allow_extrapolation: bool,
}

#[derive(Debug, Deserialize)]
struct PlanFile {
    #[serde(flatten)]
    plan: MergePlan,
    pre: Option<PathBuf>,
    ft: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContinualFile {
    base: PathBuf,
    alpha: f64,
    steps: Vec<ContinualStepFile>,
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContinualStepFile {
    label: String,
    path: PathBuf,
}

fn required(flag: Option<PathBuf>, from_file: Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or(from_file).ok_or_else(|| CliError::usage(format!("missing --{name}")))
}

fn load(path: &PathBuf, manifest: &mut ManifestBuilder) -> CliResult<Checkpoint> {
    manifest.input(path);
    Ok(load_checkpoint(path)?)
}

pub fn run(args: MergeArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::start();
    if let Some(seq_path) = &args.continual {
        return run_continual(&args, seq_path, manifest);
    }
    let (plan, pre_path, ft_path, out) = match &args.plan {
        Some(path) => {
            manifest.config(path)?;
            let file: PlanFile = crate::read_json(path)?;
            let mut plan = file.plan;
            plan.allow_extrapolation |= args.allow_extrapolation;
            (
                plan,
                required(args.pre.clone(), file.pre, "pre")?,
                required(args.ft.clone(), file.ft, "ft")?,
                required(args.out.clone(), file.out, "out")?,
            )
        }
        None => {
            let mut plan = MergePlan::uniform(args.alpha.expect("clap enforces one mode"));
            plan.allow_extrapolation = args.allow_extrapolation;
            (
                plan,
                required(args.pre.clone(), None, "pre")?,
                required(args.ft.clone(), None, "ft")?,
                required(args.out.clone(), None, "out")?,
            )
        }
    };
    plan.validate()?;
    let pre = load(&pre_path, &mut manifest)?;
    let ft = load(&ft_path, &mut manifest)?;
    let merged = match &plan.group_spec {
        None => merge_uniform_ext(&pre, &ft, plan.default_alpha, plan.allow_extrapolation)?,
        Some(_) => merge_grouped(&pre, &ft, &plan)?,
    };
    save_checkpoint(&merged, &out)?;
    manifest.output(&out);
    print_summary(&plan, &merged)?;
    manifest.finish(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn print_summary(plan: &MergePlan, merged: &Checkpoint) -> CliResult<()> {
    match &plan.group_spec {
        None => println!("uniform alpha={} over {} tensors", plan.default_alpha, merged.len()),
        Some(spec) => {
            let parts = partition(merged, spec).map_err(|e| CliError::usage(e.to_string()))?;
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for (_, g) in parts.iter() {
                *counts.entry(g).or_default() += 1;
            }
            for (group, n) in counts {
                println!("group {group}: alpha={} ({n} tensors)", plan.alpha_for(group));
            }
        }
    }
    Ok(())
}

fn run_continual(args: &MergeArgs, seq_path: &PathBuf, mut manifest: ManifestBuilder) -> CliResult<()> {
    manifest.config(seq_path)?;
    let file: ContinualFile = crate::read_json(seq_path)?;
    let out = required(args.out.clone(), file.out, "out")?;
    let base = load(&file.base, &mut manifest)?;
    let mut steps = Vec::with_capacity(file.steps.len());
    for s in &file.steps {
        steps.push(SkillStep { label: s.label.clone(), checkpoint: load(&s.path, &mut manifest)? });
    }
    let merged = merge_continual(&base, &SkillSequence { alpha: file.alpha, steps })?;
    crate::ensure_dir(&out)?;
    for (i, m) in merged.iter().enumerate() {
        let path = out.join(format!("merged_{:03}.safetensors", i + 1));
        save_checkpoint(m, &path)?;
        manifest.output(&path);
        println!("step {}: {} alpha={}", i + 1, file.steps[i].label, file.alpha);
    }
    manifest.finish(&out)?;
    println!("wrote {} checkpoints to {}", merged.len(), out.display());
    Ok(())
}
