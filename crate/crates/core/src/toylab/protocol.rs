//! End-to-end experiments: pretrain, finetune, merge sweeps, curves, group probe,
//! continual merging and pretraining-diversity scaling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{Baseline, LabConfig};
use super::env::{collect_demos, derive_seed, pretrain_scenarios, rng_for, DemoDataset, Nuisance, Scenario};
use super::eval::{evaluate, evaluate_regime, EvalReport, Regime};
use super::model::{policy_group_spec, NetSpec, PolicyNet};
use super::train::{bc_train, BatchProvenance, TrainData, TrainRun};
use super::LabError;
use crate::merge::{merge_continual, merge_grouped, merge_uniform, select_alpha, AlphaSelection, MergePlan, SkillSequence, SkillStep};
use crate::pathlab::{analyze_all, merged_vs_path_projection, PathReport};
use crate::tensorstore::Checkpoint;

// Generator streams; every random draw in the lab descends from `cfg.seed` through one of these.
const STREAM_PRETRAIN_DEMOS: u64 = 0xda7a_0001;
const STREAM_TARGET_DEMOS: u64 = 0xda7a_1000;
const STREAM_INIT: u64 = 0x1417;
const STREAM_PRETRAIN_TRAIN: u64 = 0x7a1_0000;
const STREAM_FINETUNE_TRAIN: u64 = 0xf1e_0000;
const STREAM_SCRATCH_INIT: u64 = 0x5c7a;
const STREAM_EVAL: u64 = 0xe7a1;

/// Master seed for every evaluation in a run; shared across checkpoints so that
/// comparisons use the same episodes.
pub fn eval_seed(cfg: &LabConfig) -> u64 {
    derive_seed(cfg.seed, STREAM_EVAL)
}

pub fn net_spec(cfg: &LabConfig) -> NetSpec {
    NetSpec::for_env(&cfg.env, &cfg.model)
}

pub fn target_scenario_for(cfg: &LabConfig, task: usize) -> Scenario {
    Scenario {
        goal: cfg.tasks.target_goals[task],
        start: cfg.tasks.target_start,
        nuisance: Nuisance::Fixed(cfg.tasks.target_nuisance),
    }
}

pub fn pretrain_data(cfg: &LabConfig) -> DemoDataset {
    let mut rng = rng_for(cfg.seed, STREAM_PRETRAIN_DEMOS);
    collect_demos(&cfg.env, &pretrain_scenarios(cfg), cfg.tasks.demos_per_task, &mut rng)
}

pub fn target_data(cfg: &LabConfig, task: usize) -> DemoDataset {
    let mut rng = rng_for(cfg.seed, STREAM_TARGET_DEMOS + task as u64);
    collect_demos(&cfg.env, &[target_scenario_for(cfg, task)], cfg.tasks.n_target_demos, &mut rng)
}

pub fn initial_policy(cfg: &LabConfig, stream: u64) -> Checkpoint {
    PolicyNet::init(net_spec(cfg), &mut rng_for(cfg.seed, stream)).to_checkpoint()
}

/// Trains the base policy on the pretraining tasks from a seeded initialization.
pub fn pretrain(cfg: &LabConfig, data: &DemoDataset) -> Result<TrainRun, LabError> {
    cfg.validate()?;
    let stage = super::config::StageConfig {
        baseline: Baseline::TaskFt,
        ..cfg.pretrain.clone()
    };
    let empty = DemoDataset::default();
    let mut rng = rng_for(cfg.seed, STREAM_PRETRAIN_TRAIN);
    let mut run = bc_train(
        &initial_policy(cfg, STREAM_INIT),
        &net_spec(cfg),
        TrainData { target: data, pretrain: &empty },
        &stage,
        cfg.model.lora_rank,
        &mut rng,
    )?;
    label_captures(&mut run, "pretrain");
    Ok(run)
}

/// Finetunes `base` on one target task under the configured baseline. `scratch`
/// ignores `base` and starts from a fresh initialization.
pub fn finetune(
    cfg: &LabConfig,
    base: &Checkpoint,
    target: &DemoDataset,
    pretrain: &DemoDataset,
    stream: u64,
) -> Result<TrainRun, LabError> {
    let init = match cfg.finetune.baseline {
        Baseline::Scratch => initial_policy(cfg, STREAM_SCRATCH_INIT + stream),
        _ => base.clone(),
    };
    let mut rng = rng_for(cfg.seed, STREAM_FINETUNE_TRAIN + stream);
    let mut run = bc_train(
        &init,
        &net_spec(cfg),
        TrainData { target, pretrain },
        &cfg.finetune,
        cfg.model.lora_rank,
        &mut rng,
    )?;
    label_captures(&mut run, cfg.finetune.baseline.label());
    Ok(run)
}

fn label_captures(run: &mut TrainRun, stage: &str) {
    for (step, ckpt) in &mut run.captures {
        let meta = ckpt.metadata_mut();
        meta.insert("step".into(), step.to_string());
        meta.insert("label".into(), format!("{stage}@{step}"));
    }
}

/// Success rates of one capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub id: f64,
    pub ood_val: f64,
    /// Mean over the test shifts.
    pub ood_test: f64,
    pub generalist: f64,
}

/// Evaluates every capture of a run with `eval.curve_episodes` episodes per regime.
pub fn step_curves(cfg: &LabConfig, run: &TrainRun) -> Result<Vec<CurvePoint>, LabError> {
    let seed = eval_seed(cfg);
    run.captures
        .iter()
        .zip(&run.losses)
        .map(|((step, ckpt), &loss)| {
            let r = evaluate(cfg, ckpt, "", cfg.eval.curve_episodes, seed)?;
            Ok(CurvePoint {
                step: *step,
                loss,
                id: r.id,
                ood_val: r.ood_val,
                ood_test: r.ood_test_mean(),
                generalist: r.generalist,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub report: EvalReport,
}

/// Uniform merges at every coefficient, evaluated in every regime.
pub fn alpha_sweep(
    cfg: &LabConfig,
    pre: &Checkpoint,
    ft: &Checkpoint,
    alphas: &[f64],
    episodes: usize,
) -> Result<Vec<AlphaPoint>, LabError> {
    let seed = eval_seed(cfg);
    alphas
        .iter()
        .map(|&alpha| {
            let merged = merge_uniform(pre, ft, alpha)?;
            Ok(AlphaPoint {
                alpha,
                report: evaluate(cfg, &merged, &format!("merged@{alpha}"), episodes, seed)?,
            })
        })
        .collect()
}

/// Picks the coefficient with the best success on the validation shift.
pub fn select_on_val(
    cfg: &LabConfig,
    pre: &Checkpoint,
    ft: &Checkpoint,
    candidates: &[f64],
    episodes: usize,
) -> Result<AlphaSelection, LabError> {
    let seed = eval_seed(cfg);
    Ok(select_alpha(candidates, |alpha| -> Result<f64, LabError> {
        let merged = merge_uniform(pre, ft, alpha)?;
        evaluate_regime(cfg, &merged, Regime::OodVal, episodes, seed)
    })?)
}

/// OOD-test success when one group's coefficient is swept with the others held at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupProbe {
    /// group → `(alpha, mean ood_test success)`.
    pub curves: BTreeMap<String, Vec<(f64, f64)>>,
    /// group → max − min over its curve.
    pub spread: BTreeMap<String, f64>,
}

pub fn group_probe(
    cfg: &LabConfig,
    pre: &Checkpoint,
    ft: &Checkpoint,
    grid: &[f64],
    episodes: usize,
) -> Result<GroupProbe, LabError> {
    let spec = policy_group_spec();
    let seed = eval_seed(cfg);
    let mut curves = BTreeMap::new();
    let mut spread = BTreeMap::new();
    for group in spec.group_ids() {
        let mut curve = Vec::with_capacity(grid.len());
        for &alpha in grid {
            let plan = MergePlan::grouped(spec.clone(), 1.0, [(group.to_string(), alpha)]);
            let merged = merge_grouped(pre, ft, &plan)?;
            let r = evaluate(cfg, &merged, "", episodes, seed)?;
            curve.push((alpha, r.ood_test_mean()));
        }
        let max = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let min = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        spread.insert(group.to_string(), if curve.is_empty() { 0.0 } else { max - min });
        curves.insert(group.to_string(), curve);
    }
    Ok(GroupProbe { curves, spread })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub seed: u64,
    pub baseline: Baseline,
    pub eval_seed: u64,
    pub pretrained: EvalReport,
    pub finetuned: EvalReport,
    pub sweep: Vec<AlphaPoint>,
    pub selection: AlphaSelection,
    pub merged: EvalReport,
    pub curves: Vec<CurvePoint>,
    pub pretrain_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub provenance: BatchProvenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_probe: Option<GroupProbe>,
    pub path: PathReport,
}

impl ProtocolReport {
    pub fn sweep_at(&self, alpha: f64) -> Option<&EvalReport> {
        self.sweep.iter().find(|p| p.alpha == alpha).map(|p| &p.report)
    }
}

/// Everything a protocol run produced, checkpoints included.
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub report: ProtocolReport,
    pub pretrained: Checkpoint,
    pub finetune: TrainRun,
    pub merged: Checkpoint,
}

/// Pretrain → finetune → sweep α → select α on the validation shift → report, plus
/// per-capture curves, the optional group probe, and the finetuning-path analyses.
pub fn run_protocol(cfg: &LabConfig) -> Result<ProtocolRun, LabError> {
    cfg.validate()?;
    let pre_data = pretrain_data(cfg);
    let pre_run = pretrain(cfg, &pre_data)?;
    let pretrained = pre_run.final_checkpoint().clone();
    run_protocol_from(cfg, &pretrained, &pre_data, pre_run.losses)
}

/// Same as [`run_protocol`] but starting from an existing pretrained checkpoint.
pub fn run_protocol_from(
    cfg: &LabConfig,
    pretrained: &Checkpoint,
    pre_data: &DemoDataset,
    pretrain_losses: Vec<f64>,
) -> Result<ProtocolRun, LabError> {
    cfg.validate()?;
    let task = cfg.tasks.target_task;
    let tgt = target_data(cfg, task);
    let ft_run = finetune(cfg, pretrained, &tgt, pre_data, task as u64)?;
    let finetuned = ft_run.final_checkpoint().clone();
    let seed = eval_seed(cfg);
    let episodes = cfg.eval.episodes;

    let pre_report = evaluate(cfg, pretrained, "pretrained", episodes, seed)?;
    let ft_report = evaluate(cfg, &finetuned, cfg.finetune.baseline.label(), episodes, seed)?;
    let sweep = alpha_sweep(cfg, pretrained, &finetuned, &cfg.eval.alpha_grid, episodes)?;
    let selection = select_on_val(cfg, pretrained, &finetuned, &cfg.eval.select_grid, episodes)?;
    let merged = merge_uniform(pretrained, &finetuned, selection.alpha)?;
    let merged_report = evaluate(cfg, &merged, &format!("merged@{}", selection.alpha), episodes, seed)?;
    let curves = step_curves(cfg, &ft_run)?;
    let group_probe = if cfg.eval.group_grid.is_empty() {
        None
    } else {
        Some(group_probe(cfg, pretrained, &finetuned, &cfg.eval.group_grid, episodes)?)
    };

    let mut path = PathReport {
        steps: ft_run.captures.iter().map(|c| c.0).collect(),
        cosines: None,
        pca: None,
        singular_values: None,
        overlay: None,
    };
    if let Ok(traj) = ft_run.trajectory() {
        path = analyze_all(&traj, false);
        let merged_path: Vec<Checkpoint> = cfg
            .eval
            .alpha_grid
            .iter()
            .map(|&a| merge_uniform(pretrained, &finetuned, a))
            .collect::<Result<_, _>>()?;
        // The overlay is defined only when the first capture is the merge origin.
        if ft_run.captures[0].1.bit_eq(pretrained) {
            path.overlay = merged_vs_path_projection(&traj, &merged_path, false).ok();
        }
    }

    Ok(ProtocolRun {
        report: ProtocolReport {
            seed: cfg.seed,
            baseline: cfg.finetune.baseline,
            eval_seed: seed,
            pretrained: pre_report,
            finetuned: ft_report,
            sweep,
            selection,
            merged: merged_report,
            curves,
            pretrain_losses,
            finetune_losses: ft_run.losses.clone(),
            provenance: ft_run.provenance,
            group_probe,
            path,
        },
        pretrained: pretrained.clone(),
        finetune: ft_run,
        merged,
    })
}

/// Outcome of sequential finetuning over `continual.tasks`, merged after each task,
/// next to sequential co-finetuning over the same tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualReport {
    pub alpha: f64,
    pub tasks: Vec<usize>,
    /// ID success of the final merged model on each task, in task order.
    pub merged_id: Vec<f64>,
    /// ID success of the final sequentially co-finetuned model on each task.
    pub cofinetune_id: Vec<f64>,
    /// ID success on each task after every merge step (row = step).
    pub merged_steps: Vec<Vec<f64>>,
    pub cofinetune_steps: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ContinualRun {
    pub report: ContinualReport,
    pub base: Checkpoint,
    /// Checkpoint finetuned on task `n` starting from merge step `n − 1`.
    pub finetuned: Vec<Checkpoint>,
    /// Merge intermediates from `merge_continual` over `finetuned`.
    pub merged: Vec<Checkpoint>,
    pub cofinetuned: Vec<Checkpoint>,
}

fn id_on_tasks(cfg: &LabConfig, ckpt: &Checkpoint, tasks: &[usize]) -> Result<Vec<f64>, LabError> {
    tasks
        .iter()
        .map(|&t| {
            let task_cfg = LabConfig {
                tasks: super::config::TaskConfig {
                    target_task: t,
                    ..cfg.tasks.clone()
                },
                ..cfg.clone()
            };
            evaluate_regime(&task_cfg, ckpt, Regime::Id, cfg.eval.episodes, eval_seed(cfg))
        })
        .collect()
}

/// Finetune on task 1, merge with the running model, finetune the merge on task 2,
/// merge again, and so on. The comparison run co-finetunes sequentially with the
/// same pretraining mix and no merging.
pub fn run_continual(cfg: &LabConfig) -> Result<ContinualRun, LabError> {
    cfg.validate()?;
    let tasks = cfg.continual.tasks.clone();
    if tasks.is_empty() {
        return Err(LabError::Config("continual.tasks is empty".into()));
    }
    let pre_data = pretrain_data(cfg);
    let base = pretrain(cfg, &pre_data)?.final_checkpoint().clone();
    run_continual_from(cfg, &base, &pre_data)
}

pub fn run_continual_from(cfg: &LabConfig, base: &Checkpoint, pre_data: &DemoDataset) -> Result<ContinualRun, LabError> {
    let tasks = cfg.continual.tasks.clone();
    let alpha = cfg.continual.alpha;
    let ft_cfg = |baseline| LabConfig {
        finetune: super::config::StageConfig {
            baseline,
            ..cfg.finetune.clone()
        },
        ..cfg.clone()
    };
    let task_ft = ft_cfg(Baseline::TaskFt);
    let co_ft = ft_cfg(Baseline::CoFt);

    let mut finetuned = Vec::with_capacity(tasks.len());
    let mut running = base.clone();
    let mut cofinetuned = Vec::with_capacity(tasks.len());
    let mut co_running = base.clone();
    for (n, &t) in tasks.iter().enumerate() {
        let data = target_data(cfg, t);
        let stream = 0x100 + n as u64;
        let ft = finetune(&task_ft, &running, &data, pre_data, stream)?
            .final_checkpoint()
            .clone()
            .with_metadata("label", format!("task{t}"));
        running = merge_uniform(&running, &ft, alpha)?;
        finetuned.push(ft);
        co_running = finetune(&co_ft, &co_running, &data, pre_data, 0x200 + n as u64)?
            .final_checkpoint()
            .clone();
        cofinetuned.push(co_running.clone());
    }
    let seq = SkillSequence {
        alpha,
        steps: finetuned
            .iter()
            .zip(&tasks)
            .map(|(c, t)| SkillStep { label: format!("task{t}"), checkpoint: c.clone() })
            .collect(),
    };
    let merged = merge_continual(base, &seq)?;

    let merged_steps = merged.iter().map(|m| id_on_tasks(cfg, m, &tasks)).collect::<Result<Vec<_>, _>>()?;
    let cofinetune_steps = cofinetuned.iter().map(|m| id_on_tasks(cfg, m, &tasks)).collect::<Result<Vec<_>, _>>()?;
    Ok(ContinualRun {
        report: ContinualReport {
            alpha,
            tasks,
            merged_id: merged_steps.last().cloned().unwrap_or_default(),
            cofinetune_id: cofinetune_steps.last().cloned().unwrap_or_default(),
            merged_steps,
            cofinetune_steps,
        },
        base: base.clone(),
        finetuned,
        merged,
        cofinetuned,
    })
}

/// One point of the pretraining-diversity study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub fraction: f64,
    pub n_pretrain_tasks: usize,
    pub start_half_width: f64,
    pub selected_alpha: f64,
    pub pretrained: EvalReport,
    pub finetuned: EvalReport,
    pub merged: EvalReport,
}

/// Config with pretraining diversity scaled by `fraction`: fewer pretraining goals and
/// a narrower pretraining start box. Goals of the smaller set are a prefix of the
/// larger one.
pub fn scaled_config(cfg: &LabConfig, fraction: f64) -> LabConfig {
    let mut out = cfg.clone();
    out.tasks.n_pretrain_tasks = ((cfg.tasks.n_pretrain_tasks as f64 * fraction).round() as usize).max(1);
    out.tasks.pretrain_start.half_width = cfg.tasks.pretrain_start.half_width * fraction;
    out
}

pub fn run_scaling(cfg: &LabConfig, fractions: &[f64]) -> Result<Vec<ScalingPoint>, LabError> {
    fractions
        .iter()
        .map(|&fraction| {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(LabError::Config(format!("diversity fraction {fraction} outside (0, 1]")));
            }
            let scaled = scaled_config(cfg, fraction);
            let run = run_protocol(&scaled)?;
            Ok(ScalingPoint {
                fraction,
                n_pretrain_tasks: scaled.tasks.n_pretrain_tasks,
                start_half_width: scaled.tasks.pretrain_start.half_width,
                selected_alpha: run.report.selection.alpha,
                pretrained: run.report.pretrained,
                finetuned: run.report.finetuned,
                merged: run.report.merged,
            })
        })
        .collect()
}
