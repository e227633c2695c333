//! Weight-space interpolation of a pretrained and a finetuned checkpoint.
//!
//! Three engines share one elementwise kernel:
//!
//! * [`merge_uniform`]: `(1 - alpha) * pre + alpha * ft` on every tensor.
//! * [`merge_grouped`]: the same interpolation with a coefficient per parameter group.
//! * [`merge_continual`]: repeated uniform merges, each folding the next finetuned
//!   checkpoint into the running result.
//!
//! Tensors are independent work items and are processed in parallel; the per-element
//! arithmetic is fixed so the output does not depend on scheduling.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grouping::{partition, GroupError, GroupSpec};
use crate::tensorstore::{combine, Checkpoint, StoreError, Tensor, TensorData};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("schema mismatch ({total} differing tensors, first: {names:?})")]
    SchemaMismatch { names: Vec<String>, total: usize },
    #[error("merge coefficient {0} outside [0, 1]; enable extrapolation to allow it")]
    AlphaOutOfRange(f64),
    #[error("merge coefficient must be finite, got {0}")]
    NonFiniteAlpha(f64),
    #[error("invalid merge plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Partition(#[from] GroupError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("continual merge step {step} ({label}): {source}")]
    ContinualStep {
        step: usize,
        label: String,
        #[source]
        source: Box<MergeError>,
    },
    #[error("empty skill sequence")]
    EmptySequence,
    #[error("no candidate coefficients")]
    NoCandidates,
    #[error("evaluation failed at alpha={alpha}: {message}")]
    Evaluator { alpha: f64, message: String },
}

pub type Result<T> = std::result::Result<T, MergeError>;

/// Per-group merge coefficients.
///
/// JSON form:
/// `{"default_alpha": f, "group_alphas": {id: f}, "group_spec": {...}, "allow_extrapolation": b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub default_alpha: f64,
    #[serde(default)]
    pub group_alphas: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_spec: Option<GroupSpec>,
    #[serde(default)]
    pub allow_extrapolation: bool,
    /// When set, tensors of this group take their "finetuned" operand from the
    /// pretrained checkpoint, which pins them to pretrained values for any coefficient.
    /// Off by default; exists to reproduce the printed form of the group-wise merge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_operand_from_pre: Option<String>,
}

impl MergePlan {
    pub fn uniform(alpha: f64) -> Self {
        Self {
            default_alpha: alpha,
            group_alphas: BTreeMap::new(),
            group_spec: None,
            allow_extrapolation: false,
            action_operand_from_pre: None,
        }
    }

    pub fn grouped(spec: GroupSpec, default_alpha: f64, alphas: impl IntoIterator<Item = (String, f64)>) -> Self {
        Self {
            default_alpha,
            group_alphas: alphas.into_iter().collect(),
            group_spec: Some(spec),
            allow_extrapolation: false,
            action_operand_from_pre: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.default_alpha, self.allow_extrapolation)?;
        for &a in self.group_alphas.values() {
            check_alpha(a, self.allow_extrapolation)?;
        }
        match &self.group_spec {
            Some(spec) => {
                spec.validate()?;
                for id in self.group_alphas.keys().chain(self.action_operand_from_pre.iter()) {
                    if !spec.contains_group(id) {
                        return Err(MergeError::InvalidPlan(format!(
                            "group {id:?} is not declared in the group spec"
                        )));
                    }
                }
            }
            None if !self.group_alphas.is_empty() || self.action_operand_from_pre.is_some() => {
                return Err(MergeError::InvalidPlan(
                    "group coefficients given without a group spec".into(),
                ));
            }
            None => {}
        }
        Ok(())
    }

    pub fn alpha_for(&self, group: &str) -> f64 {
        self.group_alphas.get(group).copied().unwrap_or(self.default_alpha)
    }
}

fn check_alpha(alpha: f64, allow_extrapolation: bool) -> Result<()> {
    if !alpha.is_finite() {
        return Err(MergeError::NonFiniteAlpha(alpha));
    }
    if !allow_extrapolation && !(0.0..=1.0).contains(&alpha) {
        return Err(MergeError::AlphaOutOfRange(alpha));
    }
    Ok(())
}

fn check_schema(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    let diffs = a.schema_differences(b);
    if diffs.is_empty() {
        return Ok(());
    }
    Err(MergeError::SchemaMismatch {
        total: diffs.len(),
        names: diffs.into_iter().take(3).collect(),
    })
}

/// `(1 - alpha) * pre + alpha * ft` for one element.
///
/// For alpha in [0, 1] the result is clamped to the closed interval spanned by the two
/// operands, which absorbs the final rounding of the f64 accumulation.
#[inline]
fn lerp(pre: f64, ft: f64, alpha: f64, clamp: bool) -> f64 {
    let v = combine(1.0 - alpha, pre, alpha, ft);
    if clamp && v.is_finite() {
        v.clamp(pre.min(ft), pre.max(ft))
    } else {
        v
    }
}

/// Interpolates two tensors of identical shape and dtype with one rounding per element.
pub fn interpolate_tensor(pre: &Tensor, ft: &Tensor, alpha: f64) -> Result<Tensor> {
    if pre.shape() != ft.shape() {
        return Err(StoreError::ShapeMismatch(pre.shape().to_vec(), ft.shape().to_vec()).into());
    }
    let clamp = (0.0..=1.0).contains(&alpha);
    let data = match (pre.data(), ft.data()) {
        (TensorData::F32(p), TensorData::F32(f)) => TensorData::F32(
            p.iter()
                .zip(f)
                .map(|(&x, &y)| lerp(f64::from(x), f64::from(y), alpha, clamp) as f32)
                .collect(),
        ),
        (TensorData::F64(p), TensorData::F64(f)) => TensorData::F64(
            p.iter()
                .zip(f)
                .map(|(&x, &y)| lerp(x, y, alpha, clamp))
                .collect(),
        ),
        _ => return Err(StoreError::DtypeMismatch(pre.dtype(), ft.dtype()).into()),
    };
    Ok(Tensor::new(pre.shape().to_vec(), data)?)
}

/// Merges tensor by tensor with `alpha_of(name)`; `pin_to_pre(name)` swaps the
/// finetuned operand for the pretrained one.
fn merge_with<A, P>(pre: &Checkpoint, ft: &Checkpoint, alpha_of: A, pin_to_pre: P) -> Result<Checkpoint>
where
    A: Fn(&str) -> f64 + Sync,
    P: Fn(&str) -> bool + Sync,
{
    check_schema(pre, ft)?;
    let pairs: Vec<(&str, &Tensor, &Tensor)> = pre
        .tensors()
        .map(|(name, p)| (name, p, ft.get(name).expect("schema checked")))
        .collect();
    let merged = pairs
        .par_iter()
        .map(|&(name, p, f)| {
            let operand = if pin_to_pre(name) { p } else { f };
            Ok((name.to_string(), interpolate_tensor(p, operand, alpha_of(name))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint::from_tensors(merged)?)
}

fn source_label(ckpt: &Checkpoint) -> String {
    ckpt.metadata()
        .get("label")
        .cloned()
        .unwrap_or_else(|| "unlabeled".to_string())
}

pub fn merge_uniform(pre: &Checkpoint, ft: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    merge_uniform_ext(pre, ft, alpha, false)
}

/// Like [`merge_uniform`], optionally allowing coefficients outside [0, 1].
pub fn merge_uniform_ext(
    pre: &Checkpoint,
    ft: &Checkpoint,
    alpha: f64,
    allow_extrapolation: bool,
) -> Result<Checkpoint> {
    check_alpha(alpha, allow_extrapolation)?;
    let mut out = merge_with(pre, ft, |_| alpha, |_| false)?;
    let meta = out.metadata_mut();
    meta.insert("merge.kind".into(), "uniform".into());
    meta.insert("merge.alpha".into(), alpha.to_string());
    meta.insert("merge.pre".into(), source_label(pre));
    meta.insert("merge.ft".into(), source_label(ft));
    Ok(out)
}

pub fn merge_grouped(pre: &Checkpoint, ft: &Checkpoint, plan: &MergePlan) -> Result<Checkpoint> {
    plan.validate()?;
    let Some(spec) = &plan.group_spec else {
        return merge_uniform_ext(pre, ft, plan.default_alpha, plan.allow_extrapolation);
    };
    check_schema(pre, ft)?;
    let parts = partition(pre, spec)?;
    let group = |name: &str| parts.group_of(name).expect("partition is total");
    let pinned = plan.action_operand_from_pre.as_deref();
    let mut out = merge_with(
        pre,
        ft,
        |name| plan.alpha_for(group(name)),
        |name| Some(group(name)) == pinned,
    )?;
    let coefficients: BTreeMap<&str, f64> = spec.group_ids().map(|g| (g, plan.alpha_for(g))).collect();
    let meta = out.metadata_mut();
    meta.insert("merge.kind".into(), "grouped".into());
    meta.insert("merge.alpha".into(), plan.default_alpha.to_string());
    meta.insert(
        "merge.group_alphas".into(),
        serde_json::to_string(&coefficients).expect("map of floats serializes"),
    );
    meta.insert("merge.pre".into(), source_label(pre));
    meta.insert("merge.ft".into(), source_label(ft));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SkillStep {
    pub label: String,
    pub checkpoint: Checkpoint,
}

/// Finetuned checkpoints to fold in order, with one coefficient for every step.
#[derive(Debug, Clone)]
pub struct SkillSequence {
    pub alpha: f64,
    pub steps: Vec<SkillStep>,
}

/// Returns every intermediate `merged_n = (1 - alpha) * merged_{n-1} + alpha * ft_n`,
/// starting from `merged_0 = base`.
pub fn merge_continual(base: &Checkpoint, seq: &SkillSequence) -> Result<Vec<Checkpoint>> {
    if seq.steps.is_empty() {
        return Err(MergeError::EmptySequence);
    }
    check_alpha(seq.alpha, false)?;
    let mut out: Vec<Checkpoint> = Vec::with_capacity(seq.steps.len());
    for (i, step) in seq.steps.iter().enumerate() {
        let prev = out.last().unwrap_or(base);
        let mut merged = merge_uniform(prev, &step.checkpoint, seq.alpha).map_err(|e| {
            MergeError::ContinualStep {
                step: i + 1,
                label: step.label.clone(),
                source: Box::new(e),
            }
        })?;
        merged.metadata_mut().insert("merge.step".into(), (i + 1).to_string());
        merged.metadata_mut().insert("merge.task".into(), step.label.clone());
        out.push(merged);
    }
    Ok(out)
}

/// Outcome of a coefficient search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSelection {
    pub alpha: f64,
    /// `(alpha, score)` in candidate order.
    pub scores: Vec<(f64, f64)>,
}

/// Coefficients searched on a validation scene when nothing else is given.
pub const DEFAULT_ALPHA_GRID: [f64; 3] = [0.25, 0.5, 0.75];

/// Finer grid for cheap evaluators.
pub const FINE_ALPHA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Evaluates every candidate and returns the best-scoring one. Ties go to the larger
/// coefficient.
pub fn select_alpha<F, E>(candidates: &[f64], mut evaluator: F) -> Result<AlphaSelection>
where
    F: FnMut(f64) -> std::result::Result<f64, E>,
    E: std::fmt::Display,
{
    if candidates.is_empty() {
        return Err(MergeError::NoCandidates);
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for &alpha in candidates {
        let score = evaluator(alpha).map_err(|e| MergeError::Evaluator {
            alpha,
            message: e.to_string(),
        })?;
        if score.is_nan() {
            return Err(MergeError::Evaluator {
                alpha,
                message: "score is NaN".into(),
            });
        }
        scores.push((alpha, score));
    }
    let (alpha, _) = scores
        .iter()
        .copied()
        .reduce(|best, cand| {
            if cand.1 > best.1 || (cand.1 == best.1 && cand.0 > best.0) {
                cand
            } else {
                best
            }
        })
        .expect("non-empty");
    Ok(AlphaSelection { alpha, scores })
}
