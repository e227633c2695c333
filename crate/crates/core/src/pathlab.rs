//! Parameter-space analyses of a finetuning trajectory.
//!
//! A trajectory `θ_0 … θ_n` is reduced to its difference rows `X_i = θ_i − θ_{i−1}`
//! (the matrix `Y`, one row per step). From `Y` we compute
//!
//! * cosines between consecutive rows, which are all 1 on a straight path;
//! * the top two principal directions of the rows, with each row's coordinates;
//! * the spectrum of the Gram matrix `Y Yᵀ`, which has exactly one non-zero value on
//!   a straight path.
//!
//! Everything goes through the `n × n` Gram matrix: `n` is the number of captures
//! (tens) while `d` is the parameter count (possibly millions). The eigenvalues of
//! `Y Yᵀ` are the squared singular values of `Y`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorstore::{flatten_checkpoint, Checkpoint};

/// Difference vectors with a norm below this are treated as "no change".
pub const DEGENERATE_NORM: f64 = 1e-30;

/// Eigenvalues below this fraction of the largest are numerically zero.
const RELATIVE_RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum PathError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("degenerate difference vector ending at step {step}: norm below {DEGENERATE_NORM:e}")]
    Degenerate { step: u64 },
    #[error("rank-0 difference matrix")]
    RankZero,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

pub type Result<T> = std::result::Result<T, PathError>;

/// Checkpoints captured along a finetuning run, with strictly increasing step labels.
#[derive(Debug, Clone)]
pub struct Trajectory {
    steps: Vec<u64>,
    checkpoints: Vec<Checkpoint>,
}

impl Trajectory {
    pub fn new(captures: Vec<(u64, Checkpoint)>) -> Result<Self> {
        if captures.len() < 2 {
            return Err(PathError::TooFew {
                what: "checkpoints in a trajectory",
                needed: 2,
                got: captures.len(),
            });
        }
        if captures.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(PathError::InvalidTrajectory(
                "step labels must be strictly increasing".into(),
            ));
        }
        let first = &captures[0].1;
        for (step, c) in &captures[1..] {
            let diffs = first.schema_differences(c);
            if !diffs.is_empty() {
                return Err(PathError::SchemaMismatch(format!(
                    "checkpoint at step {step} differs from the first capture in {diffs:?}"
                )));
            }
        }
        let (steps, checkpoints) = captures.into_iter().unzip();
        Ok(Self { steps, checkpoints })
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn first(&self) -> &Checkpoint {
        &self.checkpoints[0]
    }

    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("non-empty by construction")
    }

    pub fn flattened(&self) -> Vec<Vec<f64>> {
        use rayon::prelude::*;
        self.checkpoints.par_iter().map(flatten_checkpoint).collect()
    }

    pub fn diffs(&self) -> DiffMatrix {
        let flat = self.flattened();
        DiffMatrix {
            rows: flat.windows(2).map(|w| sub(&w[1], &w[0])).collect(),
            steps: self.steps[1..].to_vec(),
        }
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows `X_1 … X_n` of consecutive differences, each labelled with the step it ends at.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffMatrix {
    rows: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl DiffMatrix {
    /// Builds from explicit rows, labelled 1..=n.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(d) = rows.first().map(Vec::len) {
            if rows.iter().any(|r| r.len() != d) {
                return Err(PathError::InvalidTrajectory("rows differ in length".into()));
            }
        }
        let steps = (1..=rows.len() as u64).collect();
        Ok(Self { rows, steps })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn gram(&self) -> DMatrix<f64> {
        gram_of(&self.rows)
    }
}

fn gram_of(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = dot(&rows[i], &rows[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
fn sorted_eigen(g: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(g);
    let mut pairs: Vec<(f64, Vec<f64>)> = eig
        .eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .map(|(&l, v)| (l, v.iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// `cos(X_{i+1}, X_i)` for every consecutive pair of difference rows.
pub fn consecutive_cosines(traj: &Trajectory) -> Result<Vec<f64>> {
    if traj.len() < 3 {
        return Err(PathError::TooFew {
            what: "checkpoints for cosines",
            needed: 3,
            got: traj.len(),
        });
    }
    diff_cosines(&traj.diffs())
}

pub fn diff_cosines(diffs: &DiffMatrix) -> Result<Vec<f64>> {
    let norms: Vec<f64> = diffs.rows.iter().map(|r| dot(r, r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n < DEGENERATE_NORM) {
        return Err(PathError::Degenerate { step: diffs.steps[i] });
    }
    Ok(diffs
        .rows
        .windows(2)
        .zip(norms.windows(2))
        .map(|(r, n)| (dot(&r[1], &r[0]) / (n[1] * n[0])).clamp(-1.0, 1.0))
        .collect())
}

/// Top-two principal directions of the difference rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffPca {
    /// Two unit vectors of length `d`; a numerically absent direction is all zeros.
    pub components: Vec<Vec<f64>>,
    /// Coordinates of each (centered, if requested) row in the two directions.
    pub projections: Vec<[f64; 2]>,
    /// `σ_k² / Σ σ_j²` for the two directions.
    pub explained: [f64; 2],
    /// Row mean subtracted before fitting, when centering was requested.
    pub mean: Option<Vec<f64>>,
}

impl DiffPca {
    /// Coordinates of an arbitrary difference vector, centered like the fitted rows.
    pub fn project_diff(&self, v: &[f64]) -> [f64; 2] {
        match &self.mean {
            Some(m) => self.project_raw(&sub(v, m)),
            None => self.project_raw(v),
        }
    }

    /// Coordinates of a vector with no centering applied.
    pub fn project_raw(&self, v: &[f64]) -> [f64; 2] {
        [dot(&self.components[0], v), dot(&self.components[1], v)]
    }
}

/// Fits the top-two principal directions of `diffs`, optionally mean-centering the rows.
///
/// Each direction's sign is fixed so its largest-magnitude coordinate is positive.
pub fn diff_pca(diffs: &DiffMatrix, center: bool) -> Result<DiffPca> {
    if diffs.n() < 2 {
        return Err(PathError::TooFew {
            what: "difference rows for PCA",
            needed: 2,
            got: diffs.n(),
        });
    }
    let d = diffs.d();
    let (rows, mean) = if center {
        let n = diffs.n() as f64;
        let mut mean = vec![0.0; d];
        for r in &diffs.rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        (diffs.rows.iter().map(|r| sub(r, &mean)).collect::<Vec<_>>(), Some(mean))
    } else {
        (diffs.rows.clone(), None)
    };

    let total: f64 = rows.iter().map(|r| dot(r, r)).sum();
    let scale: f64 = diffs.rows.iter().map(|r| dot(r, r)).sum();
    if total <= 0.0 || total <= 1e-24 * scale {
        return Err(PathError::RankZero);
    }
    let pairs = sorted_eigen(gram_of(&rows));
    let top = pairs[0].0.max(0.0);

    let mut components = Vec::with_capacity(2);
    let mut explained = [0.0; 2];
    for k in 0..2 {
        let Some((lambda, u)) = pairs.get(k) else {
            components.push(vec![0.0; d]);
            continue;
        };
        let lambda = lambda.max(0.0);
        explained[k] = (lambda / total).clamp(0.0, 1.0);
        if lambda <= RELATIVE_RANK_TOL * top {
            components.push(vec![0.0; d]);
            continue;
        }
        // v = Yᵀ u / ‖Yᵀ u‖
        let mut v = vec![0.0; d];
        for (r, &w) in rows.iter().zip(u) {
            v.iter_mut().zip(r).for_each(|(acc, x)| *acc += w * x);
        }
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        fix_sign(&mut v);
        components.push(v);
    }
    let projections = rows
        .iter()
        .map(|r| [dot(&components[0], r), dot(&components[1], r)])
        .collect();
    Ok(DiffPca {
        components,
        projections,
        explained,
        mean,
    })
}

fn fix_sign(v: &mut [f64]) {
    let pivot = v
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |best, (i, &x)| if x.abs() > best.1 { (i, x.abs()) } else { best })
        .0;
    if v.get(pivot).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Singular values of `Y Yᵀ` in descending order (one per difference row).
///
/// For the symmetric positive semi-definite Gram matrix these are its eigenvalues,
/// i.e. the squared singular values of `Y`.
pub fn gram_singular_values(diffs: &DiffMatrix) -> Vec<f64> {
    if diffs.n() == 0 {
        return Vec::new();
    }
    let mut values: Vec<f64> = SymmetricEigen::new(diffs.gram())
        .eigenvalues
        .iter()
        .map(|l| l.abs())
        .collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// Trajectory and merged-model coordinates in the PCA basis of the trajectory diffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathOverlay {
    pub explained: [f64; 2],
    /// Projections of the trajectory's difference rows.
    pub trajectory_diffs: Vec<[f64; 2]>,
    /// Projections of the merged sequence's consecutive differences, starting from `θ_0`.
    pub merged_diffs: Vec<[f64; 2]>,
    /// Projections of `θ_i − θ_0` along the trajectory, `i = 0 … n`.
    pub trajectory_positions: Vec<[f64; 2]>,
    /// Projections of `merged_j − θ_0`.
    pub merged_positions: Vec<[f64; 2]>,
}

/// Projects a sequence of merged checkpoints into the PCA basis of a trajectory.
///
/// The merged sequence is treated as a path starting at the trajectory's first
/// capture; its differences are taken at the same cadence as the trajectory's.
pub fn merged_vs_path_projection(
    traj: &Trajectory,
    merged: &[Checkpoint],
    center: bool,
) -> Result<PathOverlay> {
    for (i, m) in merged.iter().enumerate() {
        let diffs = traj.first().schema_differences(m);
        if !diffs.is_empty() {
            return Err(PathError::SchemaMismatch(format!(
                "merged checkpoint {i} differs from the trajectory in {diffs:?}"
            )));
        }
    }
    let flat = traj.flattened();
    let diffs = DiffMatrix {
        rows: flat.windows(2).map(|w| sub(&w[1], &w[0])).collect(),
        steps: traj.steps[1..].to_vec(),
    };
    let pca = diff_pca(&diffs, center)?;
    let origin = &flat[0];
    let merged_flat: Vec<Vec<f64>> = merged.iter().map(flatten_checkpoint).collect();

    let mut prev = origin;
    let mut merged_diffs = Vec::with_capacity(merged_flat.len());
    for m in &merged_flat {
        merged_diffs.push(pca.project_diff(&sub(m, prev)));
        prev = m;
    }
    Ok(PathOverlay {
        explained: pca.explained,
        trajectory_diffs: pca.projections.clone(),
        merged_diffs,
        trajectory_positions: flat.iter().map(|t| pca.project_raw(&sub(t, origin))).collect(),
        merged_positions: merged_flat.iter().map(|m| pca.project_raw(&sub(m, origin))).collect(),
    })
}

/// Everything the path analyses produce for one trajectory, in report form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub steps: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosines: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pca: Option<PcaSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub singular_values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlay: Option<PathOverlay>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub projections: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    pub centered: bool,
}

impl From<(&DiffPca, bool)> for PcaSummary {
    fn from((pca, centered): (&DiffPca, bool)) -> Self {
        Self {
            projections: pca.projections.clone(),
            explained: pca.explained,
            centered,
        }
    }
}

/// Runs every analysis that the trajectory is long enough for.
pub fn analyze_all(traj: &Trajectory, center: bool) -> PathReport {
    let diffs = traj.diffs();
    PathReport {
        steps: traj.steps().to_vec(),
        cosines: consecutive_cosines(traj).ok(),
        pca: diff_pca(&diffs, center).ok().map(|p| (&p, center).into()),
        singular_values: Some(gram_singular_values(&diffs)),
        overlay: None,
    }
}
