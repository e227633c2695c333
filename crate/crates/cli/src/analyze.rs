use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use retain_core::pathlab::{
    consecutive_cosines, diff_pca, gram_singular_values, merged_vs_path_projection, PathReport, PcaSummary, Trajectory,
};
use retain_core::{load_checkpoint, Checkpoint};

use crate::error::{CliError, CliResult};
use crate::manifest::ManifestBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Cosine,
    Pca,
    Singvals,
    Overlay,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Directory of trajectory checkpoints, ordered by their `step` metadata.
    #[arg(long)]
    ckpts: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
    /// Mean-center the difference rows before PCA.
    #[arg(long)]
    center: bool,
    /// Directory of merged checkpoints for `overlay`, ordered by `merge.alpha`
    /// (then `step`, then file name).
    #[arg(long)]
    merged: Option<PathBuf>,
}

#[derive(Serialize)]
struct AnalyzeReport {
    mode: Mode,
    #[serde(flatten)]
    report: PathReport,
}

/// Every regular file in `dir`, loaded and sorted by file name.
fn load_dir(dir: &Path, manifest: &mut ManifestBuilder) -> CliResult<Vec<(String, Checkpoint)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && !p.to_string_lossy().ends_with(".manifest.json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            manifest.input(&p);
            let ckpt = load_checkpoint(&p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            Ok((p.display().to_string(), ckpt))
        })
        .collect()
}

fn parse_meta<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str, file: &str) -> CliResult<Option<T>> {
    match ckpt.metadata().get(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::schema(format!("{file}: metadata {key}={v:?} is not a number"))),
    }
}

/// Orders checkpoints by their embedded `step` label. If no file carries one, file-name
/// order is used with steps 0, 1, 2, …; a partial labelling is an error.
fn into_trajectory(files: Vec<(String, Checkpoint)>) -> CliResult<Trajectory> {
    let mut labelled = Vec::with_capacity(files.len());
    let mut missing = 0;
    for (name, ckpt) in &files {
        match parse_meta::<u64>(ckpt, "step", name)? {
            Some(s) => labelled.push(s),
            None => missing += 1,
        }
    }
    let mut captures: Vec<(u64, Checkpoint)> = if missing == files.len() {
        files.into_iter().enumerate().map(|(i, (_, c))| (i as u64, c)).collect()
    } else if missing == 0 {
        labelled.into_iter().zip(files).map(|(s, (_, c))| (s, c)).collect()
    } else {
        return Err(CliError::schema(format!("{missing} checkpoint(s) lack a step label")));
    };
    captures.sort_by_key(|c| c.0);
    Ok(Trajectory::new(captures)?)
}

fn order_merged(files: Vec<(String, Checkpoint)>) -> CliResult<Vec<Checkpoint>> {
    let mut keyed = Vec::with_capacity(files.len());
    for (name, ckpt) in files {
        let key = match parse_meta::<f64>(&ckpt, "merge.alpha", &name)? {
            Some(a) => Some(a),
            None => parse_meta::<u64>(&ckpt, "step", &name)?.map(|s| s as f64),
        };
        keyed.push((key, ckpt));
    }
    if keyed.iter().all(|(k, _)| k.is_some()) {
        keyed.sort_by(|a, b| a.0.unwrap().total_cmp(&b.0.unwrap()));
    }
    Ok(keyed.into_iter().map(|(_, c)| c).collect())
}

pub fn run(args: AnalyzeArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::start();
    let files = load_dir(&args.ckpts, &mut manifest)?;
    let traj = into_trajectory(files)?;
    let mut report = PathReport {
        steps: traj.steps().to_vec(),
        cosines: None,
        pca: None,
        singular_values: None,
        overlay: None,
    };
    match args.mode {
        Mode::Cosine => {
            let c = consecutive_cosines(&traj)?;
            println!("{} cosines, min {:.6}", c.len(), c.iter().copied().fold(f64::INFINITY, f64::min));
            report.cosines = Some(c);
        }
        Mode::Pca => {
            let pca = diff_pca(&traj.diffs(), args.center)?;
            println!("explained variance: {:.6} {:.6}", pca.explained[0], pca.explained[1]);
            report.pca = Some(PcaSummary::from((&pca, args.center)));
        }
        Mode::Singvals => {
            let s = gram_singular_values(&traj.diffs());
            println!("{} Gram values, largest {:.6e}", s.len(), s.first().copied().unwrap_or(0.0));
            report.singular_values = Some(s);
        }
        Mode::Overlay => {
            let dir = args.merged.as_ref().ok_or_else(|| CliError::usage("overlay needs --merged DIR"))?;
            let merged = order_merged(load_dir(dir, &mut manifest)?)?;
            let overlay = merged_vs_path_projection(&traj, &merged, args.center)?;
            println!("projected {} merged checkpoints", overlay.merged_positions.len());
            report.overlay = Some(overlay);
        }
    }
    crate::write_json(&args.out, &AnalyzeReport { mode: args.mode, report })?;
    manifest.output(&args.out);
    manifest.finish(&args.out)?;
    Ok(())
}
