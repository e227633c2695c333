//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p retain-core --test acceptance`. Failures are
//! reported but only fail the process when `RETAIN_ACCEPTANCE_STRICT=1` is set.

mod common;

use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use retain_core::grouping::{Group, GroupSpec, UnmatchedPolicy};
use retain_core::merge::{merge_continual, merge_grouped, merge_uniform, MergePlan, SkillSequence, SkillStep};
use retain_core::pathlab::{consecutive_cosines, diff_pca, gram_singular_values, DiffMatrix, Trajectory};
use retain_core::tensorstore::StoreError;
use retain_core::toylab::config::{Activation, ModelConfig};
use retain_core::toylab::protocol::{run_continual, run_protocol, run_scaling, ProtocolReport};
use retain_core::toylab::{gradient_check, LabConfig, NetSpec, PolicyNet};
use retain_core::{Checkpoint, Tensor};

const MERGE_CASES: u64 = 100;
const ROUND_TRIPS: u64 = 200;
const PCA_MATRICES: u64 = 50;
const CONTINUAL_TOL: f64 = 1e-12;
const ORACLE_TOL: f64 = 1e-9;
const COLINEAR_TOL: f64 = 1e-12;
/// Gram values below this fraction of the largest count as zero.
const NEGLIGIBLE: f64 = 1e-12;
/// Eigenvectors are compared only where the eigenvalue is separated by this fraction of the largest.
const GAP: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;
const MIN_ID_GAIN: f64 = 0.2;
const MIN_INTERIOR_MARGIN: f64 = 0.05;
const RETAIN_RATIO: f64 = 0.9;
const FORGET_RATIO: f64 = 0.7;

const REFERENCE: &str = include_str!("../../../configs/reference.json");

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok { Ok(()) } else { Err(msg.into()) }
}

fn reference() -> LabConfig {
    let cfg: LabConfig = serde_json::from_str(REFERENCE).expect("reference config parses");
    cfg.validate().expect("reference config is valid");
    cfg
}

// ---------------------------------------------------------------- 1: merge algebra

fn merge_algebra() -> Outcome {
    for case in 0..MERGE_CASES {
        let mut rng = rng(0x3e76e + case);
        let schema = random_schema(&mut rng);
        let pre = random_checkpoint(&schema, &mut rng);
        let ft = random_checkpoint(&schema, &mut rng);
        let tag = |what: &str| format!("case {case}: {what}");

        check(merge_uniform(&pre, &ft, 0.0).unwrap().bit_eq(&pre), tag("alpha=0 is not bitwise pre"))?;
        check(merge_uniform(&pre, &ft, 1.0).unwrap().bit_eq(&ft), tag("alpha=1 is not bitwise ft"))?;

        let alpha: f64 = rng.random_range(0.0..=1.0);
        let m = merge_uniform(&pre, &ft, alpha).unwrap();
        let r = merge_uniform(&ft, &pre, 1.0 - alpha).unwrap();
        for (name, mt) in m.tensors() {
            let (p, f, rt) = (pre.get(name).unwrap(), ft.get(name).unwrap(), r.get(name).unwrap());
            for i in 0..mt.len() {
                let (x, y, v, w) = (p.get_f64(i), f.get_f64(i), mt.get_f64(i), rt.get_f64(i));
                let scale = ulp(x.abs().max(y.abs()), mt.dtype());
                check((v - w).abs() <= scale, tag(&format!("reflection {name}[{i}]: {v} vs {w}")))?;
                check(v >= x.min(y) && v <= x.max(y), tag(&format!("convexity {name}[{i}]: {v} outside [{x}, {y}]")))?;
            }
        }

        // A group split into finer groups with the same coefficients merges identically.
        let a_enc: f64 = rng.random_range(0.0..=1.0);
        let a_bb: f64 = rng.random_range(0.0..=1.0);
        let a_head: f64 = rng.random_range(0.0..=1.0);
        let group = |id: &str, prefixes: &[&str]| Group {
            id: id.into(),
            prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
        };
        let coarse = GroupSpec::new(
            vec![group("enc", &["enc."]), group("bb", &["bb."]), group("head", &["head."])],
            UnmatchedPolicy::Error,
        )
        .unwrap();
        let fine = GroupSpec::new(
            vec![
                group("enc", &["enc."]),
                group("bb0", &["bb.0."]),
                group("bb1", &["bb.1."]),
                group("head", &["head."]),
            ],
            UnmatchedPolicy::Error,
        )
        .unwrap();
        let coarse_plan = MergePlan::grouped(
            coarse,
            0.5,
            [("enc".into(), a_enc), ("bb".into(), a_bb), ("head".into(), a_head)],
        );
        let fine_plan = MergePlan::grouped(
            fine,
            0.5,
            [("enc".into(), a_enc), ("bb0".into(), a_bb), ("bb1".into(), a_bb), ("head".into(), a_head)],
        );
        let c = merge_grouped(&pre, &ft, &coarse_plan).unwrap();
        let f = merge_grouped(&pre, &ft, &fine_plan).unwrap();
        for (name, t) in c.tensors() {
            check(t.bit_eq(f.get(name).unwrap()), tag(&format!("refinement changed {name}")))?;
        }
        let same = MergePlan::grouped(
            coarse_plan.group_spec.clone().unwrap(),
            alpha,
            [("enc".into(), alpha), ("bb".into(), alpha), ("head".into(), alpha)],
        );
        let g = merge_grouped(&pre, &ft, &same).unwrap();
        for (name, t) in g.tensors() {
            check(t.bit_eq(m.get(name).unwrap()), tag(&format!("equal-alpha plan differs from uniform at {name}")))?;
        }

        // Repeated merging against the closed form on a scalar checkpoint.
        let n = rng.random_range(1..=6);
        let a: f64 = rng.random_range(0.0..=1.0);
        let base = random_value(&mut rng);
        let skills: Vec<f64> = (0..n).map(|_| random_value(&mut rng)).collect();
        let seq = SkillSequence {
            alpha: a,
            steps: skills
                .iter()
                .enumerate()
                .map(|(k, &v)| SkillStep { label: format!("t{k}"), checkpoint: scalar(v) })
                .collect(),
        };
        let merged = merge_continual(&scalar(base), &seq).unwrap();
        for (j, m) in merged.iter().enumerate() {
            let steps = j + 1;
            let mut expected = (1.0 - a).powi(steps as i32) * base;
            for (k, &s) in skills[..steps].iter().enumerate() {
                expected += a * (1.0 - a).powi((steps - 1 - k) as i32) * s;
            }
            let got = m.get("w").unwrap().get_f64(0);
            let mag = base.abs().max(skills.iter().fold(0.0f64, |acc, s| acc.max(s.abs())));
            check(
                (got - expected).abs() <= CONTINUAL_TOL * mag.max(1.0),
                tag(&format!("continual step {steps}: {got} vs closed form {expected}")),
            )?;
        }
    }
    Ok(format!("{MERGE_CASES} randomized schemas"))
}

fn scalar(v: f64) -> Checkpoint {
    Checkpoint::from_tensors([("w", Tensor::scalar_f64(v))]).unwrap()
}

// ---------------------------------------------------------------- 2: container

fn container_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for case in 0..ROUND_TRIPS {
        let mut rng = rng(0xc0de + case);
        let ckpt = match case {
            0 => Checkpoint::new(),
            1 => scalar(-0.0),
            2 => Checkpoint::from_tensors([("e", Tensor::from_f32(vec![0, 3], vec![]).unwrap())]).unwrap(),
            _ => random_checkpoint(&random_schema(&mut rng), &mut rng).with_metadata("step", case.to_string()),
        };
        let path = dir.path().join(format!("c{case}.safetensors"));
        retain_core::save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
        let back = retain_core::load_checkpoint(&path).map_err(|e| e.to_string())?;
        check(back.bit_eq(&ckpt), format!("case {case}: round trip is not bit-identical"))?;
        check(back.metadata() == ckpt.metadata(), format!("case {case}: metadata changed"))?;
    }
    let corpus = malformed_corpus();
    for (what, bytes, kind) in &corpus {
        let err = match Checkpoint::from_bytes(bytes) {
            Ok(_) => return Err(format!("{what}: accepted")),
            Err(e) => e,
        };
        let ok = match kind {
            Malformed::Overlap => matches!(err, StoreError::OverlappingRanges { .. }),
            Malformed::HeaderLength => matches!(err, StoreError::HeaderLength(_)),
            Malformed::Duplicate => matches!(err, StoreError::DuplicateName(_)),
        };
        check(ok, format!("{what}: wrong error {err}"))?;
    }
    Ok(format!("{ROUND_TRIPS} round trips, {} malformed files rejected", corpus.len()))
}

// ---------------------------------------------------------------- 3: pathlab oracle

fn pathlab_oracle() -> Outcome {
    let mut rng = rng(0x9a7b);
    for case in 0..PCA_MATRICES {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(1..=6);
        let y = random_matrix(&mut rng, n, d);
        let diffs = DiffMatrix::from_rows(y.clone()).map_err(|e| e.to_string())?;

        let gram_oracle = jacobi_eigen(&gram(&y));
        let lmax = gram_oracle[0].0.abs().max(f64::MIN_POSITIVE);
        let values = gram_singular_values(&diffs);
        check(values.len() == n, format!("case {case}: {} Gram values for {n} rows", values.len()))?;
        for (k, (v, (o, _))) in values.iter().zip(&gram_oracle).enumerate() {
            check(
                (v - o.abs()).abs() <= ORACLE_TOL * lmax,
                format!("case {case}: Gram value {k}: {v} vs oracle {o}"),
            )?;
        }

        let pca = diff_pca(&diffs, false).map_err(|e| e.to_string())?;
        let cov = jacobi_eigen(&covariance(&y));
        let total: f64 = cov.iter().map(|(l, _)| l.max(0.0)).sum();
        for k in 0..2.min(d) {
            let (lambda, u) = &cov[k];
            check(
                (pca.explained[k] - lambda.max(0.0) / total).abs() <= ORACLE_TOL,
                format!("case {case}: explained[{k}] {} vs {}", pca.explained[k], lambda / total),
            )?;
            // Components are only defined where the eigenvalue is simple and non-zero.
            let next = cov.get(k + 1).map_or(0.0, |c| c.0);
            let prev = if k == 0 { f64::INFINITY } else { cov[k - 1].0 };
            if *lambda <= GAP * lmax || (lambda - next) <= GAP * lmax || (prev - lambda) <= GAP * lmax {
                continue;
            }
            let c = &pca.components[k];
            let dotp: f64 = c.iter().zip(u).map(|(a, b)| a * b).sum();
            let err = c.iter().zip(u).map(|(a, b)| (a - dotp.signum() * b).abs()).fold(0.0, f64::max);
            check(err <= ORACLE_TOL, format!("case {case}: component {k} differs by {err}"))?;
        }
    }

    let dir: Vec<f64> = vec![0.3, -1.2, 0.7, 2.0];
    let points: Vec<(u64, Checkpoint)> = [0.0, 1.0, 2.5, 2.75, 6.0]
        .iter()
        .enumerate()
        .map(|(i, &t)| (i as u64 * 10, vector_checkpoint(&dir.iter().map(|d| 1.0 + t * d).collect::<Vec<_>>())))
        .collect();
    let traj = Trajectory::new(points).map_err(|e| e.to_string())?;
    let cos = consecutive_cosines(&traj).map_err(|e| e.to_string())?;
    check(
        cos.iter().all(|c| (c - 1.0).abs() <= COLINEAR_TOL),
        format!("colinear cosines {cos:?}"),
    )?;
    let values = gram_singular_values(&traj.diffs());
    let significant = values.iter().filter(|&&v| v > NEGLIGIBLE * values[0]).count();
    check(significant == 1, format!("colinear Gram values {values:?}"))?;
    Ok(format!("{PCA_MATRICES} matrices within {ORACLE_TOL:e}; colinear path has one Gram value"))
}

// ---------------------------------------------------------------- 4: gradients

fn gradient_matrix() -> Outcome {
    let mut rng = rng(0x6ead);
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for activation in [Activation::Tanh, Activation::Identity] {
        for depth in 0..=3 {
            for hidden in [1, 4, 16, 64] {
                for obs_dim in [1, 10] {
                    let model = ModelConfig { hidden, depth, activation, lora_rank: 1 };
                    let net = PolicyNet::init(NetSpec::new(obs_dim, &model), &mut rng);
                    let batch: Vec<(Vec<f64>, [f64; 2])> = (0..8)
                        .map(|_| {
                            let obs = (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                            (obs, [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                        })
                        .collect();
                    let err = gradient_check(&net, &batch, 300, &mut rng);
                    check(
                        err <= GRAD_TOL,
                        format!("{activation:?} depth {depth} hidden {hidden} obs {obs_dim}: {err:e}"),
                    )?;
                    worst = worst.max(err);
                    configs += 1;
                }
            }
        }
    }
    Ok(format!("{configs} configs, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 5-10: toy lab

fn ood(r: &retain_core::toylab::EvalReport) -> f64 {
    r.ood_test_mean()
}

fn overfitting(cfg: &LabConfig, report: &ProtocolReport) -> Outcome {
    let warmup = cfg.finetune.optim.warmup_steps as u64;
    let first = report
        .curves
        .iter()
        .find(|c| c.step >= warmup)
        .ok_or("no capture after warmup")?;
    let last = report.curves.last().unwrap();
    let best_id = report.curves.iter().map(|c| c.id).fold(0.0, f64::max);
    let gain = best_id - report.pretrained.id;
    let summary = format!(
        "generalist {:.3} at step {} -> {:.3} at step {}; best ID {best_id:.3} vs pretrained {:.3}",
        first.generalist, first.step, last.generalist, last.step, report.pretrained.id
    );
    check(last.generalist < first.generalist, format!("no generalist drop: {summary}"))?;
    check(gain >= MIN_ID_GAIN, format!("ID gain {gain:.3} < {MIN_ID_GAIN}: {summary}"))?;
    Ok(summary)
}

fn interior_maximum(report: &ProtocolReport) -> Outcome {
    let at = |a: f64| report.sweep_at(a).map(ood).ok_or(format!("alpha {a} missing from the sweep"));
    let (lo, hi) = (at(0.0)?, at(1.0)?);
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for k in 1..=9 {
        let a = k as f64 / 10.0;
        let v = at(a)?;
        if v > best.1 {
            best = (a, v);
        }
    }
    let selected = ood(&report.merged);
    let summary = format!(
        "ood_test alpha=0 {lo:.3}, alpha=1 {hi:.3}, best interior {:.3} at {}; selected alpha {} gives {selected:.3}",
        best.1, best.0, report.selection.alpha
    );
    check(best.1 > lo, format!("interior does not beat alpha=0: {summary}"))?;
    check(best.1 >= hi + MIN_INTERIOR_MARGIN, format!("margin over alpha=1 below {MIN_INTERIOR_MARGIN}: {summary}"))?;
    check(selected > hi, format!("selected alpha does not beat alpha=1: {summary}"))?;
    Ok(summary)
}

fn retention(report: &ProtocolReport) -> Outcome {
    let pre = report.pretrained.generalist;
    let merged = report.merged.generalist;
    let ft = report.finetuned.generalist;
    let summary = format!("generalist pretrained {pre:.3}, merged {merged:.3}, finetuned {ft:.3}");
    check(merged >= RETAIN_RATIO * pre, format!("merged below {RETAIN_RATIO} x pretrained: {summary}"))?;
    check(ft < FORGET_RATIO * pre, format!("finetuned not below {FORGET_RATIO} x pretrained: {summary}"))?;
    Ok(summary)
}

fn data_scaling(cfg: &LabConfig) -> Outcome {
    let points = run_scaling(cfg, &[0.25, 1.0]).map_err(|e| e.to_string())?;
    let values: Vec<f64> = points.iter().map(|p| ood(&p.merged)).collect();
    let summary = format!("merged ood_test at 25% {:.3}, at 100% {:.3}", values[0], values[1]);
    check(values[1] >= values[0], format!("decreasing with diversity: {summary}"))?;
    Ok(summary)
}

fn continual(cfg: &LabConfig) -> Outcome {
    let run = run_continual(cfg).map_err(|e| e.to_string())?;
    let alpha = cfg.continual.alpha;
    let mut prev = run.base.clone();
    for (k, (ft, merged)) in run.finetuned.iter().zip(&run.merged).enumerate() {
        let unrolled = merge_uniform(&prev, ft, alpha).map_err(|e| e.to_string())?;
        check(unrolled.bit_eq(merged), format!("step {}: intermediate differs from the unrolled recursion", k + 1))?;
        for (name, t) in merged.tensors() {
            let (p, f) = (prev.get(name).unwrap(), ft.get(name).unwrap());
            for i in 0..t.len() {
                let expected = (1.0 - alpha) * p.get_f64(i) + alpha * f.get_f64(i);
                check(
                    (t.get_f64(i) - expected).abs() <= CONTINUAL_TOL * expected.abs().max(1.0),
                    format!("step {}: {name}[{i}] off the recursion", k + 1),
                )?;
            }
        }
        prev = merged.clone();
    }
    let (m, c) = (run.report.merged_id[0], run.report.cofinetune_id[0]);
    let summary = format!("task-1 ID after both tasks: merged {m:.3}, sequential co-FT {c:.3}");
    check(m > c, format!("merging does not retain task 1 better: {summary}"))?;
    Ok(summary)
}

fn group_importance(report: &ProtocolReport) -> Outcome {
    let probe = report.group_probe.as_ref().ok_or("reference config has no group grid")?;
    let spread = |g: &str| probe.spread.get(g).copied().ok_or(format!("no probe for group {g}"));
    let (enc, bb, head) = (spread("enc")?, spread("bb")?, spread("head")?);
    let summary = format!("ood_test spread enc {enc:.3}, bb {bb:.3}, head {head:.3}");
    check(bb > enc && bb > head, format!("backbone is not the most sensitive group: {summary}"))?;
    Ok(summary)
}

fn main() {
    let mut failures = 0;
    let mut report_line = |id: usize, name: &str, elapsed: Duration, budget: Duration, outcome: Outcome| {
        let timed = if elapsed > budget {
            Err(format!("took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()))
        } else {
            outcome
        };
        match timed {
            Ok(msg) => println!("PASS {id:>2} {name}: {msg} ({:.1}s)", elapsed.as_secs_f64()),
            Err(msg) => {
                failures += 1;
                println!("FAIL {id:>2} {name}: {msg} ({:.1}s)", elapsed.as_secs_f64());
            }
        }
    };
    let timed = |f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = f();
        (out, t.elapsed())
    };
    let secs = Duration::from_secs;

    let (o, t) = timed(&mut merge_algebra);
    report_line(1, "merge algebra", t, secs(10), o);
    let (o, t) = timed(&mut container_round_trip);
    report_line(2, "container round trip", t, secs(30), o);
    let (o, t) = timed(&mut pathlab_oracle);
    report_line(3, "pathlab oracle", t, secs(10), o);
    let (o, t) = timed(&mut gradient_matrix);
    report_line(4, "gradient check", t, secs(30), o);

    let cfg = reference();
    let start = Instant::now();
    let protocol = run_protocol(&cfg);
    let protocol_time = start.elapsed();
    match protocol {
        Err(e) => {
            for (id, name) in [(5, "overfitting"), (6, "interior maximum"), (7, "retention"), (10, "group importance")] {
                report_line(id, name, protocol_time, secs(600), Err(format!("protocol failed: {e}")));
            }
        }
        Ok(run) => {
            let r = &run.report;
            report_line(5, "overfitting", protocol_time, secs(300), overfitting(&cfg, r));
            report_line(6, "interior maximum", protocol_time, secs(600), interior_maximum(r));
            report_line(7, "retention", protocol_time, secs(600), retention(r));
            report_line(10, "group importance", protocol_time, secs(900), group_importance(r));
        }
    }
    let (o, t) = timed(&mut || data_scaling(&cfg));
    report_line(8, "data scaling", t, secs(900), o);
    let (o, t) = timed(&mut || continual(&cfg));
    report_line(9, "continual", t, secs(900), o);

    if failures == 0 {
        println!("all acceptance criteria passed");
        return;
    }
    println!("{failures} acceptance criteria failed");
    if std::env::var("RETAIN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
