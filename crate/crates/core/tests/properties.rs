//! Property tests for the container, grouping, merge and pathlab invariants.

mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use retain_core::grouping::{partition, GroupSpec};
use retain_core::merge::{merge_continual, merge_grouped, merge_uniform, MergePlan, SkillSequence, SkillStep};
use retain_core::pathlab::{consecutive_cosines, diff_pca, gram_singular_values, DiffMatrix, Trajectory};
use retain_core::tensorstore::axpy_tensors;
use retain_core::{flatten_checkpoint, Checkpoint, Dtype, Tensor};

fn spec() -> GroupSpec {
    GroupSpec::from_prefixes([("enc", "enc."), ("bb", "bb."), ("head", "head.")]).unwrap()
}

fn pair(seed: u64) -> (Checkpoint, Checkpoint, rand_chacha::ChaCha8Rng) {
    let mut rng = rng(seed);
    let schema = random_schema(&mut rng);
    let a = random_checkpoint(&schema, &mut rng);
    let b = random_checkpoint(&schema, &mut rng);
    (a, b, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trip(seed in any::<u64>()) {
        let (ckpt, _, _) = pair(seed);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert!(back.bit_eq(&ckpt));
    }

    #[test]
    fn flatten_is_injective_within_a_schema(seed in any::<u64>()) {
        let (a, b, _) = pair(seed);
        let (fa, fb) = (flatten_checkpoint(&a), flatten_checkpoint(&b));
        let same = fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits());
        prop_assert_eq!(same, a.bit_eq(&b));
        prop_assert!(a.schema_differences(&b).is_empty());
    }

    #[test]
    fn axpy_endpoints_and_symmetry(seed in any::<u64>(), c1 in -2.0f64..2.0, c2 in -2.0f64..2.0) {
        let (a, b, _) = pair(seed);
        for (name, t1) in a.tensors() {
            let t2 = b.get(name).unwrap();
            prop_assert!(axpy_tensors(1.0, t1, 0.0, t2).unwrap().bit_eq(t1));
            prop_assert!(axpy_tensors(0.0, t1, 1.0, t2).unwrap().bit_eq(t2));
            let x = axpy_tensors(c1, t1, c2, t2).unwrap();
            let y = axpy_tensors(c2, t2, c1, t1).unwrap();
            match t1.dtype() {
                Dtype::F64 => prop_assert!(x.bit_eq(&y)),
                Dtype::F32 => for i in 0..x.len() {
                    let (u, v) = (x.get_f64(i), y.get_f64(i));
                    prop_assert!((u - v).abs() <= ulp(u.abs().max(v.abs()), Dtype::F32));
                },
            }
        }
    }

    #[test]
    fn partition_is_total_and_deterministic(seed in any::<u64>()) {
        let (a, _, _) = pair(seed);
        let p = partition(&a, &spec()).unwrap();
        prop_assert_eq!(p.len(), a.len());
        let q = partition(&a, &spec()).unwrap();
        prop_assert!(p.iter().eq(q.iter()));
    }

    #[test]
    fn merge_endpoints_reflection_convexity(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let (pre, ft, _) = pair(seed);
        prop_assert!(merge_uniform(&pre, &ft, 0.0).unwrap().bit_eq(&pre));
        prop_assert!(merge_uniform(&pre, &ft, 1.0).unwrap().bit_eq(&ft));
        let m = merge_uniform(&pre, &ft, alpha).unwrap();
        let r = merge_uniform(&ft, &pre, 1.0 - alpha).unwrap();
        for (name, t) in m.tensors() {
            let (p, f, rt) = (pre.get(name).unwrap(), ft.get(name).unwrap(), r.get(name).unwrap());
            for i in 0..t.len() {
                let (x, y, v) = (p.get_f64(i), f.get_f64(i), t.get_f64(i));
                prop_assert!(v >= x.min(y) && v <= x.max(y));
                prop_assert!((v - rt.get_f64(i)).abs() <= ulp(x.abs().max(y.abs()), t.dtype()));
            }
        }
    }

    #[test]
    fn constant_group_plan_equals_uniform(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let (pre, ft, _) = pair(seed);
        let plan = MergePlan::grouped(spec(), alpha, [("bb".to_string(), alpha)]);
        let g = merge_grouped(&pre, &ft, &plan).unwrap();
        let u = merge_uniform(&pre, &ft, alpha).unwrap();
        for (name, t) in g.tensors() {
            prop_assert!(t.bit_eq(u.get(name).unwrap()));
        }
    }

    #[test]
    fn merge_is_independent_of_thread_count(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let (pre, ft, _) = pair(seed);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = single.install(|| merge_uniform(&pre, &ft, alpha).unwrap());
        let b = many.install(|| merge_uniform(&pre, &ft, alpha).unwrap());
        prop_assert!(a.bit_eq(&b));
    }

    #[test]
    fn continual_matches_closed_form(
        base in -100.0f64..100.0,
        skills in prop::collection::vec(-100.0f64..100.0, 1..8),
        alpha in 0.0f64..=1.0,
    ) {
        let scalar = |v: f64| Checkpoint::from_tensors([("w", Tensor::scalar_f64(v))]).unwrap();
        let seq = SkillSequence {
            alpha,
            steps: skills.iter().map(|&v| SkillStep { label: "t".into(), checkpoint: scalar(v) }).collect(),
        };
        let out = merge_continual(&scalar(base), &seq).unwrap();
        for n in 1..=skills.len() {
            let mut expected = (1.0 - alpha).powi(n as i32) * base;
            for (k, s) in skills[..n].iter().enumerate() {
                expected += alpha * (1.0 - alpha).powi((n - 1 - k) as i32) * s;
            }
            prop_assert!((out[n - 1].get("w").unwrap().get_f64(0) - expected).abs() <= 1e-12 * 100.0);
        }
    }

    #[test]
    fn cosines_are_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = rng(seed);
        let n = rng.random_range(3..=6);
        let d = rng.random_range(1..=6);
        let points = random_matrix(&mut rng, n, d);
        let traj = |scale: f64| {
            Trajectory::new(
                points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i as u64, vector_checkpoint(&p.iter().map(|x| x * scale).collect::<Vec<_>>())))
                    .collect(),
            )
            .unwrap()
        };
        let a = consecutive_cosines(&traj(1.0));
        let b = consecutive_cosines(&traj(c));
        if let (Ok(a), Ok(b)) = (a, b) {
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pca_and_gram_match_jacobi(seed in any::<u64>(), center in any::<bool>()) {
        let mut rng = rng(seed);
        let n = rng.random_range(2..=6);
        let d = rng.random_range(1..=6);
        let y = random_matrix(&mut rng, n, d);
        let diffs = DiffMatrix::from_rows(y.clone()).unwrap();

        let oracle = jacobi_eigen(&gram(&y));
        let lmax = oracle[0].0.abs();
        for (v, (o, _)) in gram_singular_values(&diffs).iter().zip(&oracle) {
            prop_assert!((v - o.abs()).abs() <= 1e-9 * lmax);
        }

        let pca = diff_pca(&diffs, center).unwrap();
        prop_assert!(pca.explained[0] >= pca.explained[1] && pca.explained[1] >= 0.0);
        prop_assert!(pca.explained[0] + pca.explained[1] <= 1.0 + 1e-12);
        let rows: Vec<Vec<f64>> = match &pca.mean {
            Some(m) => y.iter().map(|r| r.iter().zip(m).map(|(a, b)| a - b).collect()).collect(),
            None => y.clone(),
        };
        let cov = jacobi_eigen(&covariance(&rows));
        let top = cov[0].0.max(f64::MIN_POSITIVE);
        for k in 0..2.min(d) {
            let (lambda, u) = &cov[k];
            let next = cov.get(k + 1).map_or(0.0, |c| c.0);
            let prev = if k == 0 { f64::INFINITY } else { cov[k - 1].0 };
            if *lambda <= 1e-3 * top || lambda - next <= 1e-3 * top || prev - lambda <= 1e-3 * top {
                continue;
            }
            let c = &pca.components[k];
            let sign = c.iter().zip(u).map(|(a, b)| a * b).sum::<f64>().signum();
            for (a, b) in c.iter().zip(u) {
                prop_assert!((a - sign * b).abs() <= 1e-9);
            }
        }
    }
}
