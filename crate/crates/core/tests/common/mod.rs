//! Shared generators and brute-force oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retain_core::{Checkpoint, Dtype, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct SchemaSpec {
    pub entries: Vec<(String, Dtype, Vec<usize>)>,
}

const PREFIXES: [&str; 4] = ["enc.", "bb.0.", "bb.1.", "head."];

/// A random schema of up to 8 tensors, including scalar and zero-sized shapes.
pub fn random_schema(rng: &mut ChaCha8Rng) -> SchemaSpec {
    let n = rng.random_range(1..=8);
    let entries = (0..n)
        .map(|i| {
            let prefix = PREFIXES[rng.random_range(0..PREFIXES.len())];
            let dtype = if rng.random_bool(0.5) { Dtype::F32 } else { Dtype::F64 };
            let rank = rng.random_range(0..=3);
            let shape = (0..rank)
                .map(|_| if rng.random_bool(0.05) { 0 } else { rng.random_range(1..=5) })
                .collect();
            (format!("{prefix}t{i}"), dtype, shape)
        })
        .collect();
    SchemaSpec { entries }
}

/// Values spread over several binades, both signs.
pub fn random_value(rng: &mut ChaCha8Rng) -> f64 {
    let mag = 10f64.powf(rng.random_range(-3.0..3.0));
    if rng.random_bool(0.5) { mag } else { -mag }
}

pub fn random_checkpoint(schema: &SchemaSpec, rng: &mut ChaCha8Rng) -> Checkpoint {
    let tensors: Vec<(String, Tensor)> = schema
        .entries
        .iter()
        .map(|(name, dtype, shape)| {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n).map(|_| random_value(rng)).collect();
            let t = match dtype {
                Dtype::F32 => Tensor::from_f32(shape.clone(), values.iter().map(|&v| v as f32).collect()),
                Dtype::F64 => Tensor::from_f64(shape.clone(), values),
            };
            (name.clone(), t.unwrap())
        })
        .collect();
    Checkpoint::from_tensors(tensors).unwrap()
}

/// Distance between adjacent representable values at `x`, in the tensor's dtype.
pub fn ulp(x: f64, dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F32 => {
            let x = (x as f32).abs();
            let next = f32::from_bits(x.to_bits() + 1);
            f64::from(next - x)
        }
        Dtype::F64 => {
            let x = x.abs();
            f64::from_bits(x.to_bits() + 1) - x
        }
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with their unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> Vec<(f64, Vec<f64>)> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum();
        if off <= 1e-32 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|k| (m[k][k], v.iter().map(|row| row[k]).collect())).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// `Yᵀ Y` for rows `y`.
pub fn covariance(y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = y[0].len();
    (0..d)
        .map(|i| (0..d).map(|j| y.iter().map(|r| r[i] * r[j]).sum()).collect())
        .collect()
}

/// `Y Yᵀ` for rows `y`.
pub fn gram(y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    y.iter()
        .map(|a| y.iter().map(|b| a.iter().zip(b).map(|(x, z)| x * z).sum()).collect())
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Single-tensor F64 checkpoint holding `values`.
pub fn vector_checkpoint(values: &[f64]) -> Checkpoint {
    Checkpoint::from_tensors([("p", Tensor::from_f64(vec![values.len()], values.to_vec()).unwrap())]).unwrap()
}

fn with_header(header: &str, data: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

/// Kind of rejection a malformed file must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Malformed {
    Overlap,
    HeaderLength,
    Duplicate,
}

/// Hand-built invalid files paired with the rejection they must trigger.
pub fn malformed_corpus() -> Vec<(&'static str, Vec<u8>, Malformed)> {
    let mut huge_len = with_header("{}", &[]);
    huge_len[..8].copy_from_slice(&(1u64 << 40).to_le_bytes());
    let mut past_end = with_header(r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#, &[0; 4]);
    past_end[..8].copy_from_slice(&1000u64.to_le_bytes());
    vec![
        (
            "overlapping ranges",
            with_header(
                r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                &[0; 8],
            ),
            Malformed::Overlap,
        ),
        (
            "identical ranges",
            with_header(
                r#"{"a":{"dtype":"F64","shape":[1],"data_offsets":[0,8]},"b":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#,
                &[0; 8],
            ),
            Malformed::Overlap,
        ),
        ("truncated length prefix", vec![1, 2, 3], Malformed::HeaderLength),
        ("length beyond file", huge_len, Malformed::HeaderLength),
        ("length past data", past_end, Malformed::HeaderLength),
        (
            "duplicate names",
            with_header(
                r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
                &[0; 8],
            ),
            Malformed::Duplicate,
        ),
    ]
}
