//! Feed-forward policy with three parameter groups: `enc.`, `bb.` and `head.`.
//!
//! ```text
//! obs ─ enc ─ act ─ bb.0 ─ act ─ … ─ bb.{depth-1} ─ act ─ head ─ action / max_action
//! ```
//!
//! Parameters live in one flat f64 buffer; each layer owns a weight block (row-major,
//! `[out, in]`) followed by its bias.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{Activation, EnvConfig, ModelConfig};
use super::env::{clip_action, observe, Policy, TaskSpec};
use super::LabError;
use crate::grouping::GroupSpec;
use crate::tensorstore::{Checkpoint, Dtype, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub activated: bool,
}

impl LayerSpec {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.n_in * self.n_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.n_out
    }

    pub fn is_backbone(&self) -> bool {
        self.name.starts_with("bb.")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub obs_dim: usize,
    pub activation: Activation,
    pub layers: Vec<LayerSpec>,
    pub n_params: usize,
}

impl NetSpec {
    pub fn new(obs_dim: usize, model: &ModelConfig) -> Self {
        let mut dims = vec![("enc".to_string(), obs_dim, model.hidden, true)];
        for i in 0..model.depth {
            dims.push((format!("bb.{i}"), model.hidden, model.hidden, true));
        }
        dims.push(("head".to_string(), model.hidden, 2, false));
        let mut offset = 0;
        let layers = dims
            .into_iter()
            .map(|(name, n_in, n_out, activated)| {
                let l = LayerSpec {
                    name,
                    n_in,
                    n_out,
                    weight_offset: offset,
                    bias_offset: offset + n_in * n_out,
                    activated,
                };
                offset += n_in * n_out + n_out;
                l
            })
            .collect();
        Self {
            obs_dim,
            activation: model.activation,
            layers,
            n_params: offset,
        }
    }

    pub fn for_env(env: &EnvConfig, model: &ModelConfig) -> Self {
        Self::new(env.obs_dim(), model)
    }

    /// `true` for every parameter in the `bb.` group.
    pub fn backbone_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_params];
        for l in self.layers.iter().filter(|l| l.is_backbone()) {
            mask[l.weight_range()].iter_mut().for_each(|m| *m = true);
            mask[l.bias_range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    fn width(&self) -> usize {
        self.layers.iter().map(|l| l.n_out.max(l.n_in)).max().unwrap_or(0)
    }
}

/// Group spec matching the policy's tensor names.
pub fn policy_group_spec() -> GroupSpec {
    GroupSpec::from_prefixes([("enc", "enc."), ("bb", "bb."), ("head", "head.")])
        .expect("static spec is valid")
}

#[inline]
fn activate(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Tanh => x.tanh(),
        Activation::Identity => x,
    }
}

/// Derivative expressed through the activation's output.
#[inline]
fn activate_grad(a: Activation, y: f64) -> f64 {
    match a {
        Activation::Tanh => 1.0 - y * y,
        Activation::Identity => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub spec: NetSpec,
    pub params: Vec<f64>,
}

/// Per-sample activations kept for the backward pass.
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &NetSpec) -> Self {
        Self {
            acts: vec![Vec::with_capacity(spec.width()); spec.layers.len() + 1],
            delta: Vec::with_capacity(spec.width()),
            next: Vec::with_capacity(spec.width()),
        }
    }
}

impl PolicyNet {
    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(spec: NetSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut params = vec![0.0; spec.n_params];
        for l in &spec.layers {
            let std = 1.0 / (l.n_in as f64).sqrt();
            for p in &mut params[l.weight_range()] {
                *p = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Self { spec, params }
    }

    pub fn zeros(spec: NetSpec) -> Self {
        let params = vec![0.0; spec.n_params];
        Self { spec, params }
    }

    pub fn forward_into(&self, obs: &[f64], ws: &mut Workspace) -> [f64; 2] {
        debug_assert_eq!(obs.len(), self.spec.obs_dim);
        ws.acts[0].clear();
        ws.acts[0].extend_from_slice(obs);
        for (k, l) in self.spec.layers.iter().enumerate() {
            let (head, tail) = ws.acts.split_at_mut(k + 1);
            let input = &head[k];
            let out = &mut tail[0];
            out.clear();
            let w = &self.params[l.weight_range()];
            let b = &self.params[l.bias_range()];
            for o in 0..l.n_out {
                let row = &w[o * l.n_in..(o + 1) * l.n_in];
                let z = b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
                out.push(if l.activated { activate(self.spec.activation, z) } else { z });
            }
        }
        let y = ws.acts.last().expect("at least one layer");
        [y[0], y[1]]
    }

    pub fn forward(&self, obs: &[f64]) -> [f64; 2] {
        self.forward_into(obs, &mut Workspace::new(&self.spec))
    }

    /// Accumulates `d(0.5 * ‖f(obs) − target‖²) / dθ` into `grad` and returns the loss.
    pub fn accumulate_grad(&self, obs: &[f64], target: [f64; 2], grad: &mut [f64], ws: &mut Workspace) -> f64 {
        let y = self.forward_into(obs, ws);
        let err = [y[0] - target[0], y[1] - target[1]];
        ws.delta.clear();
        ws.delta.extend_from_slice(&err);
        for (k, l) in self.spec.layers.iter().enumerate().rev() {
            let input = &ws.acts[k];
            if l.activated {
                let output = &ws.acts[k + 1];
                for (d, &y) in ws.delta.iter_mut().zip(output) {
                    *d *= activate_grad(self.spec.activation, y);
                }
            }
            let w = &self.params[l.weight_range()];
            {
                let gw = &mut grad[l.weight_range()];
                for (o, &d) in ws.delta.iter().enumerate() {
                    if d != 0.0 {
                        let row = &mut gw[o * l.n_in..(o + 1) * l.n_in];
                        row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
                    }
                }
            }
            grad[l.bias_range()].iter_mut().zip(&ws.delta).for_each(|(g, d)| *g += d);
            if k > 0 {
                ws.next.clear();
                ws.next.resize(l.n_in, 0.0);
                for (o, &d) in ws.delta.iter().enumerate() {
                    let row = &w[o * l.n_in..(o + 1) * l.n_in];
                    ws.next.iter_mut().zip(row).for_each(|(n, a)| *n += d * a);
                }
                std::mem::swap(&mut ws.delta, &mut ws.next);
            }
        }
        0.5 * (err[0] * err[0] + err[1] * err[1])
    }

    /// Mean loss over `batch` (pairs of observation row and target) and its gradient.
    pub fn loss_and_grad<'a, I>(&self, batch: I, grad: &mut [f64]) -> f64
    where
        I: IntoIterator<Item = (&'a [f64], [f64; 2])>,
    {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut ws = Workspace::new(&self.spec);
        let mut total = 0.0;
        let mut n = 0usize;
        for (obs, target) in batch {
            total += self.accumulate_grad(obs, target, grad, &mut ws);
            n += 1;
        }
        if n > 0 {
            let inv = 1.0 / n as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            total *= inv;
        }
        total
    }

    pub fn loss<'a, I>(&self, batch: I) -> f64
    where
        I: IntoIterator<Item = (&'a [f64], [f64; 2])>,
    {
        let mut ws = Workspace::new(&self.spec);
        let mut total = 0.0;
        let mut n = 0usize;
        for (obs, target) in batch {
            let y = self.forward_into(obs, &mut ws);
            total += 0.5 * ((y[0] - target[0]).powi(2) + (y[1] - target[1]).powi(2));
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for l in &self.spec.layers {
            let w = Tensor::from_f64(vec![l.n_out, l.n_in], self.params[l.weight_range()].to_vec())
                .expect("layer block matches its shape");
            let b = Tensor::from_f64(vec![l.n_out], self.params[l.bias_range()].to_vec())
                .expect("bias block matches its shape");
            ckpt.insert(format!("{}.weight", l.name), w).expect("unique layer names");
            ckpt.insert(format!("{}.bias", l.name), b).expect("unique layer names");
        }
        ckpt
    }

    /// Loads parameters from a checkpoint whose schema matches `spec` exactly.
    pub fn from_checkpoint(spec: NetSpec, ckpt: &Checkpoint) -> Result<Self, LabError> {
        let expected = Self::zeros(spec.clone()).to_checkpoint();
        let diffs = expected.schema_differences(ckpt);
        if !diffs.is_empty() {
            return Err(LabError::Schema(format!(
                "checkpoint does not match the policy schema; differing tensors: {:?}",
                diffs.iter().take(3).collect::<Vec<_>>()
            )));
        }
        let mut params = vec![0.0; spec.n_params];
        for l in &spec.layers {
            let w = ckpt.get(&format!("{}.weight", l.name)).expect("schema checked");
            let b = ckpt.get(&format!("{}.bias", l.name)).expect("schema checked");
            params[l.weight_range()].copy_from_slice(&w.to_f64_vec());
            params[l.bias_range()].copy_from_slice(&b.to_f64_vec());
        }
        Ok(Self { spec, params })
    }

    pub fn dtype() -> Dtype {
        Dtype::F64
    }
}

/// A trained network used as a deterministic policy (mean action).
pub struct NetPolicy<'a> {
    pub net: &'a PolicyNet,
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Option<Workspace>)> = const { std::cell::RefCell::new((Vec::new(), None)) };
}

impl Policy for NetPolicy<'_> {
    fn act(&self, env: &EnvConfig, pos: [f64; 2], task: &TaskSpec, _rng: &mut ChaCha8Rng) -> [f64; 2] {
        SCRATCH.with(|cell| {
            let (obs, ws) = &mut *cell.borrow_mut();
            observe(env, pos, task, obs);
            if ws.as_ref().is_none_or(|w| w.acts.len() != self.net.spec.layers.len() + 1) {
                *ws = Some(Workspace::new(&self.net.spec));
            }
            let y = self.net.forward_into(obs, ws.as_mut().expect("initialized above"));
            clip_action(env, [y[0] * env.max_action, y[1] * env.max_action])
        })
    }
}

/// Relative error `|a − n| / max(|a| + |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Compares the analytic gradient of the mean batch loss with central finite
/// differences on up to `max_params` randomly chosen parameters. Returns the largest
/// relative error.
pub fn gradient_check(
    net: &PolicyNet,
    batch: &[(Vec<f64>, [f64; 2])],
    max_params: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let items = || batch.iter().map(|(o, t)| (o.as_slice(), *t));
    let mut grad = vec![0.0; net.spec.n_params];
    net.loss_and_grad(items(), &mut grad);
    let n = net.spec.n_params;
    let indices: Vec<usize> = if n <= max_params {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, max_params).into_vec()
    };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = probe.params[i];
        probe.params[i] = orig + FD_STEP;
        let plus = probe.loss(items());
        probe.params[i] = orig - FD_STEP;
        let minus = probe.loss(items());
        probe.params[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    worst
}
