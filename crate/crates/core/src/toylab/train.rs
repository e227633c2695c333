//! Minibatch behavioral cloning with bias-corrected adaptive moments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{Baseline, OptimConfig, StageConfig};
use super::env::DemoDataset;
use super::model::{NetSpec, PolicyNet};
use super::LabError;
use crate::pathlab::{PathError, Trajectory};
use crate::tensorstore::Checkpoint;

/// Linear warmup to the peak, then cosine decay to `end_fraction * peak` at
/// `decay_steps`, constant afterwards. `step` counts from zero.
pub fn learning_rate(cfg: &OptimConfig, step: usize) -> f64 {
    let peak = cfg.peak_lr;
    if step < cfg.warmup_steps {
        return peak * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let end = peak * cfg.end_fraction;
    let span = cfg.decay_steps.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    end + (peak - end) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Applies one update. Entries where `trainable` is false are left untouched.
    pub fn step(&mut self, cfg: &OptimConfig, lr: f64, params: &mut [f64], grad: &[f64], trainable: Option<&[bool]>) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            if trainable.is_some_and(|mask| !mask[i]) {
                continue;
            }
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
    }
}

/// Scales `grad` so its norm over trainable entries is at most `max_norm`.
fn clip_grad(grad: &mut [f64], trainable: Option<&[bool]>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad
        .iter()
        .enumerate()
        .filter(|(i, _)| trainable.is_none_or(|m| m[*i]))
        .map(|(_, g)| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Target and pretraining demonstrations for one stage.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub target: &'a DemoDataset,
    pub pretrain: &'a DemoDataset,
}

/// How many samples each source contributed, summed over all batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchProvenance {
    pub target_samples: u64,
    pub pretrain_samples: u64,
}

/// Captures from one stage plus training diagnostics.
#[derive(Debug, Clone)]
pub struct TrainRun {
    /// `(step, checkpoint)` at step 0 and every `checkpoint_every` steps.
    pub captures: Vec<(u64, Checkpoint)>,
    /// Training-objective value at each capture.
    pub losses: Vec<f64>,
    pub provenance: BatchProvenance,
    pub baseline: Baseline,
}

impl TrainRun {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        &self.captures.last().expect("at least the initial capture").1
    }

    pub fn trajectory(&self) -> Result<Trajectory, PathError> {
        Trajectory::new(self.captures.clone())
    }
}

/// Low-rank additive factors on every backbone weight matrix: `W = W0 + B·A`.
struct LoraAdapters {
    /// `(layer index, offset of A, offset of B)` into `params`.
    slots: Vec<(usize, usize, usize)>,
    rank: usize,
    params: Vec<f64>,
}

impl LoraAdapters {
    /// A ~ N(0, 1/n_in), B = 0, so the adapted network starts equal to the base.
    fn new(spec: &NetSpec, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut slots = Vec::new();
        let mut params = Vec::new();
        for (k, l) in spec.layers.iter().enumerate().filter(|(_, l)| l.is_backbone()) {
            let a_off = params.len();
            let std = 1.0 / (l.n_in as f64).sqrt();
            params.extend((0..rank * l.n_in).map(|_| std * rng.sample::<f64, _>(StandardNormal)));
            let b_off = params.len();
            params.extend(std::iter::repeat_n(0.0, l.n_out * rank));
            slots.push((k, a_off, b_off));
        }
        Self { slots, rank, params }
    }

    /// Writes `base + B·A` into `net` for every adapted layer.
    fn materialize(&self, base: &[f64], net: &mut PolicyNet) {
        net.params.copy_from_slice(base);
        for &(k, a_off, b_off) in &self.slots {
            let l = &net.spec.layers[k];
            let (n_in, n_out, r) = (l.n_in, l.n_out, self.rank);
            let w = &mut net.params[l.weight_range()];
            for o in 0..n_out {
                for i in 0..n_in {
                    let mut acc = 0.0;
                    for j in 0..r {
                        acc += self.params[b_off + o * r + j] * self.params[a_off + j * n_in + i];
                    }
                    w[o * n_in + i] += acc;
                }
            }
        }
    }

    /// Chain rule from `dL/dW` to `dL/dA = Bᵀ dW` and `dL/dB = dW Aᵀ`.
    fn backprop(&self, spec: &NetSpec, grad_w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        for &(k, a_off, b_off) in &self.slots {
            let l = &spec.layers[k];
            let (n_in, n_out, r) = (l.n_in, l.n_out, self.rank);
            let gw = &grad_w[l.weight_range()];
            for o in 0..n_out {
                for i in 0..n_in {
                    let g = gw[o * n_in + i];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..r {
                        out[a_off + j * n_in + i] += self.params[b_off + o * r + j] * g;
                        out[b_off + o * r + j] += g * self.params[a_off + j * n_in + i];
                    }
                }
            }
        }
    }
}

/// Indices of one minibatch: `round(mix * batch)` target samples, the rest pretraining.
fn sample_batch(
    data: &TrainData<'_>,
    batch: usize,
    mix: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<(bool, usize)>,
    provenance: &mut BatchProvenance,
) {
    out.clear();
    let mut n_target = (mix * batch as f64).round() as usize;
    if data.pretrain.is_empty() {
        n_target = batch;
    }
    if data.target.is_empty() {
        n_target = 0;
    }
    for _ in 0..n_target {
        out.push((true, rng.random_range(0..data.target.len())));
    }
    for _ in n_target..batch {
        out.push((false, rng.random_range(0..data.pretrain.len())));
    }
    provenance.target_samples += n_target as u64;
    provenance.pretrain_samples += (batch - n_target) as u64;
}

/// Samples used to report the training objective at each capture.
const LOSS_PROBE: usize = 2048;

fn objective(net: &PolicyNet, data: &TrainData<'_>, mix: f64) -> f64 {
    let probe = |d: &DemoDataset| {
        let stride = (d.len() / LOSS_PROBE).max(1);
        net.loss((0..d.len()).step_by(stride).map(|i| (d.obs_row(i), d.action_row(i))))
    };
    let mut total = 0.0;
    if mix > 0.0 && !data.target.is_empty() {
        total += mix * probe(data.target);
    }
    if mix < 1.0 && !data.pretrain.is_empty() {
        total += (1.0 - mix) * probe(data.pretrain);
    }
    total
}

/// Runs one behavioral-cloning stage from `init` and returns the captured trajectory.
///
/// * `task_ft` and `scratch` train every parameter on target data.
/// * `co_ft` draws `cotrain_mix` of each batch from target data, the rest from
///   pretraining data.
/// * `freeze_ft` never updates the `bb.` group.
/// * `lora` keeps every base parameter fixed and trains rank-`lora_rank` factors on
///   the backbone matrices; captures hold the materialized weights.
pub fn bc_train(
    init: &Checkpoint,
    spec: &NetSpec,
    data: TrainData<'_>,
    stage: &StageConfig,
    lora_rank: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainRun, LabError> {
    if data.target.is_empty() && data.pretrain.is_empty() {
        return Err(LabError::Config("training data is empty".into()));
    }
    if stage.checkpoint_every == 0 || stage.gradient_steps % stage.checkpoint_every != 0 {
        return Err(LabError::Config("checkpoint_every must divide gradient_steps".into()));
    }
    let mix = stage.effective_mix();
    let mut net = PolicyNet::from_checkpoint(spec.clone(), init)?;
    let base = net.params.clone();
    let mask = match stage.baseline {
        Baseline::FreezeFt => Some(spec.backbone_mask().into_iter().map(|b| !b).collect::<Vec<_>>()),
        _ => None,
    };
    let mut lora = match stage.baseline {
        Baseline::Lora => Some(LoraAdapters::new(spec, lora_rank.max(1), rng)),
        _ => None,
    };
    let mut adam = Adam::new(lora.as_ref().map_or(spec.n_params, |l| l.params.len()));
    let mut grad = vec![0.0; spec.n_params];
    let mut adapter_grad = lora.as_ref().map(|l| vec![0.0; l.params.len()]);
    let mut batch = Vec::with_capacity(stage.batch_size);
    let mut provenance = BatchProvenance::default();

    let mut captures = vec![(0u64, net.to_checkpoint())];
    let mut losses = vec![objective(&net, &data, mix)];
    for step in 0..stage.gradient_steps {
        sample_batch(&data, stage.batch_size, mix, rng, &mut batch, &mut provenance);
        let items = batch.iter().map(|&(is_target, i)| {
            let d = if is_target { data.target } else { data.pretrain };
            (d.obs_row(i), d.action_row(i))
        });
        let loss = net.loss_and_grad(items, &mut grad);
        if !loss.is_finite() {
            return Err(LabError::NonFiniteLoss { step });
        }
        let lr = learning_rate(&stage.optim, step);
        match (&mut lora, &mut adapter_grad) {
            (Some(lora), Some(ag)) => {
                lora.backprop(spec, &grad, ag);
                clip_grad(ag, None, stage.optim.clip_grad_norm);
                adam.step(&stage.optim, lr, &mut lora.params, ag, None);
                lora.materialize(&base, &mut net);
            }
            _ => {
                clip_grad(&mut grad, mask.as_deref(), stage.optim.clip_grad_norm);
                adam.step(&stage.optim, lr, &mut net.params, &grad, mask.as_deref());
            }
        }
        if (step + 1) % stage.checkpoint_every == 0 {
            let objective = objective(&net, &data, mix);
            if !objective.is_finite() {
                return Err(LabError::NonFiniteLoss { step: step + 1 });
            }
            captures.push(((step + 1) as u64, net.to_checkpoint()));
            losses.push(objective);
        }
    }
    Ok(TrainRun {
        captures,
        losses,
        provenance,
        baseline: stage.baseline,
    })
}
