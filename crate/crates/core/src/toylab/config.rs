use serde::{Deserialize, Serialize};

use super::LabError;

/// Point-mass environment constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Success when the position comes within this distance of the goal.
    pub success_radius: f64,
    pub horizon: usize,
    /// Per-axis bound on the velocity command.
    pub max_action: f64,
    pub expert_gain: f64,
    pub expert_noise: f64,
    /// Number of nuisance codes appended to observations as a one-hot block.
    pub n_nuisance: usize,
    /// Positions are kept inside `[-bound, bound]²`.
    pub position_bound: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            success_radius: 0.05,
            horizon: 60,
            max_action: 0.1,
            expert_gain: 0.3,
            expert_noise: 0.01,
            n_nuisance: 6,
            position_bound: 1.5,
        }
    }
}

impl EnvConfig {
    pub fn obs_dim(&self) -> usize {
        4 + self.n_nuisance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartBox {
    pub center: [f64; 2],
    pub half_width: f64,
}

/// A variation of the target task: where episodes start, which nuisance code is shown,
/// and how far the goal is moved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub start: StartBox,
    pub nuisance: usize,
    #[serde(default)]
    pub goal_offset: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    /// Goals of the tasks that are finetuned on; `target_task` picks the active one.
    pub target_goals: Vec<[f64; 2]>,
    pub target_task: usize,
    pub target_nuisance: usize,
    pub target_start: StartBox,
    pub n_target_demos: usize,
    pub n_pretrain_tasks: usize,
    pub demos_per_task: usize,
    /// Pretraining goals are drawn from `[-ex, ex] × [-ey, ey]`.
    pub goal_extent: [f64; 2],
    /// Pretraining goals keep at least this distance from every target goal.
    pub goal_exclusion: f64,
    pub pretrain_start: StartBox,
    pub ood_val: Shift,
    pub ood_test: Vec<Shift>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            target_goals: vec![[0.55, 0.55], [-0.55, 0.55]],
            target_task: 0,
            target_nuisance: 0,
            target_start: StartBox { center: [-0.5, -0.5], half_width: 0.1 },
            n_target_demos: 20,
            n_pretrain_tasks: 16,
            demos_per_task: 20,
            goal_extent: [0.9, 0.9],
            goal_exclusion: 0.4,
            pretrain_start: StartBox { center: [0.0, 0.0], half_width: 1.0 },
            ood_val: Shift {
                start: StartBox { center: [0.5, -0.5], half_width: 0.1 },
                nuisance: 1,
                goal_offset: [0.0, 0.0],
            },
            ood_test: vec![
                Shift {
                    start: StartBox { center: [-0.6, 0.3], half_width: 0.1 },
                    nuisance: 2,
                    goal_offset: [0.0, 0.0],
                },
                Shift {
                    start: StartBox { center: [0.0, -0.7], half_width: 0.1 },
                    nuisance: 3,
                    goal_offset: [0.0, 0.0],
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Number of hidden-to-hidden backbone layers.
    pub depth: usize,
    pub activation: Activation,
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            depth: 2,
            activation: Activation::Tanh,
            lora_rank: 4,
        }
    }
}

/// Adaptive-moment optimizer with linear warmup and cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub peak_lr: f64,
    /// Final learning rate as a fraction of the peak.
    pub end_fraction: f64,
    pub warmup_steps: usize,
    /// Step at which the cosine reaches its end value (warmup included).
    pub decay_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            end_fraction: 0.1,
            warmup_steps: 100,
            decay_steps: 3000,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-10,
            clip_grad_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    TaskFt,
    CoFt,
    FreezeFt,
    Lora,
    Scratch,
}

impl Baseline {
    pub fn label(self) -> &'static str {
        match self {
            Baseline::TaskFt => "task_ft",
            Baseline::CoFt => "co_ft",
            Baseline::FreezeFt => "freeze_ft",
            Baseline::Lora => "lora",
            Baseline::Scratch => "scratch",
        }
    }
}

/// One training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub gradient_steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    /// Fraction of every batch drawn from target data when co-finetuning.
    pub cotrain_mix: f64,
    pub baseline: Baseline,
    pub optim: OptimConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            gradient_steps: 1000,
            batch_size: 64,
            checkpoint_every: 50,
            cotrain_mix: 0.8,
            baseline: Baseline::TaskFt,
            optim: OptimConfig::default(),
        }
    }
}

impl StageConfig {
    /// Share of each batch drawn from target data under this stage's baseline.
    pub fn effective_mix(&self) -> f64 {
        match self.baseline {
            Baseline::CoFt => self.cotrain_mix,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Episodes per regime for the per-capture curves.
    pub curve_episodes: usize,
    /// Coefficients swept and reported.
    pub alpha_grid: Vec<f64>,
    /// Coefficients the validation scene chooses from.
    pub select_grid: Vec<f64>,
    /// Per-group coefficients for the enc/bb/head grid; empty skips the grid.
    pub group_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            curve_episodes: 100,
            alpha_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            select_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            group_grid: Vec::new(),
        }
    }
}

/// Sequential finetune-then-merge over several target tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualConfig {
    pub alpha: f64,
    /// Indices into `tasks.target_goals`, in training order.
    pub tasks: Vec<usize>,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self { alpha: 0.5, tasks: vec![0, 1] }
    }
}

/// Complete description of a lab experiment; every result is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub tasks: TaskConfig,
    pub model: ModelConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub eval: EvalConfig,
    pub continual: ContinualConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvConfig::default(),
            tasks: TaskConfig::default(),
            model: ModelConfig::default(),
            pretrain: StageConfig {
                gradient_steps: 3000,
                checkpoint_every: 500,
                ..StageConfig::default()
            },
            finetune: StageConfig {
                optim: OptimConfig {
                    warmup_steps: 50,
                    decay_steps: 1000,
                    ..OptimConfig::default()
                },
                ..StageConfig::default()
            },
            eval: EvalConfig::default(),
            continual: ContinualConfig::default(),
        }
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.tasks.target_goals.is_empty() {
            return bad("at least one target goal is required".into());
        }
        if self.tasks.target_task >= self.tasks.target_goals.len() {
            return bad(format!("target_task {} out of range", self.tasks.target_task));
        }
        for g in &self.tasks.target_goals {
            if g.iter().any(|x| !(-1.0..=1.0).contains(x)) {
                return bad(format!("target goal {g:?} outside [-1, 1]²"));
            }
        }
        let m = self.env.n_nuisance;
        let codes = std::iter::once(self.tasks.target_nuisance)
            .chain(std::iter::once(self.tasks.ood_val.nuisance))
            .chain(self.tasks.ood_test.iter().map(|s| s.nuisance));
        for c in codes {
            if c >= m {
                return bad(format!("nuisance code {c} out of range for {m} codes"));
            }
        }
        if self.tasks.ood_test.is_empty() {
            return bad("at least one OOD test shift is required".into());
        }
        for (name, stage) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if !(0.0..=1.0).contains(&stage.cotrain_mix) {
                return bad(format!("{name}.cotrain_mix must lie in [0, 1]"));
            }
            if stage.checkpoint_every == 0 || stage.gradient_steps % stage.checkpoint_every != 0 {
                return bad(format!(
                    "{name}.checkpoint_every must be positive and divide gradient_steps"
                ));
            }
            if stage.batch_size == 0 {
                return bad(format!("{name}.batch_size must be positive"));
            }
        }
        if let Some(k) = self.continual.tasks.iter().find(|&&k| k >= self.tasks.target_goals.len()) {
            return bad(format!("continual task {k} out of range"));
        }
        if !(0.0..=1.0).contains(&self.continual.alpha) {
            return bad("continual.alpha must lie in [0, 1]".into());
        }
        for a in self.eval.alpha_grid.iter().chain(&self.eval.select_grid).chain(&self.eval.group_grid) {
            if !a.is_finite() {
                return bad("merge coefficients must be finite".into());
            }
        }
        if self.model.hidden == 0 {
            return bad("model.hidden must be positive".into());
        }
        if self.eval.episodes == 0 || self.eval.curve_episodes == 0 {
            return bad("episode counts must be positive".into());
        }
        Ok(())
    }

    /// Goal of the active target task.
    pub fn target_goal(&self) -> [f64; 2] {
        self.tasks.target_goals[self.tasks.target_task]
    }
}
