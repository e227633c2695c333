//! 2-D point-mass goal reaching with a nuisance code appended to observations.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{EnvConfig, LabConfig, Shift, StartBox};

/// Mixes a master seed with a stream id (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// A goal plus the nuisance code shown with it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub goal: [f64; 2],
    pub nuisance_code: usize,
}

/// Which nuisance code an episode shows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nuisance {
    Fixed(usize),
    /// Uniform over all codes.
    Any,
}

/// Distribution over episodes: goal, start box and nuisance code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub goal: [f64; 2],
    pub start: StartBox,
    pub nuisance: Nuisance,
}

impl Scenario {
    pub fn sample<R: Rng>(&self, env: &EnvConfig, rng: &mut R) -> EpisodeInit {
        let [cx, cy] = self.start.center;
        let w = self.start.half_width;
        let pos = [cx + rng.random_range(-1.0..=1.0) * w, cy + rng.random_range(-1.0..=1.0) * w];
        let nuisance_code = match self.nuisance {
            Nuisance::Fixed(c) => c,
            Nuisance::Any => rng.random_range(0..env.n_nuisance),
        };
        EpisodeInit {
            pos,
            task: TaskSpec { goal: self.goal, nuisance_code },
        }
    }

    pub fn shifted(goal: [f64; 2], shift: &Shift) -> Self {
        Self {
            goal: [goal[0] + shift.goal_offset[0], goal[1] + shift.goal_offset[1]],
            start: shift.start,
            nuisance: Nuisance::Fixed(shift.nuisance),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeInit {
    pub pos: [f64; 2],
    pub task: TaskSpec,
}

/// `[position, goal, one-hot nuisance]`.
pub fn observe(env: &EnvConfig, pos: [f64; 2], task: &TaskSpec, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&pos);
    out.extend_from_slice(&task.goal);
    out.extend((0..env.n_nuisance).map(|c| if c == task.nuisance_code { 1.0 } else { 0.0 }));
}

pub fn clip_action(env: &EnvConfig, a: [f64; 2]) -> [f64; 2] {
    a.map(|x| x.clamp(-env.max_action, env.max_action))
}

/// Proportional controller toward the goal with Gaussian noise, clipped per axis.
pub fn scripted_expert<R: Rng>(env: &EnvConfig, pos: [f64; 2], task: &TaskSpec, rng: &mut R) -> [f64; 2] {
    let mut a = [0.0; 2];
    for i in 0..2 {
        let noise: f64 = if env.expert_noise > 0.0 {
            env.expert_noise * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        a[i] = env.expert_gain * (task.goal[i] - pos[i]) + noise;
    }
    clip_action(env, a)
}

/// Anything that maps an observation to a velocity command.
pub trait Policy: Sync {
    fn act(&self, env: &EnvConfig, pos: [f64; 2], task: &TaskSpec, rng: &mut ChaCha8Rng) -> [f64; 2];
}

/// The scripted expert used as a policy.
pub struct ExpertPolicy;

impl Policy for ExpertPolicy {
    fn act(&self, env: &EnvConfig, pos: [f64; 2], task: &TaskSpec, rng: &mut ChaCha8Rng) -> [f64; 2] {
        scripted_expert(env, pos, task, rng)
    }
}

pub fn step(env: &EnvConfig, pos: [f64; 2], action: [f64; 2]) -> [f64; 2] {
    let a = clip_action(env, action);
    let b = env.position_bound;
    [(pos[0] + a[0]).clamp(-b, b), (pos[1] + a[1]).clamp(-b, b)]
}

pub fn reached(env: &EnvConfig, pos: [f64; 2], goal: [f64; 2]) -> bool {
    let (dx, dy) = (pos[0] - goal[0], pos[1] - goal[1]);
    (dx * dx + dy * dy).sqrt() <= env.success_radius
}

/// Runs one episode; success as soon as the goal ball is entered within the horizon.
pub fn rollout<P: Policy + ?Sized>(env: &EnvConfig, policy: &P, init: &EpisodeInit, rng: &mut ChaCha8Rng) -> bool {
    let mut pos = init.pos;
    if reached(env, pos, init.task.goal) {
        return true;
    }
    for _ in 0..env.horizon {
        let a = policy.act(env, pos, &init.task, rng);
        pos = step(env, pos, a);
        if reached(env, pos, init.task.goal) {
            return true;
        }
    }
    false
}

/// Observation/action pairs with actions stored in units of `max_action`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemoDataset {
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    /// Index of the task each sample came from.
    pub task_ids: Vec<usize>,
    pub episodes: usize,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action_row(&self, i: usize) -> [f64; 2] {
        [self.actions[2 * i], self.actions[2 * i + 1]]
    }
}

/// Records `episodes` expert demonstrations per scenario. Each demonstration runs for the
/// full horizon so the data also covers holding position at the goal.
pub fn collect_demos(env: &EnvConfig, scenarios: &[Scenario], episodes: usize, rng: &mut ChaCha8Rng) -> DemoDataset {
    let mut data = DemoDataset {
        obs_dim: env.obs_dim(),
        ..DemoDataset::default()
    };
    let mut obs = Vec::with_capacity(env.obs_dim());
    for _ in 0..episodes {
        for (task_id, scenario) in scenarios.iter().enumerate() {
            let init = scenario.sample(env, rng);
            let mut pos = init.pos;
            for _ in 0..env.horizon {
                let a = scripted_expert(env, pos, &init.task, rng);
                observe(env, pos, &init.task, &mut obs);
                data.obs.extend_from_slice(&obs);
                data.actions.extend(a.iter().map(|x| x / env.max_action));
                data.task_ids.push(task_id);
                pos = step(env, pos, a);
            }
            data.episodes += 1;
        }
    }
    data
}

/// Pretraining goals: uniform in the goal box, rejecting any within the exclusion radius
/// of a target goal.
pub fn pretrain_goals(cfg: &LabConfig) -> Vec<[f64; 2]> {
    let mut rng = rng_for(cfg.seed, 0x60a1);
    let t = &cfg.tasks;
    let mut goals = Vec::with_capacity(t.n_pretrain_tasks);
    let mut attempts = 0usize;
    while goals.len() < t.n_pretrain_tasks {
        attempts += 1;
        let g = [
            rng.random_range(-t.goal_extent[0]..=t.goal_extent[0]),
            rng.random_range(-t.goal_extent[1]..=t.goal_extent[1]),
        ];
        let clear = t.target_goals.iter().all(|tg| {
            let (dx, dy) = (g[0] - tg[0], g[1] - tg[1]);
            (dx * dx + dy * dy).sqrt() >= t.goal_exclusion
        });
        // A pathological exclusion radius would otherwise loop forever.
        if clear || attempts > 100_000 {
            goals.push(g);
        }
    }
    goals
}

pub fn pretrain_scenarios(cfg: &LabConfig) -> Vec<Scenario> {
    pretrain_goals(cfg)
        .into_iter()
        .map(|goal| Scenario {
            goal,
            start: cfg.tasks.pretrain_start,
            nuisance: Nuisance::Any,
        })
        .collect()
}

pub fn target_scenario(cfg: &LabConfig) -> Scenario {
    Scenario {
        goal: cfg.target_goal(),
        start: cfg.tasks.target_start,
        nuisance: Nuisance::Fixed(cfg.tasks.target_nuisance),
    }
}
