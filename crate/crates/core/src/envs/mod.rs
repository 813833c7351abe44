//! The three Dec-POMDP gridworld environments with bit-reproducible dynamics
//! under seeded RNG streams.

mod find_goal;
mod predator_prey;
mod traffic_junction;

pub use find_goal::FindGoal;
pub use predator_prey::{capture_check, CaptureOutcome, PredatorPrey, PREY_MOVE_PROBS};
pub use traffic_junction::TrafficJunction;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("illegal action {action} for agent {agent}")]
    IllegalAction { agent: usize, action: usize },
    #[error("could not sample a map connecting all agents to the goal after {0} attempts")]
    UnreachableGoal(usize),
    #[error("invalid environment config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PredatorPrey,
    FindGoal,
    TrafficJunction,
}

impl EnvKind {
    pub fn parse(s: &str) -> Option<EnvKind> {
        match s {
            "pp" | "predator_prey" => Some(EnvKind::PredatorPrey),
            "fg" | "find_goal" => Some(EnvKind::FindGoal),
            "tj" | "traffic_junction" => Some(EnvKind::TrafficJunction),
            _ => None,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            EnvKind::PredatorPrey => "predator_prey",
            EnvKind::FindGoal => "find_goal",
            EnvKind::TrafficJunction => "traffic_junction",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub grid: usize,
    pub n_agents: usize,
    /// Side length of the observation window (odd).
    pub fov: usize,
    pub max_steps: usize,
    // predator-prey
    pub n_prey: usize,
    pub prey_move_probs: [f64; 5],
    // find-goal
    pub obstacle_density: f64,
    /// Fixed goal coordinate for measurement harnesses; sampled when absent.
    pub fg_goal_override: Option<(usize, usize)>,
    // traffic-junction
    pub arrival_rate_min: f64,
    pub arrival_rate_max: f64,
}

impl EnvConfig {
    /// 7x7, 4 predators, 2 prey, 3x3 field of view, 200-step episodes.
    pub fn predator_prey() -> EnvConfig {
        EnvConfig {
            kind: EnvKind::PredatorPrey,
            grid: 7,
            n_agents: 4,
            fov: 3,
            max_steps: 200,
            n_prey: 2,
            prey_move_probs: PREY_MOVE_PROBS,
            obstacle_density: 0.0,
            fg_goal_override: None,
            arrival_rate_min: 0.0,
            arrival_rate_max: 0.0,
        }
    }

    /// 15x15, 3 agents, 3x3 field of view, obstacle density 0.15, 512 steps.
    pub fn find_goal() -> EnvConfig {
        EnvConfig {
            kind: EnvKind::FindGoal,
            grid: 15,
            n_agents: 3,
            fov: 3,
            max_steps: 512,
            n_prey: 0,
            prey_move_probs: [0.0; 5],
            obstacle_density: 0.15,
            fg_goal_override: None,
            arrival_rate_min: 0.0,
            arrival_rate_max: 0.0,
        }
    }

    /// 7x7 single junction, 5 car slots, vision 1, 20-step episodes,
    /// arrival rate in [0.1, 0.3].
    pub fn traffic_junction() -> EnvConfig {
        EnvConfig {
            kind: EnvKind::TrafficJunction,
            grid: 7,
            n_agents: 5,
            fov: 3,
            max_steps: 20,
            n_prey: 0,
            prey_move_probs: [0.0; 5],
            obstacle_density: 0.0,
            fg_goal_override: None,
            arrival_rate_min: 0.1,
            arrival_rate_max: 0.3,
        }
    }

    pub fn for_kind(kind: EnvKind) -> EnvConfig {
        match kind {
            EnvKind::PredatorPrey => EnvConfig::predator_prey(),
            EnvKind::FindGoal => EnvConfig::find_goal(),
            EnvKind::TrafficJunction => EnvConfig::traffic_junction(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        let window = self.fov * self.fov;
        match self.kind {
            // own position + prey occupancy window
            EnvKind::PredatorPrey => 2 + window,
            // 3 channels (obstacle, other-agent, goal) + own position
            EnvKind::FindGoal => 3 * window + 2,
            // car occupancy window + own position + route one-hot
            EnvKind::TrafficJunction => window + 2 + 2,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self.kind {
            EnvKind::PredatorPrey | EnvKind::FindGoal => 5,
            EnvKind::TrafficJunction => 2,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.grid < 3 {
            return Err(EnvError::BadConfig(format!("grid {} too small", self.grid)));
        }
        if self.n_agents == 0 {
            return Err(EnvError::BadConfig("need at least one agent".into()));
        }
        if self.fov % 2 == 0 || self.fov < 1 {
            return Err(EnvError::BadConfig(format!("field of view {} must be odd", self.fov)));
        }
        if self.max_steps == 0 {
            return Err(EnvError::BadConfig("max_steps must be positive".into()));
        }
        match self.kind {
            EnvKind::PredatorPrey => {
                if self.n_prey == 0 {
                    return Err(EnvError::BadConfig("predator_prey needs prey".into()));
                }
                let s: f64 = self.prey_move_probs.iter().sum();
                if (s - 1.0).abs() > 1e-9 || self.prey_move_probs.iter().any(|&p| p < 0.0) {
                    return Err(EnvError::BadConfig("prey move probabilities must sum to 1".into()));
                }
            }
            EnvKind::FindGoal => {
                if !(0.0..1.0).contains(&self.obstacle_density) {
                    return Err(EnvError::BadConfig(format!(
                        "obstacle density {} outside [0, 1)",
                        self.obstacle_density
                    )));
                }
                if let Some((r, c)) = self.fg_goal_override {
                    if r >= self.grid || c >= self.grid {
                        return Err(EnvError::BadConfig("goal override outside grid".into()));
                    }
                }
            }
            EnvKind::TrafficJunction => {
                if self.grid % 2 == 0 {
                    return Err(EnvError::BadConfig("traffic junction grid must be odd".into()));
                }
                if !(0.0..=1.0).contains(&self.arrival_rate_min)
                    || !(0.0..=1.0).contains(&self.arrival_rate_max)
                    || self.arrival_rate_min > self.arrival_rate_max
                {
                    return Err(EnvError::BadConfig("bad arrival rate range".into()));
                }
            }
        }
        Ok(())
    }
}

/// Per-step event counters and eval hooks.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StepInfo {
    pub captures: usize,
    pub failed_attempts: usize,
    pub collisions: usize,
    /// Per-agent flag set on the step the agent first reaches the goal.
    pub newly_reached: Vec<bool>,
    pub all_reached: bool,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub info: StepInfo,
}

/// State facts exposed to the evaluation probes, refreshed on reset/step.
#[derive(Debug, Clone)]
pub struct ProbeInfo {
    pub goal_visible: Vec<bool>,
    pub other_agent_visible: Vec<bool>,
    pub goal_pos: Option<(usize, usize)>,
}

pub trait Environment {
    fn config(&self) -> &EnvConfig;
    /// Start a fresh episode and return one observation per agent slot.
    fn reset(&mut self) -> Result<Vec<Vec<f64>>, EnvError>;
    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError>;
    /// Which agent slots currently act (always true outside traffic junction).
    fn active_mask(&self) -> Vec<bool>;
    fn probe_info(&self) -> ProbeInfo;
    /// Compact state record for trajectory dumps.
    fn state_summary(&self) -> serde_json::Value;
}

/// Independent deterministic stream per (master seed, instance id).
pub fn env_rng(seed: u64, instance: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance);
    rng
}

pub fn make_env(
    cfg: &EnvConfig,
    seed: u64,
    instance: u64,
) -> Result<Box<dyn Environment>, EnvError> {
    cfg.validate()?;
    let rng = env_rng(seed, instance);
    Ok(match cfg.kind {
        EnvKind::PredatorPrey => Box::new(PredatorPrey::new(cfg.clone(), rng)),
        EnvKind::FindGoal => Box::new(FindGoal::new(cfg.clone(), rng)),
        EnvKind::TrafficJunction => Box::new(TrafficJunction::new(cfg.clone(), rng)),
    })
}

/// One JSON-lines record per environment step, for external analysis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub state: serde_json::Value,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub messages: Vec<Vec<f64>>,
}

pub(crate) const LEFT: usize = 0;
pub(crate) const RIGHT: usize = 1;
pub(crate) const UP: usize = 2;
pub(crate) const DOWN: usize = 3;
pub(crate) const NOOP: usize = 4;

/// Target cell for a movement action, or None when it would leave the grid.
pub(crate) fn move_target(
    grid: usize,
    pos: (usize, usize),
    action: usize,
) -> Option<(usize, usize)> {
    let (r, c) = (pos.0 as isize, pos.1 as isize);
    let (nr, nc) = match action {
        LEFT => (r, c - 1),
        RIGHT => (r, c + 1),
        UP => (r - 1, c),
        DOWN => (r + 1, c),
        NOOP => (r, c),
        _ => unreachable!("validated action"),
    };
    if nr < 0 || nc < 0 || nr >= grid as isize || nc >= grid as isize {
        None
    } else {
        Some((nr as usize, nc as usize))
    }
}

/// Row-major iteration over the fov x fov window centered at `pos`,
/// yielding the optional in-grid cell for each window slot.
pub(crate) fn window_cells(
    grid: usize,
    fov: usize,
    pos: (usize, usize),
) -> impl Iterator<Item = Option<(usize, usize)>> {
    let half = (fov / 2) as isize;
    let (r, c) = (pos.0 as isize, pos.1 as isize);
    (-half..=half).flat_map(move |dr| {
        (-half..=half).map(move |dc| {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= grid as isize || nc >= grid as isize {
                None
            } else {
                Some((nr as usize, nc as usize))
            }
        })
    })
}

pub(crate) fn norm_pos(grid: usize, pos: (usize, usize)) -> (f64, f64) {
    let denom = (grid - 1).max(1) as f64;
    (pos.0 as f64 / denom, pos.1 as f64 / denom)
}
