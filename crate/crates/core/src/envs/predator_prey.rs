//! Predator-Prey: four predators must entirely surround randomly-moving prey.
//! Predators cannot see each other; only prey show up in the observation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{
    move_target, norm_pos, window_cells, EnvConfig, EnvError, Environment, ProbeInfo, StepInfo,
    StepResult, NOOP,
};

/// Prey action distribution over (LEFT, RIGHT, UP, DOWN, NO-OP).
pub const PREY_MOVE_PROBS: [f64; 5] = [0.175, 0.175, 0.175, 0.175, 0.3];

/// Capture decision for one board configuration, decoupled from the episode
/// machinery so tests can enumerate placements directly.
///
/// A prey is captured iff every in-grid orthogonal neighbor cell is occupied
/// by a predator (the boundary counts as blocking). A prey with at least one
/// orthogonally adjacent predator that is not captured is a failed attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureOutcome {
    pub captured: Vec<bool>,
    pub failed_attempt: Vec<bool>,
}

pub fn capture_check(
    grid: usize,
    predators: &[(usize, usize)],
    prey: &[(usize, usize)],
) -> CaptureOutcome {
    let mut captured = vec![false; prey.len()];
    let mut failed = vec![false; prey.len()];
    for (pi, &(r, c)) in prey.iter().enumerate() {
        let mut all_predators = true;
        let mut any_predator = false;
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            if nr < 0 || nc < 0 || nr >= grid as isize || nc >= grid as isize {
                continue; // boundary blocks this side
            }
            if predators.contains(&(nr as usize, nc as usize)) {
                any_predator = true;
            } else {
                all_predators = false;
            }
        }
        if all_predators {
            captured[pi] = true;
        } else if any_predator {
            failed[pi] = true;
        }
    }
    CaptureOutcome { captured, failed_attempt: failed }
}

pub struct PredatorPrey {
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    predators: Vec<(usize, usize)>,
    prey: Vec<(usize, usize)>,
    prey_alive: Vec<bool>,
    step: usize,
}

impl PredatorPrey {
    pub fn new(cfg: EnvConfig, rng: ChaCha8Rng) -> PredatorPrey {
        PredatorPrey {
            cfg,
            rng,
            predators: Vec::new(),
            prey: Vec::new(),
            prey_alive: Vec::new(),
            step: 0,
        }
    }

    fn occupied(&self, cell: (usize, usize)) -> bool {
        self.predators.contains(&cell)
            || self.prey.iter().zip(&self.prey_alive).any(|(p, a)| *a && *p == cell)
    }

    fn observe(&self, agent: usize) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.cfg.obs_dim());
        let (nr, nc) = norm_pos(self.cfg.grid, self.predators[agent]);
        obs.push(nr);
        obs.push(nc);
        for cell in window_cells(self.cfg.grid, self.cfg.fov, self.predators[agent]) {
            let flag = cell.is_some_and(|cell| {
                self.prey.iter().zip(&self.prey_alive).any(|(p, a)| *a && *p == cell)
            });
            obs.push(if flag { 1.0 } else { 0.0 });
        }
        obs
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.cfg.n_agents).map(|i| self.observe(i)).collect()
    }

    /// Each live prey samples from the fixed movement distribution; blocked
    /// moves resolve to staying in place.
    fn move_prey(&mut self) {
        for pi in 0..self.prey.len() {
            if !self.prey_alive[pi] {
                continue;
            }
            let roll: f64 = self.rng.gen();
            let mut acc = 0.0;
            let mut action = NOOP;
            for (a, p) in self.cfg.prey_move_probs.iter().enumerate() {
                acc += p;
                if roll < acc {
                    action = a;
                    break;
                }
            }
            if let Some(target) = move_target(self.cfg.grid, self.prey[pi], action) {
                if target == self.prey[pi] || !self.occupied(target) {
                    self.prey[pi] = target;
                }
            }
        }
    }

    fn live_prey(&self) -> Vec<(usize, usize)> {
        self.prey
            .iter()
            .zip(&self.prey_alive)
            .filter(|(_, a)| **a)
            .map(|(p, _)| *p)
            .collect()
    }
}

impl Environment for PredatorPrey {
    fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    fn reset(&mut self) -> Result<Vec<Vec<f64>>, EnvError> {
        let n_cells = self.cfg.grid * self.cfg.grid;
        let need = self.cfg.n_agents + self.cfg.n_prey;
        assert!(need <= n_cells, "board too small");
        let mut taken: Vec<usize> = Vec::with_capacity(need);
        while taken.len() < need {
            let cell = self.rng.gen_range(0..n_cells);
            if !taken.contains(&cell) {
                taken.push(cell);
            }
        }
        let to_pos = |cell: usize| (cell / self.cfg.grid, cell % self.cfg.grid);
        self.predators = taken[..self.cfg.n_agents].iter().map(|&c| to_pos(c)).collect();
        self.prey = taken[self.cfg.n_agents..].iter().map(|&c| to_pos(c)).collect();
        self.prey_alive = vec![true; self.cfg.n_prey];
        self.step = 0;
        Ok(self.observations())
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        assert_eq!(actions.len(), self.cfg.n_agents, "one action per agent");
        for (agent, &action) in actions.iter().enumerate() {
            if action >= self.cfg.num_actions() {
                return Err(EnvError::IllegalAction { agent, action });
            }
        }

        // Predators move in ascending index order; blocked movers stay.
        for i in 0..self.cfg.n_agents {
            if let Some(target) = move_target(self.cfg.grid, self.predators[i], actions[i]) {
                if target == self.predators[i] || !self.occupied(target) {
                    self.predators[i] = target;
                }
            }
        }
        self.move_prey();

        let outcome = {
            let live = self.live_prey();
            capture_check(self.cfg.grid, &self.predators, &live)
        };
        let mut captures = 0;
        let mut fails = 0;
        let mut li = 0;
        for pi in 0..self.prey.len() {
            if !self.prey_alive[pi] {
                continue;
            }
            if outcome.captured[li] {
                self.prey_alive[pi] = false;
                captures += 1;
            } else if outcome.failed_attempt[li] {
                fails += 1;
            }
            li += 1;
        }

        self.step += 1;
        let reward = 10.0 * captures as f64 - 0.5 * fails as f64 - 0.01;
        let done = self.prey_alive.iter().all(|a| !a) || self.step >= self.cfg.max_steps;
        Ok(StepResult {
            observations: self.observations(),
            rewards: vec![reward; self.cfg.n_agents],
            done,
            info: StepInfo {
                captures,
                failed_attempts: fails,
                newly_reached: vec![false; self.cfg.n_agents],
                ..StepInfo::default()
            },
        })
    }

    fn active_mask(&self) -> Vec<bool> {
        vec![true; self.cfg.n_agents]
    }

    fn probe_info(&self) -> ProbeInfo {
        let other_visible = (0..self.cfg.n_agents)
            .map(|i| {
                window_cells(self.cfg.grid, self.cfg.fov, self.predators[i]).any(|cell| {
                    cell.is_some_and(|cell| {
                        cell != self.predators[i] && self.predators.contains(&cell)
                    })
                })
            })
            .collect();
        ProbeInfo {
            goal_visible: vec![false; self.cfg.n_agents],
            other_agent_visible: other_visible,
            goal_pos: None,
        }
    }

    fn state_summary(&self) -> serde_json::Value {
        json!({
            "step": self.step,
            "predators": self.predators,
            "prey": self.live_prey(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{env_rng, EnvKind};

    fn env_with(predators: Vec<(usize, usize)>, prey: Vec<(usize, usize)>) -> PredatorPrey {
        let cfg = EnvConfig::predator_prey();
        let mut env = PredatorPrey::new(cfg, env_rng(1, 0));
        env.prey_alive = vec![true; prey.len()];
        env.predators = predators;
        env.prey = prey;
        env
    }

    #[test]
    fn fully_surrounded_prey_is_captured() {
        let out = capture_check(7, &[(2, 3), (4, 3), (3, 2), (3, 4)], &[(3, 3)]);
        assert_eq!(out.captured, vec![true]);
        assert_eq!(out.failed_attempt, vec![false]);
    }

    #[test]
    fn corner_prey_captured_with_two_predators() {
        let out = capture_check(7, &[(0, 1), (1, 0)], &[(0, 0)]);
        assert_eq!(out.captured, vec![true]);
    }

    #[test]
    fn single_adjacent_predator_is_a_failed_attempt() {
        let out = capture_check(7, &[(2, 3)], &[(3, 3)]);
        assert_eq!(out.captured, vec![false]);
        assert_eq!(out.failed_attempt, vec![true]);
    }

    #[test]
    fn capture_pays_ten_and_step_penalty_always_applies() {
        let mut env = env_with(vec![(2, 3), (4, 3), (3, 2), (3, 4)], vec![(3, 3), (0, 0)]);
        // Everyone holds position; the surrounded prey cannot move.
        let res = env.step(&[NOOP; 4]).unwrap();
        assert_eq!(res.info.captures, 1);
        assert!(res.rewards.iter().all(|&r| (r - (10.0 - 0.01)).abs() < 1e-12));
        assert!(!env.prey_alive[0]);
    }

    #[test]
    fn rewards_are_shared() {
        let cfg = EnvConfig::predator_prey();
        let mut env = PredatorPrey::new(cfg, env_rng(3, 0));
        env.reset().unwrap();
        let res = env.step(&[NOOP; 4]).unwrap();
        assert!(res.rewards.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn wall_move_keeps_position() {
        let mut env = env_with(vec![(0, 0), (6, 6), (6, 0), (0, 6)], vec![(3, 3), (3, 4)]);
        env.step(&[super::super::UP, NOOP, NOOP, NOOP]).unwrap();
        assert_eq!(env.predators[0], (0, 0));
    }

    #[test]
    fn predators_block_each_other() {
        let mut env = env_with(vec![(0, 0), (0, 1), (6, 0), (6, 6)], vec![(3, 3), (3, 4)]);
        // Agent 0 tries to move right into agent 1's cell.
        env.step(&[super::super::RIGHT, NOOP, NOOP, NOOP]).unwrap();
        assert_eq!(env.predators[0], (0, 0));
    }

    #[test]
    fn observation_excludes_other_predators() {
        let mut a = env_with(vec![(3, 3), (6, 6), (6, 0), (0, 6)], vec![(0, 0), (0, 2)]);
        let mut b = env_with(vec![(3, 3), (3, 4), (6, 0), (0, 6)], vec![(0, 0), (0, 2)]);
        assert_eq!(a.observe(0), b.observe(0));
        // But a prey inside the window flips its flag.
        let c = env_with(vec![(3, 3), (6, 6), (6, 0), (0, 6)], vec![(3, 4), (0, 2)]);
        assert_ne!(a.observe(0), c.observe(0));
        assert_eq!(c.observe(0)[2 + 5], 1.0); // window slot right of center
        a.step(&[NOOP; 4]).unwrap();
        b.step(&[NOOP; 4]).unwrap();
    }

    #[test]
    fn surrounded_prey_stays_despite_move_sample() {
        let mut env = env_with(vec![(2, 3), (4, 3), (3, 2), (3, 4)], vec![(3, 3), (0, 0)]);
        for _ in 0..20 {
            env.move_prey();
            assert_eq!(env.prey[0], (3, 3));
        }
    }

    #[test]
    fn prey_move_frequencies_match_distribution() {
        // A lone prey in the middle of a huge empty board: all moves legal.
        let mut cfg = EnvConfig::predator_prey();
        cfg.grid = 9;
        let mut env = PredatorPrey::new(cfg, env_rng(7, 0));
        env.predators = vec![(0, 0), (0, 8), (8, 0), (8, 8)];
        env.prey = vec![(4, 4)];
        env.prey_alive = vec![true];
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            let before = env.prey[0];
            env.move_prey();
            let after = env.prey[0];
            let d = (after.0 as isize - before.0 as isize, after.1 as isize - before.1 as isize);
            let idx = match d {
                (0, -1) => 0,
                (0, 1) => 1,
                (-1, 0) => 2,
                (1, 0) => 3,
                (0, 0) => 4,
                _ => unreachable!(),
            };
            counts[idx] += 1;
            env.prey[0] = (4, 4);
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - PREY_MOVE_PROBS[i]).abs() < 0.01,
                "action {i}: freq {freq} vs {}",
                PREY_MOVE_PROBS[i]
            );
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = EnvConfig::predator_prey();
        let run = |seed| {
            let mut env = PredatorPrey::new(cfg.clone(), env_rng(seed, 0));
            let mut log = vec![env.reset().unwrap()];
            for t in 0..50 {
                let res = env.step(&[t % 5, (t + 1) % 5, (t + 2) % 5, (t + 3) % 5]).unwrap();
                log.push(res.observations);
            }
            log
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
        let _ = EnvKind::PredatorPrey;
    }

    #[test]
    fn illegal_action_is_rejected() {
        let mut env = env_with(vec![(0, 0), (1, 1), (2, 2), (3, 3)], vec![(5, 5), (5, 6)]);
        assert!(matches!(
            env.step(&[9, 0, 0, 0]),
            Err(EnvError::IllegalAction { agent: 0, action: 9 })
        ));
    }
}
