//! Find-Goal: agents search a gridworld with obstacles for a shared goal
//! cell. Egocentric 3x3 views make communication of the goal location the
//! main lever on episode length.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{
    move_target, norm_pos, window_cells, EnvConfig, EnvError, Environment, ProbeInfo, StepInfo,
    StepResult,
};

const RESAMPLE_LIMIT: usize = 100;

pub struct FindGoal {
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    obstacles: Vec<bool>,
    agents: Vec<(usize, usize)>,
    goal: (usize, usize),
    reached: Vec<bool>,
    step: usize,
}

impl FindGoal {
    pub fn new(cfg: EnvConfig, rng: ChaCha8Rng) -> FindGoal {
        FindGoal {
            cfg,
            rng,
            obstacles: Vec::new(),
            agents: Vec::new(),
            goal: (0, 0),
            reached: Vec::new(),
            step: 0,
        }
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    fn cell(&self, pos: (usize, usize)) -> usize {
        pos.0 * self.cfg.grid + pos.1
    }

    fn is_obstacle(&self, pos: (usize, usize)) -> bool {
        self.obstacles[self.cell(pos)]
    }

    /// All free cells reachable from the goal, via 4-connectivity.
    fn reachable_from_goal(&self) -> Vec<bool> {
        let n = self.cfg.grid * self.cfg.grid;
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        seen[self.cell(self.goal)] = true;
        queue.push_back(self.goal);
        while let Some((r, c)) = queue.pop_front() {
            for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= self.cfg.grid as isize || nc >= self.cfg.grid as isize
                {
                    continue;
                }
                let pos = (nr as usize, nc as usize);
                let idx = self.cell(pos);
                if !seen[idx] && !self.obstacles[idx] {
                    seen[idx] = true;
                    queue.push_back(pos);
                }
            }
        }
        seen
    }

    fn sample_layout(&mut self) -> bool {
        let grid = self.cfg.grid;
        let n = grid * grid;
        self.obstacles = (0..n).map(|_| self.rng.gen::<f64>() < self.cfg.obstacle_density).collect();

        // Goal first (honoring a measurement override), then agents, all on
        // distinct free cells.
        let free: Vec<usize> = (0..n).filter(|&i| !self.obstacles[i]).collect();
        if free.len() < self.cfg.n_agents + 1 {
            return false;
        }
        self.goal = match self.cfg.fg_goal_override {
            Some(pos) => {
                if self.obstacles[self.cell(pos)] {
                    return false;
                }
                pos
            }
            None => {
                let i = free[self.rng.gen_range(0..free.len())];
                (i / grid, i % grid)
            }
        };
        let mut taken = vec![self.cell(self.goal)];
        while taken.len() < self.cfg.n_agents + 1 {
            let i = free[self.rng.gen_range(0..free.len())];
            if !taken.contains(&i) {
                taken.push(i);
            }
        }
        self.agents = taken[1..].iter().map(|&i| (i / grid, i % grid)).collect();

        let reachable = self.reachable_from_goal();
        self.agents.iter().all(|&a| reachable[self.cell(a)])
    }

    fn observe(&self, agent: usize) -> Vec<f64> {
        let window = self.cfg.fov * self.cfg.fov;
        let mut obs = vec![0.0; self.cfg.obs_dim()];
        for (slot, cell) in window_cells(self.cfg.grid, self.cfg.fov, self.agents[agent]).enumerate()
        {
            match cell {
                // Outside the grid reads as blocking, like an obstacle.
                None => obs[slot] = 1.0,
                Some(pos) => {
                    if self.is_obstacle(pos) {
                        obs[slot] = 1.0;
                    }
                    if self.agents.iter().enumerate().any(|(j, &a)| j != agent && a == pos) {
                        obs[window + slot] = 1.0;
                    }
                    if pos == self.goal {
                        obs[2 * window + slot] = 1.0;
                    }
                }
            }
        }
        let (nr, nc) = norm_pos(self.cfg.grid, self.agents[agent]);
        obs[3 * window] = nr;
        obs[3 * window + 1] = nc;
        obs
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.cfg.n_agents).map(|i| self.observe(i)).collect()
    }

    fn goal_in_fov(&self, agent: usize) -> bool {
        window_cells(self.cfg.grid, self.cfg.fov, self.agents[agent])
            .any(|cell| cell == Some(self.goal))
    }
}

impl Environment for FindGoal {
    fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    fn reset(&mut self) -> Result<Vec<Vec<f64>>, EnvError> {
        let mut ok = false;
        for _ in 0..RESAMPLE_LIMIT {
            if self.sample_layout() {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(EnvError::UnreachableGoal(RESAMPLE_LIMIT));
        }
        self.reached = vec![false; self.cfg.n_agents];
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

        for i in 0..self.cfg.n_agents {
            if let Some(target) = move_target(self.cfg.grid, self.agents[i], actions[i]) {
                if target == self.agents[i] || self.is_obstacle(target) {
                    continue;
                }
                // Agents are solid except on the goal cell, which any number
                // may share; a later mover into a taken cell stays in place.
                let blocked = target != self.goal
                    && self.agents.iter().enumerate().any(|(j, &a)| j != i && a == target);
                if !blocked {
                    self.agents[i] = target;
                }
            }
        }

        let mut newly = vec![false; self.cfg.n_agents];
        for i in 0..self.cfg.n_agents {
            if !self.reached[i] && self.agents[i] == self.goal {
                self.reached[i] = true;
                newly[i] = true;
            }
        }
        let all_reached = self.reached.iter().all(|&r| r);
        let all_bonus = if all_reached && newly.iter().any(|&n| n) { 5.0 } else { 0.0 };

        self.step += 1;
        let rewards: Vec<f64> = (0..self.cfg.n_agents)
            .map(|i| -0.01 + if newly[i] { 1.0 } else { 0.0 } + all_bonus)
            .collect();
        let done = all_reached || self.step >= self.cfg.max_steps;
        Ok(StepResult {
            observations: self.observations(),
            rewards,
            done,
            info: StepInfo { newly_reached: newly, all_reached, ..StepInfo::default() },
        })
    }

    fn active_mask(&self) -> Vec<bool> {
        vec![true; self.cfg.n_agents]
    }

    fn probe_info(&self) -> ProbeInfo {
        let goal_visible = (0..self.cfg.n_agents).map(|i| self.goal_in_fov(i)).collect();
        let other_visible = (0..self.cfg.n_agents)
            .map(|i| {
                window_cells(self.cfg.grid, self.cfg.fov, self.agents[i]).any(|cell| {
                    cell.is_some_and(|pos| {
                        self.agents.iter().enumerate().any(|(j, &a)| j != i && a == pos)
                    })
                })
            })
            .collect();
        ProbeInfo {
            goal_visible,
            other_agent_visible: other_visible,
            goal_pos: Some(self.goal),
        }
    }

    fn state_summary(&self) -> serde_json::Value {
        json!({
            "step": self.step,
            "agents": self.agents,
            "goal": self.goal,
            "reached": self.reached,
            "obstacles": self.obstacles.iter().filter(|&&o| o).count(),
        })
    }
}
