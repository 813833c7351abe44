//! Traffic-Junction: cars on two crossing one-way roads choose gas or brake
//! each step; overlapping cells are collisions. Agent slots activate when a
//! car spawns for them and free up when it leaves the grid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{
    norm_pos, window_cells, EnvConfig, EnvError, Environment, ProbeInfo, StepInfo, StepResult,
};

pub const GAS: usize = 0;
pub const BRAKE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    /// Left edge to right edge along the middle row.
    Horizontal,
    /// Top edge to bottom edge along the middle column.
    Vertical,
}

#[derive(Debug, Clone)]
struct Car {
    route: Route,
    /// Index along the route; cell = route[progress].
    progress: usize,
    /// Steps since the car spawned, counted at step end.
    age: usize,
}

pub struct TrafficJunction {
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    cars: Vec<Option<Car>>,
    arrival_rate: f64,
    step: usize,
}

impl TrafficJunction {
    pub fn new(cfg: EnvConfig, rng: ChaCha8Rng) -> TrafficJunction {
        let slots = cfg.n_agents;
        TrafficJunction { cfg, rng, cars: vec![None; slots], arrival_rate: 0.0, step: 0 }
    }

    fn mid(&self) -> usize {
        self.cfg.grid / 2
    }

    fn car_cell(&self, car: &Car) -> (usize, usize) {
        match car.route {
            Route::Horizontal => (self.mid(), car.progress),
            Route::Vertical => (car.progress, self.mid()),
        }
    }

    fn occupancy(&self) -> Vec<(usize, (usize, usize))> {
        self.cars
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i, self.car_cell(c))))
            .collect()
    }

    fn observe(&self, slot: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.cfg.obs_dim()];
        let Some(car) = &self.cars[slot] else {
            return obs; // inactive slots read all zeros
        };
        let own = self.car_cell(car);
        let window = self.cfg.fov * self.cfg.fov;
        let others = self.occupancy();
        for (i, cell) in window_cells(self.cfg.grid, self.cfg.fov, own).enumerate() {
            if let Some(pos) = cell {
                if others.iter().any(|&(j, p)| j != slot && p == pos) {
                    obs[i] = 1.0;
                }
            }
        }
        let (nr, nc) = norm_pos(self.cfg.grid, own);
        obs[window] = nr;
        obs[window + 1] = nc;
        obs[window + 2 + matches!(car.route, Route::Vertical) as usize] = 1.0;
        obs
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.cfg.n_agents).map(|i| self.observe(i)).collect()
    }

    fn spawn(&mut self, route: Route) {
        let entry = Car { route, progress: 0, age: 0 };
        let cell = self.car_cell(&entry);
        if self.occupancy().iter().any(|&(_, p)| p == cell) {
            return; // entry cell blocked
        }
        if let Some(slot) = self.cars.iter().position(|c| c.is_none()) {
            self.cars[slot] = Some(entry);
        }
    }

    #[cfg(test)]
    fn force_spawn(&mut self, slot: usize, route: Route, progress: usize) {
        self.cars[slot] = Some(Car { route, progress, age: 0 });
    }
}

impl Environment for TrafficJunction {
    fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    fn reset(&mut self) -> Result<Vec<Vec<f64>>, EnvError> {
        self.cars.iter_mut().for_each(|c| *c = None);
        self.arrival_rate =
            self.rng.gen_range(self.cfg.arrival_rate_min..=self.cfg.arrival_rate_max);
        self.step = 0;
        Ok(self.observations())
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        assert_eq!(actions.len(), self.cfg.n_agents, "one action per slot");
        for (agent, &action) in actions.iter().enumerate() {
            if self.cars[agent].is_some() && action >= self.cfg.num_actions() {
                return Err(EnvError::IllegalAction { agent, action });
            }
        }

        // Simultaneous movement; gas advances one cell, brake holds. Cars
        // leaving the far edge free their slot.
        let route_len = self.cfg.grid;
        for i in 0..self.cars.len() {
            if let Some(car) = &mut self.cars[i] {
                if actions[i] == GAS {
                    car.progress += 1;
                    if car.progress >= route_len {
                        self.cars[i] = None;
                    }
                }
            }
        }

        // Collision: any cell holding more than one car penalizes each
        // occupant.
        let occ = self.occupancy();
        let mut colliding = 0usize;
        for &(i, p) in &occ {
            if occ.iter().any(|&(j, q)| j != i && q == p) {
                colliding += 1;
            }
        }

        // New arrivals; both points roll every step for a fixed RNG schedule.
        let roll_h: f64 = self.rng.gen();
        let roll_v: f64 = self.rng.gen();
        if roll_h < self.arrival_rate {
            self.spawn(Route::Horizontal);
        }
        if roll_v < self.arrival_rate {
            self.spawn(Route::Vertical);
        }

        // Shared reward: collision penalties plus per-car time penalties.
        let mut shared = -10.0 * colliding as f64;
        for car in self.cars.iter_mut().flatten() {
            car.age += 1;
            shared -= 0.01 * car.age as f64;
        }

        self.step += 1;
        let done = self.step >= self.cfg.max_steps;
        let active = self.active_mask();
        let rewards =
            active.iter().map(|&a| if a { shared } else { 0.0 }).collect();
        Ok(StepResult {
            observations: self.observations(),
            rewards,
            done,
            info: StepInfo {
                collisions: colliding,
                newly_reached: vec![false; self.cfg.n_agents],
                ..StepInfo::default()
            },
        })
    }

    fn active_mask(&self) -> Vec<bool> {
        self.cars.iter().map(|c| c.is_some()).collect()
    }

    fn probe_info(&self) -> ProbeInfo {
        let occ = self.occupancy();
        let other_visible = (0..self.cfg.n_agents)
            .map(|i| match &self.cars[i] {
                None => false,
                Some(car) => window_cells(self.cfg.grid, self.cfg.fov, self.car_cell(car)).any(
                    |cell| {
                        cell.is_some_and(|pos| occ.iter().any(|&(j, p)| j != i && p == pos))
                    },
                ),
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
            "arrival_rate": self.arrival_rate,
            "cars": self
                .cars
                .iter()
                .map(|c| c.as_ref().map(|c| self.car_cell(c)))
                .collect::<Vec<_>>(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::env_rng;

    fn fresh(seed: u64) -> TrafficJunction {
        let mut env = TrafficJunction::new(EnvConfig::traffic_junction(), env_rng(seed, 0));
        env.reset().unwrap();
        env
    }

    #[test]
    fn reset_clears_the_road() {
        let env = fresh(1);
        assert!(env.cars.iter().all(|c| c.is_none()));
        assert_eq!(env.step, 0);
        assert!((0.1..=0.3).contains(&env.arrival_rate));
        assert!(env.observations().iter().all(|o| o.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn braking_car_never_moves() {
        let mut env = fresh(2);
        env.arrival_rate = 0.0;
        env.force_spawn(0, Route::Horizontal, 2);
        for _ in 0..5 {
            env.step(&[BRAKE; 5]).unwrap();
        }
        assert_eq!(env.car_cell(env.cars[0].as_ref().unwrap()), (3, 2));
    }

    #[test]
    fn cars_meeting_at_the_junction_collide() {
        let mut env = fresh(3);
        env.arrival_rate = 0.0;
        // Both cars one cell short of the junction center.
        env.force_spawn(0, Route::Horizontal, 2);
        env.force_spawn(1, Route::Vertical, 2);
        let res = env.step(&[GAS, GAS, BRAKE, BRAKE, BRAKE]).unwrap();
        assert_eq!(res.info.collisions, 2);
        // -10 each plus two time penalties of 0.01, shared by active slots.
        assert!((res.rewards[0] - (-20.0 - 0.02)).abs() < 1e-12, "{}", res.rewards[0]);
        assert_eq!(res.rewards[0], res.rewards[1]);
        assert_eq!(res.rewards[2], 0.0);
    }

    #[test]
    fn gas_through_the_far_edge_frees_the_slot() {
        let mut env = fresh(4);
        env.arrival_rate = 0.0;
        env.force_spawn(0, Route::Vertical, 6);
        let res = env.step(&[GAS, BRAKE, BRAKE, BRAKE, BRAKE]).unwrap();
        assert!(env.cars[0].is_none());
        assert_eq!(res.rewards[0], 0.0);
    }

    #[test]
    fn spawn_suppressed_when_all_slots_full() {
        let mut env = fresh(5);
        env.arrival_rate = 1.0;
        for i in 0..5 {
            env.force_spawn(i, Route::Horizontal, i + 1);
        }
        env.step(&[BRAKE; 5]).unwrap();
        assert_eq!(env.active_mask().iter().filter(|&&a| a).count(), 5);
        // Nobody teleported onto the vertical route.
        assert!(env
            .cars
            .iter()
            .flatten()
            .all(|c| matches!(c.route, Route::Horizontal)));
    }

    #[test]
    fn inactive_slots_observe_zero_and_earn_zero() {
        let mut env = fresh(6);
        env.arrival_rate = 0.0;
        env.force_spawn(2, Route::Vertical, 1);
        let res = env.step(&[BRAKE; 5]).unwrap();
        assert!(res.observations[0].iter().all(|&v| v == 0.0));
        assert_eq!(res.rewards[0], 0.0);
        assert!(res.rewards[2] < 0.0);
    }

    #[test]
    fn observation_marks_nearby_cars_and_route() {
        let mut env = fresh(7);
        env.arrival_rate = 0.0;
        env.force_spawn(0, Route::Horizontal, 2);
        env.force_spawn(1, Route::Vertical, 2);
        let obs = env.observe(0);
        // Car 1 at (2,3) sits up-right of car 0 at (3,2): window slot 2.
        assert_eq!(obs[2], 1.0);
        // Own-position block then route one-hot (horizontal).
        assert_eq!(obs[9..11], [0.5, 2.0 / 6.0]);
        assert_eq!(obs[11..13], [1.0, 0.0]);
        let obs1 = env.observe(1);
        assert_eq!(obs1[11..13], [0.0, 1.0]);
    }

    #[test]
    fn episode_ends_at_max_steps() {
        let mut env = fresh(8);
        for t in 0..20 {
            let res = env.step(&[BRAKE; 5]).unwrap();
            assert_eq!(res.done, t == 19);
        }
    }

    #[test]
    fn determinism_under_seed() {
        let run = |seed| {
            let mut env = TrafficJunction::new(EnvConfig::traffic_junction(), env_rng(seed, 3));
            let mut log = Vec::new();
            for ep in 0..4 {
                env.reset().unwrap();
                for t in 0..20 {
                    let a = if (t + ep) % 3 == 0 { BRAKE } else { GAS };
                    let res = env.step(&[a; 5]).unwrap();
                    log.push((res.observations, res.rewards));
                }
            }
            log
        };
        assert_eq!(run(9), run(9));
    }
}
