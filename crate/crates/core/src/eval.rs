//! Protocol-quality measurement: pairwise message symmetry, probing
//! classifiers over frozen messages, capture breakdown, goal-distance
//! similarity, zero-shot cross-play, and message export.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::agents::{act, produce_message, AgentParams, HIDDEN, MESSAGE_DIM};
use crate::envs::{env_rng, make_env, EnvConfig, EnvError, EnvKind, StepInfo, TrajectoryRecord};
use crate::numerics::{adam_step, backward, AdamHyper, AdamState, Tape, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("expected a {expected} checkpoint, got {got}")]
    WrongEnv { expected: &'static str, got: &'static str },
    #[error("probe class {0} has zero samples")]
    EmptyClass(String),
    #[error("cross-play needs {0}")]
    InsufficientCheckpoints(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Aggregates over greedy evaluation episodes.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub success_rate: f64,
    pub rewards: Vec<f64>,
    pub lengths: Vec<usize>,
    pub successes: Vec<bool>,
    /// Prey captured per episode (predator-prey).
    pub captures: Vec<usize>,
}

/// Goal quadrant labels for the location probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GoalRegion {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Middle,
}

pub const GOAL_REGIONS: [GoalRegion; 5] = [
    GoalRegion::TopLeft,
    GoalRegion::TopRight,
    GoalRegion::BottomLeft,
    GoalRegion::BottomRight,
    GoalRegion::Middle,
];

impl GoalRegion {
    /// Middle is the central 5x5 block; elsewhere the quadrant relative to
    /// the center cell, with exact-center rows/columns resolving to Middle.
    pub fn from_goal(grid: usize, goal: (usize, usize)) -> GoalRegion {
        let c = grid / 2;
        let (r, col) = (goal.0 as isize, goal.1 as isize);
        let c = c as isize;
        if (r - c).abs() <= 2 && (col - c).abs() <= 2 {
            return GoalRegion::Middle;
        }
        if r == c || col == c {
            return GoalRegion::Middle;
        }
        match (r < c, col < c) {
            (true, true) => GoalRegion::TopLeft,
            (true, false) => GoalRegion::TopRight,
            (false, true) => GoalRegion::BottomLeft,
            (false, false) => GoalRegion::BottomRight,
        }
    }

    pub fn index(&self) -> usize {
        match self {
            GoalRegion::TopLeft => 0,
            GoalRegion::TopRight => 1,
            GoalRegion::BottomLeft => 2,
            GoalRegion::BottomRight => 3,
            GoalRegion::Middle => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GoalRegion::TopLeft => "top_left",
            GoalRegion::TopRight => "top_right",
            GoalRegion::BottomLeft => "bottom_left",
            GoalRegion::BottomRight => "bottom_right",
            GoalRegion::Middle => "middle",
        }
    }
}

/// Per-(step, agent) facts attached to an emitted message.
#[derive(Debug, Clone)]
pub struct MessageContext {
    pub goal_visible: bool,
    pub other_agent_visible: bool,
    pub goal_region: Option<GoalRegion>,
    pub goal_pos: Option<(usize, usize)>,
    pub active: bool,
}

/// Message source override for measurement harnesses: synthetic messengers
/// see the same observation plus the step context the pipeline extracts.
pub trait Messenger {
    fn message(&self, agent: usize, ctx: &MessageContext, obs: &[f64]) -> Vec<f64>;
}

/// One recorded evaluation step.
pub struct EvalStep {
    pub episode: usize,
    pub t: usize,
    pub messages: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub contexts: Vec<MessageContext>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub state: serde_json::Value,
    pub info: StepInfo,
    pub done: bool,
}

/// Run greedy evaluation episodes, recording everything the measurement
/// operations need. Parameters are cloned; the caller's agents are untouched.
fn run_recorded(
    agents: &[AgentParams],
    cfg: &EnvConfig,
    comm: bool,
    seed: u64,
    stream_base: u64,
    episodes: usize,
    messenger: Option<&dyn Messenger>,
) -> Result<Vec<EvalStep>, EvalError> {
    let n = cfg.n_agents;
    let mut team: Vec<AgentParams> = agents.to_vec();
    let mut rng = env_rng(seed, stream_base); // untouched under greedy actions
    let mut log = Vec::new();

    for episode in 0..episodes {
        let mut env = make_env(cfg, seed, stream_base + episode as u64)?;
        let mut obs: Vec<Tensor> = env.reset()?.into_iter().map(Tensor::vector).collect();
        let mut active = env.active_mask();
        let mut hidden = vec![Tensor::zeros(&[HIDDEN]); n];
        let mut last_msgs = vec![vec![0.0; MESSAGE_DIM]; n];
        let mut last_active = vec![false; n];

        for t in 0..cfg.max_steps {
            let probe = env.probe_info();
            let contexts: Vec<MessageContext> = (0..n)
                .map(|i| MessageContext {
                    goal_visible: probe.goal_visible[i],
                    other_agent_visible: probe.other_agent_visible[i],
                    goal_region: probe.goal_pos.map(|g| GoalRegion::from_goal(cfg.grid, g)),
                    goal_pos: probe.goal_pos,
                    active: active[i],
                })
                .collect();

            let mut actions = Vec::with_capacity(n);
            let mut msgs: Vec<Vec<f64>> = Vec::with_capacity(n);
            for i in 0..n {
                let mut data = Vec::with_capacity((n - 1) * MESSAGE_DIM);
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    if last_active[j] {
                        data.extend_from_slice(&last_msgs[j]);
                    } else {
                        data.extend_from_slice(&[0.0; MESSAGE_DIM]);
                    }
                }
                let received = vec![Tensor::vector(data)];
                let step = act(&mut team[i], &obs[i], &received, &hidden[i], &mut rng, comm, true);
                hidden[i] = step.hidden;
                actions.push(step.action);
                let msg = match messenger {
                    Some(m) if comm => m.message(i, &contexts[i], obs[i].data()),
                    _ => step.message.to_vec(),
                };
                msgs.push(msg);
            }

            let res = env.step(&actions).map_err(EvalError::Env)?;
            log.push(EvalStep {
                episode,
                t,
                messages: msgs.clone(),
                observations: obs.iter().map(|o| o.to_vec()).collect(),
                contexts,
                actions,
                rewards: res.rewards.clone(),
                state: env.state_summary(),
                info: res.info.clone(),
                done: res.done,
            });

            last_msgs = msgs;
            last_active = active.clone();
            obs = res.observations.into_iter().map(Tensor::vector).collect();
            active = env.active_mask();
            if res.done {
                break;
            }
        }
    }
    Ok(log)
}

fn stats_from_log(log: &[EvalStep], episodes: usize, kind: EnvKind, n_prey: usize) -> EpisodeStats {
    let mut rewards = vec![0.0; episodes];
    let mut lengths = vec![0usize; episodes];
    let mut captures = vec![0usize; episodes];
    let mut collisions = vec![0usize; episodes];
    let mut all_reached = vec![false; episodes];
    for s in log {
        let n = s.rewards.len() as f64;
        rewards[s.episode] += s.rewards.iter().sum::<f64>() / n;
        lengths[s.episode] += 1;
        captures[s.episode] += s.info.captures;
        collisions[s.episode] += s.info.collisions;
        all_reached[s.episode] |= s.info.all_reached;
    }
    let successes: Vec<bool> = (0..episodes)
        .map(|e| match kind {
            EnvKind::PredatorPrey => captures[e] >= n_prey,
            EnvKind::FindGoal => all_reached[e],
            EnvKind::TrafficJunction => collisions[e] == 0,
        })
        .collect();
    EpisodeStats {
        episodes,
        mean_reward: rewards.iter().sum::<f64>() / episodes as f64,
        mean_length: lengths.iter().sum::<usize>() as f64 / episodes as f64,
        success_rate: successes.iter().filter(|&&s| s).count() as f64 / episodes as f64,
        rewards,
        lengths,
        successes,
        captures,
    }
}

/// Greedy evaluation of a team; the shared backbone of `cmd_eval`, periodic
/// training evaluation, and cross-play cells.
pub fn run_episodes(
    agents: &[AgentParams],
    cfg: &EnvConfig,
    comm: bool,
    seed: u64,
    stream_base: u64,
    episodes: usize,
) -> Result<EpisodeStats, EvalError> {
    let log = run_recorded(agents, cfg, comm, seed, stream_base, episodes, None)?;
    Ok(stats_from_log(&log, episodes, cfg.kind, cfg.n_prey))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Mean pairwise message-function symmetry over recorded observations:
/// every agent j's observation is fed through every other agent i's message
/// function and compared, by cosine, with j's own message for it.
pub fn symmetry_over_observations(
    message_fns: &[&dyn Fn(&[f64]) -> Vec<f64>],
    observations: &[Vec<Vec<f64>>],
    active: Option<&[Vec<bool>]>,
) -> f64 {
    let n = message_fns.len();
    let mut total = 0.0;
    let mut steps = 0usize;
    for (t, obs_t) in observations.iter().enumerate() {
        let mut step_sum = 0.0;
        let mut agents_counted = 0usize;
        for j in 0..n {
            if let Some(a) = active {
                if !a[t][j] {
                    continue;
                }
            }
            let own = message_fns[j](&obs_t[j]);
            let mut pair_sum = 0.0;
            for (i, f) in message_fns.iter().enumerate() {
                if i == j {
                    continue;
                }
                pair_sum += cosine(&f(&obs_t[j]), &own);
            }
            step_sum += pair_sum / (n - 1) as f64;
            agents_counted += 1;
        }
        if agents_counted > 0 {
            total += step_sum / agents_counted as f64;
            steps += 1;
        }
    }
    if steps == 0 {
        0.0
    } else {
        total / steps as f64
    }
}

/// Protocol symmetry of a trained team over greedy evaluation episodes.
pub fn protocol_symmetry(
    agents: &[AgentParams],
    cfg: &EnvConfig,
    comm: bool,
    seed: u64,
    episodes: usize,
) -> Result<f64, EvalError> {
    let log = run_recorded(agents, cfg, comm, seed, 0x5E71, episodes, None)?;
    let team = agents.to_vec();
    let fns: Vec<Box<dyn Fn(&[f64]) -> Vec<f64>>> = team
        .iter()
        .map(|p| {
            let p = p.clone();
            Box::new(move |obs: &[f64]| {
                produce_message(&p, &Tensor::vector(obs.to_vec())).to_vec()
            }) as Box<dyn Fn(&[f64]) -> Vec<f64>>
        })
        .collect();
    let fn_refs: Vec<&dyn Fn(&[f64]) -> Vec<f64>> = fns.iter().map(|f| f.as_ref()).collect();
    let observations: Vec<Vec<Vec<f64>>> = log.iter().map(|s| s.observations.clone()).collect();
    let active: Vec<Vec<bool>> = log
        .iter()
        .map(|s| s.contexts.iter().map(|c| c.active).collect())
        .collect();
    Ok(symmetry_over_observations(&fn_refs, &observations, Some(&active)))
}

#[derive(Debug, Clone, Serialize)]
pub struct CaptureBreakdown {
    pub episodes: usize,
    pub no_prey: f64,
    pub one_prey: f64,
    pub two_prey: f64,
}

/// Percentage of evaluation episodes capturing zero, one, or both prey.
pub fn capture_breakdown(
    agents: &[AgentParams],
    cfg: &EnvConfig,
    comm: bool,
    seed: u64,
    episodes: usize,
) -> Result<CaptureBreakdown, EvalError> {
    if cfg.kind != EnvKind::PredatorPrey {
        return Err(EvalError::WrongEnv { expected: "predator_prey", got: cfg.kind.id() });
    }
    let stats = run_episodes(agents, cfg, comm, seed, 0xCA97, episodes)?;
    let count = |pred: &dyn Fn(usize) -> bool| {
        stats.captures.iter().filter(|&&c| pred(c)).count() as f64 * 100.0 / episodes as f64
    };
    Ok(CaptureBreakdown {
        episodes,
        no_prey: count(&|c| c == 0),
        one_prey: count(&|c| c == 1),
        two_prey: count(&|c| c >= 2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Visibility,
    Location,
}

impl ProbeTask {
    pub fn parse(s: &str) -> Option<ProbeTask> {
        match s {
            "visibility" => Some(ProbeTask::Visibility),
            "location" => Some(ProbeTask::Location),
            _ => None,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ProbeTask::Visibility => 2,
            ProbeTask::Location => 5,
        }
    }
}

/// Class-balanced message/label pairs with a seeded 70/30 split.
pub struct ProbeDataset {
    pub task: ProbeTask,
    pub train: Vec<(Vec<f64>, usize)>,
    pub test: Vec<(Vec<f64>, usize)>,
    pub per_class: usize,
}

/// Collect messages from find-goal episodes and label them for a probe task.
/// The location task keeps only goal-visible messages.
pub fn build_probe_dataset(
    agents: &[AgentParams],
    cfg: &EnvConfig,
    comm: bool,
    seed: u64,
    episodes: usize,
    task: ProbeTask,
    messenger: Option<&dyn Messenger>,
) -> Result<ProbeDataset, EvalError> {
    if cfg.kind != EnvKind::FindGoal {
        return Err(EvalError::WrongEnv { expected: "find_goal", got: cfg.kind.id() });
    }
    let log = run_recorded(agents, cfg, comm, seed, 0x9801, episodes, messenger)?;
    let mut by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); task.classes()];
    for step in &log {
        for (i, ctx) in step.contexts.iter().enumerate() {
            match task {
                ProbeTask::Visibility => {
                    by_class[usize::from(ctx.goal_visible)].push(step.messages[i].clone());
                }
                ProbeTask::Location => {
                    if ctx.goal_visible {
                        let region = ctx.goal_region.expect("find-goal exposes the goal");
                        by_class[region.index()].push(step.messages[i].clone());
                    }
                }
            }
        }
    }

    let per_class = by_class.iter().map(|c| c.len()).min().unwrap_or(0);
    if per_class == 0 {
        let empty = by_class.iter().position(|c| c.is_empty()).unwrap();
        let name = match task {
            ProbeTask::Visibility => if empty == 0 { "not_visible" } else { "visible" }.to_string(),
            ProbeTask::Location => GOAL_REGIONS[empty].name().to_string(),
        };
        return Err(EvalError::EmptyClass(name));
    }

    let mut rng = env_rng(seed, 0xBA1A);
    let mut samples: Vec<(Vec<f64>, usize)> = Vec::with_capacity(per_class * task.classes());
    for (label, class) in by_class.iter_mut().enumerate() {
        class.shuffle(&mut rng);
        for m in class.iter().take(per_class) {
            samples.push((m.clone(), label));
        }
    }
    samples.shuffle(&mut rng);
    let split = (samples.len() * 7) / 10;
    let test = samples.split_off(split);
    Ok(ProbeDataset { task, train: samples, test, per_class })
}

/// Train a small classifier on frozen messages and return held-out accuracy.
/// `depth` 2 adds one 32-wide hidden layer; 1 is a linear map.
pub fn train_probe(ds: &ProbeDataset, depth: usize, seed: u64) -> f64 {
    assert!(depth == 1 || depth == 2, "probe depth must be 1 or 2");
    let classes = ds.task.classes();
    let mut rng = env_rng(seed, 0x9806);
    let hidden = 32;
    let mut w1 = crate::numerics::scaled_uniform(
        &mut rng,
        &[if depth == 2 { hidden } else { classes }, MESSAGE_DIM],
        MESSAGE_DIM,
    );
    let mut b1 = Tensor::zeros(&[if depth == 2 { hidden } else { classes }]);
    let mut w2 = crate::numerics::scaled_uniform(&mut rng, &[classes, hidden], hidden);
    let mut b2 = Tensor::zeros(&[classes]);

    let b = ds.train.len();
    let mut xdata = Vec::with_capacity(b * MESSAGE_DIM);
    for (m, _) in &ds.train {
        xdata.extend_from_slice(m);
    }
    let x = Tensor::from_vec(vec![b, MESSAGE_DIM], xdata);
    let mut nll_weights = vec![0.0; b * classes];
    for (i, (_, label)) in ds.train.iter().enumerate() {
        nll_weights[i * classes + label] = -1.0 / b as f64;
    }

    let hp = AdamHyper { lr: 1e-3, eps: 1e-8, ..AdamHyper::default() };
    let mut states = [
        AdamState::new(w1.len()),
        AdamState::new(b1.len()),
        AdamState::new(w2.len()),
        AdamState::new(b2.len()),
    ];
    for _ in 0..200 {
        let tape = Tape::new();
        let tw1 = tape.watch(&w1);
        let tb1 = tape.watch(&b1);
        let tw2 = tape.watch(&w2);
        let tb2 = tape.watch(&b2);
        let logits = if depth == 2 {
            let h = x.matmul_nt(&tw1).add_row_broadcast(&tb1).relu();
            h.matmul_nt(&tw2).add_row_broadcast(&tb2)
        } else {
            x.matmul_nt(&tw1).add_row_broadcast(&tb1)
        };
        let loss = logits.row_log_softmax().weighted_sum(&nll_weights);
        let grads = backward(&loss).expect("probe backward");
        let mut params = [&mut w1, &mut b1, &mut w2, &mut b2];
        let tracked = [&tw1, &tb1, &tw2, &tb2];
        for i in 0..4 {
            if depth == 1 && i >= 2 {
                continue;
            }
            let g = grads.get_or_zeros(tracked[i]);
            adam_step(params[i], &g, &mut states[i], &hp).expect("probe adam");
        }
    }

    let mut correct = 0usize;
    for (m, label) in &ds.test {
        let xm = Tensor::vector(m.clone());
        let logits = if depth == 2 {
            let h = w1.matvec(&xm).add(&b1).relu();
            w2.matvec(&h).add(&b2)
        } else {
            w1.matvec(&xm).add(&b1)
        };
        let mut best = 0;
        for (i, &v) in logits.data().iter().enumerate() {
            if v > logits.data()[best] {
                best = i;
            }
        }
        if best == *label {
            correct += 1;
        }
    }
    correct as f64 / ds.test.len() as f64
}

/// Mean pairwise cosine similarity between goal-visible messages emitted
/// with the goal at (1,1) and at each diagonal anchor coordinate. `None`
/// marks a coordinate that produced no goal-visible messages.
pub fn goal_distance_similarity(
    agents: &[AgentParams],
    cfg: &EnvConfig,
    comm: bool,
    seed: u64,
    episodes_per_coord: usize,
    messenger: Option<&dyn Messenger>,
) -> Result<Vec<((usize, usize), Option<f64>)>, EvalError> {
    if cfg.kind != EnvKind::FindGoal {
        return Err(EvalError::WrongEnv { expected: "find_goal", got: cfg.kind.id() });
    }
    let collect = |coord: (usize, usize)| -> Result<Vec<Vec<f64>>, EvalError> {
        let mut fixed = cfg.clone();
        fixed.fg_goal_override = Some(coord);
        let log = run_recorded(
            agents,
            &fixed,
            comm,
            seed,
            0xD157 + coord.0 as u64 * 131 + coord.1 as u64,
            episodes_per_coord,
            messenger,
        )?;
        let mut msgs = Vec::new();
        for step in &log {
            for (i, ctx) in step.contexts.iter().enumerate() {
                if ctx.goal_visible {
                    msgs.push(step.messages[i].clone());
                }
            }
        }
        Ok(msgs)
    };

    let anchor = collect((1, 1))?;
    let mut out = Vec::new();
    for coord in [(5, 5), (9, 9), (13, 13)] {
        let other = collect(coord)?;
        if anchor.is_empty() || other.is_empty() {
            out.push((coord, None));
            continue;
        }
        let mut sum = 0.0;
        for a in &anchor {
            for b in &other {
                sum += cosine(a, b);
            }
        }
        out.push((coord, Some(sum / (anchor.len() * other.len()) as f64)));
    }
    Ok(out)
}

/// One trained team available for cross-play pairing.
pub struct TeamCheckpoint {
    pub method: crate::training::Method,
    pub seed: u64,
    pub agents: Vec<AgentParams>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossplayCell {
    pub method_a: String,
    pub method_b: String,
    pub pairings: usize,
    pub episodes_per_pairing: usize,
    /// Mean episodic reward (predator-prey) or episode length (find-goal).
    pub mean: f64,
    pub sd: f64,
    pub per_pairing: Vec<f64>,
}

/// Environment seed used for the episodes of one cross-play pairing.
pub fn crossplay_eval_seed(base_seed: u64, pairing: usize) -> u64 {
    base_seed ^ (0xCE11 + pairing as u64)
}

/// Zero-shot cross-play between two methods: teams that never co-trained are
/// mixed and evaluated greedily. Predator-prey pairs 2+2 agents; find-goal
/// averages the 2-vs-1 and 1-vs-2 compositions. Intra-method cells require
/// at least two training seeds.
pub fn crossplay_eval(
    teams: &[TeamCheckpoint],
    method_a: crate::training::Method,
    method_b: crate::training::Method,
    cfg: &EnvConfig,
    pairing_seeds: usize,
    episodes: usize,
    base_seed: u64,
) -> Result<CrossplayCell, EvalError> {
    if cfg.kind == EnvKind::TrafficJunction {
        return Err(EvalError::WrongEnv { expected: "predator_prey or find_goal", got: cfg.kind.id() });
    }
    let pool_a: Vec<&TeamCheckpoint> = teams.iter().filter(|t| t.method == method_a).collect();
    let pool_b: Vec<&TeamCheckpoint> = teams.iter().filter(|t| t.method == method_b).collect();
    if pool_a.is_empty() || pool_b.is_empty() {
        return Err(EvalError::InsufficientCheckpoints(format!(
            "at least one team per method ({} x {})",
            method_a.id(),
            method_b.id()
        )));
    }
    if method_a == method_b {
        let distinct: std::collections::BTreeSet<u64> = pool_a.iter().map(|t| t.seed).collect();
        if distinct.len() < 2 {
            return Err(EvalError::InsufficientCheckpoints(
                "two distinct seeds for an intra-method pairing (agents must not have co-trained)"
                    .into(),
            ));
        }
    }

    let n = cfg.n_agents;
    let mut per_pairing = Vec::with_capacity(pairing_seeds);
    for pairing in 0..pairing_seeds {
        let mut rng = env_rng(base_seed, 0xC0A + pairing as u64);
        let (ta, tb) = loop {
            let ta = pool_a[rng.gen_range(0..pool_a.len())];
            let tb = pool_b[rng.gen_range(0..pool_b.len())];
            if method_a != method_b || ta.seed != tb.seed {
                break (ta, tb);
            }
        };

        // Canonical slot assignment: the first `from_a` slots keep team A's
        // agents for those slots, the rest keep team B's. A team composed
        // with itself is then exactly the original team, so self-pairing
        // reproduces standard evaluation under shared seeds.
        let compose = |from_a: usize| -> Vec<AgentParams> {
            (0..n)
                .map(|s| if s < from_a { ta.agents[s].clone() } else { tb.agents[s].clone() })
                .collect()
        };

        let eval_seed = crossplay_eval_seed(base_seed, pairing);
        let score = match cfg.kind {
            EnvKind::PredatorPrey => {
                let team = compose(n / 2);
                run_episodes(&team, cfg, true, eval_seed, 0, episodes)?.mean_reward
            }
            EnvKind::FindGoal => {
                let heavy_a = compose(2);
                let heavy_b = compose(1);
                let a = run_episodes(&heavy_a, cfg, true, eval_seed, 0, episodes)?.mean_length;
                let b = run_episodes(&heavy_b, cfg, true, eval_seed, 1000, episodes)?.mean_length;
                0.5 * (a + b)
            }
            EnvKind::TrafficJunction => unreachable!(),
        };
        per_pairing.push(score);
    }

    let mean = per_pairing.iter().sum::<f64>() / per_pairing.len() as f64;
    let var = per_pairing.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / per_pairing.len() as f64;
    Ok(CrossplayCell {
        method_a: method_a.id().to_string(),
        method_b: method_b.id().to_string(),
        pairings: pairing_seeds,
        episodes_per_pairing: episodes,
        mean,
        sd: var.sqrt(),
        per_pairing,
    })
}

/// CSV export of per-step messages with context columns, for external
/// clustering and visualization.
pub fn dump_messages(
    agents: &[AgentParams],
    cfg: &EnvConfig,
    comm: bool,
    seed: u64,
    episodes: usize,
    path: &Path,
) -> Result<usize, EvalError> {
    let log = run_recorded(agents, cfg, comm, seed, 0xD0, episodes, None)?;
    let mut out = String::from(
        "episode,t,agent,m1,m2,m3,m4,goal_visible,other_agent_visible,goal_region\n",
    );
    let mut rows = 0;
    for step in &log {
        for (i, msg) in step.messages.iter().enumerate() {
            let ctx = &step.contexts[i];
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                step.episode,
                step.t,
                i,
                msg[0],
                msg[1],
                msg[2],
                msg[3],
                u8::from(ctx.goal_visible),
                u8::from(ctx.other_agent_visible),
                ctx.goal_region.map(|r| r.name()).unwrap_or(""),
            ));
            rows += 1;
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(rows)
}

/// JSON-lines trajectory export (one record per step).
pub fn dump_trajectories(
    agents: &[AgentParams],
    cfg: &EnvConfig,
    comm: bool,
    seed: u64,
    episodes: usize,
    path: &Path,
) -> Result<usize, EvalError> {
    let log = run_recorded(agents, cfg, comm, seed, 0xD1, episodes, None)?;
    let mut out = String::new();
    for step in &log {
        let rec = TrajectoryRecord {
            step: step.t,
            state: step.state.clone(),
            observations: step.observations.clone(),
            actions: step.actions.clone(),
            rewards: step.rewards.clone(),
            messages: step.messages.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, out)?;
    Ok(log.len())
}
