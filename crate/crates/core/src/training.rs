//! Rollout collection over parallel environment instances, n-step
//! actor-critic losses, method-specific loss assembly with its gradient
//! routing, optimization, metrics, and checkpointing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    act, decode_observation, policy_forward, produce_message, produce_message_from_encoding,
    AgentParams, HIDDEN, MESSAGE_DIM,
};
use crate::comm::{cacl_loss, pl_loss, CommError, ContrastiveConfig, ContrastiveMode, MessageBatch};
use crate::envs::{env_rng, make_env, EnvConfig, EnvError, Environment, EnvKind};
use crate::numerics::{
    adam_step, backward, AdamHyper, AdamState, NumericsError, Tape, Tensor,
};

/// RNG stream ids; environment instances use streams 0..instances.
const STREAM_ACTIONS: u64 = 1 << 40;
const STREAM_AGENT_INIT: u64 = 1 << 41;
const STREAM_SIMCLR: u64 = 1 << 42;
const STREAM_EVAL: u64 = 1 << 43;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration} (agent {agent}): {component}")]
    NonFiniteLoss { iteration: usize, agent: usize, component: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Iac,
    Dial,
    Pl,
    Aecomm,
    Cacl,
    CaclDial,
    AecommDial,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "iac" => Some(Method::Iac),
            "dial" => Some(Method::Dial),
            "pl" => Some(Method::Pl),
            "aecomm" => Some(Method::Aecomm),
            "cacl" => Some(Method::Cacl),
            "cacl_dial" => Some(Method::CaclDial),
            "aecomm_dial" => Some(Method::AecommDial),
            _ => None,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Method::Iac => "iac",
            Method::Dial => "dial",
            Method::Pl => "pl",
            Method::Aecomm => "aecomm",
            Method::Cacl => "cacl",
            Method::CaclDial => "cacl_dial",
            Method::AecommDial => "aecomm_dial",
        }
    }

    pub fn has_comm(&self) -> bool {
        !matches!(self, Method::Iac)
    }

    /// Whether received messages stay differentiable at the receiver.
    pub fn is_dial(&self) -> bool {
        matches!(self, Method::Dial | Method::CaclDial | Method::AecommDial)
    }

    pub fn uses_cacl(&self) -> bool {
        matches!(self, Method::Cacl | Method::CaclDial)
    }

    pub fn uses_aecomm(&self) -> bool {
        matches!(self, Method::Aecomm | Method::AecommDial)
    }

    pub fn uses_pl(&self) -> bool {
        matches!(self, Method::Pl)
    }
}

/// Route of received messages for a method (the differentiable-channel
/// contract).
pub fn dial_route(method: Method) -> crate::comm::MessageRouting {
    if method.is_dial() {
        crate::comm::MessageRouting::Differentiable
    } else {
        crate::comm::MessageRouting::Detached
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub adam_eps: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub grad_clip: f64,
    pub pl_coef: f64,
    pub instances: usize,
    pub nstep: usize,
    pub segment_len: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 3e-4,
            adam_eps: 1e-3,
            gamma: 0.99,
            entropy_coef: 0.01,
            value_coef: 0.5,
            grad_clip: 2500.0,
            pl_coef: 0.01,
            instances: 12,
            nstep: 5,
            segment_len: 20,
        }
    }
}

fn serialize_contrastive<S: serde::Serializer>(
    c: &ContrastiveConfig,
    s: S,
) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeStruct;
    let mut st = s.serialize_struct("contrastive", 4)?;
    st.serialize_field("window", &c.window)?;
    st.serialize_field("temperature", &c.temperature)?;
    st.serialize_field("kappa", &c.kappa)?;
    st.serialize_field("mode", &c.mode)?;
    st.end()
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub method: Method,
    pub hyper: Hyper,
    #[serde(serialize_with = "serialize_contrastive")]
    pub contrastive: ContrastiveConfig,
    pub total_steps: usize,
    pub seed: u64,
    /// Iterations between metric rows / evaluation passes.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Iterations between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
}

impl ExperimentConfig {
    pub fn new(env: EnvConfig, method: Method) -> ExperimentConfig {
        ExperimentConfig {
            env,
            method,
            hyper: Hyper::default(),
            contrastive: ContrastiveConfig::default(),
            total_steps: 100_000,
            seed: 1,
            eval_interval: 50,
            eval_episodes: 12,
            checkpoint_interval: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.env.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.contrastive.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let h = &self.hyper;
        if h.lr <= 0.0 || h.adam_eps <= 0.0 {
            return Err(TrainError::Config("learning rate and Adam eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&h.gamma) {
            return Err(TrainError::Config(format!("gamma {} outside [0, 1)", h.gamma)));
        }
        if h.entropy_coef < 0.0 || h.value_coef < 0.0 || h.pl_coef < 0.0 || h.grad_clip < 0.0 {
            return Err(TrainError::Config("loss coefficients must be non-negative".into()));
        }
        if h.instances == 0 || h.segment_len == 0 || h.nstep == 0 {
            return Err(TrainError::Config("instances, segment, nstep must be positive".into()));
        }
        if self.method.uses_cacl() && h.instances < 2 {
            return Err(TrainError::Config(
                "contrastive negatives need at least 2 parallel instances".into(),
            ));
        }
        if self.total_steps == 0 {
            return Err(TrainError::Config("total_steps must be positive".into()));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(TrainError::Config("eval interval/episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        let per_iter = self.hyper.instances * self.hyper.segment_len;
        self.total_steps.div_ceil(per_iter)
    }

    /// Content hash of the resolved config.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Per-instance sequences collected under frozen parameter snapshots.
pub struct RolloutBatch {
    /// [instance][t][agent]
    pub obs: Vec<Vec<Vec<Tensor>>>,
    /// Concatenated (N−1)·4 received-message vector per [instance][t][agent].
    pub incoming: Vec<Vec<Vec<Tensor>>>,
    pub actions: Vec<Vec<Vec<usize>>>,
    pub rewards: Vec<Vec<Vec<f64>>>,
    /// done[instance][t]: episode terminated at the end of step t.
    pub dones: Vec<Vec<bool>>,
    pub active: Vec<Vec<Vec<bool>>>,
    /// Messages emitted at t (zero vectors without communication).
    pub messages: Vec<Vec<Vec<Tensor>>>,
    pub values: Vec<Vec<Vec<f64>>>,
    pub log_probs: Vec<Vec<Vec<f64>>>,
    /// GRU state per [instance][agent] at segment start.
    pub hidden0: Vec<Vec<Tensor>>,
    /// Episode id per [instance][t]; increments after each done.
    pub episode_ids: Vec<Vec<usize>>,
    pub bootstrap_obs: Vec<Vec<Tensor>>,
    pub bootstrap_incoming: Vec<Vec<Tensor>>,
    /// Episodes completed during the segment: (return per agent mean, length,
    /// success).
    pub finished_episodes: Vec<(f64, usize, bool)>,
}

impl RolloutBatch {
    pub fn env_steps(&self) -> usize {
        self.dones.iter().map(|d| d.len()).sum()
    }
}

/// Live state of one parallel environment instance between segments.
struct InstanceState {
    env: Box<dyn Environment>,
    obs: Vec<Tensor>,
    hidden: Vec<Tensor>,
    last_messages: Vec<Tensor>,
    last_active: Vec<bool>,
    active_now: Vec<bool>,
    episode_id: usize,
    ep_return: f64,
    ep_len: usize,
    ep_captures: usize,
    ep_collisions: usize,
    ep_all_reached: bool,
}

impl InstanceState {
    fn new(env_cfg: &EnvConfig, seed: u64, instance: u64) -> Result<InstanceState, EnvError> {
        let mut env = make_env(env_cfg, seed, instance)?;
        let obs = env.reset()?.into_iter().map(Tensor::vector).collect();
        let n = env_cfg.n_agents;
        let active_now = env.active_mask();
        Ok(InstanceState {
            env,
            obs,
            hidden: vec![Tensor::zeros(&[HIDDEN]); n],
            last_messages: vec![Tensor::zeros(&[MESSAGE_DIM]); n],
            last_active: vec![false; n],
            active_now,
            episode_id: 0,
            ep_return: 0.0,
            ep_len: 0,
            ep_captures: 0,
            ep_collisions: 0,
            ep_all_reached: false,
        })
    }

    /// Received-message vector for `agent`: the other agents' previous-step
    /// messages in ascending sender order, zero-masked for senders that were
    /// inactive (traffic junction) and zeroed at episode starts.
    fn incoming_for(&self, agent: usize) -> Tensor {
        let n = self.obs.len();
        let mut data = Vec::with_capacity((n - 1) * MESSAGE_DIM);
        for j in 0..n {
            if j == agent {
                continue;
            }
            if self.last_active[j] {
                data.extend_from_slice(self.last_messages[j].data());
            } else {
                data.extend_from_slice(&[0.0; MESSAGE_DIM]);
            }
        }
        Tensor::vector(data)
    }

    fn begin_episode(&mut self, n: usize) {
        self.hidden = vec![Tensor::zeros(&[HIDDEN]); n];
        self.last_messages = vec![Tensor::zeros(&[MESSAGE_DIM]); n];
        self.last_active = vec![false; n];
        self.episode_id += 1;
        self.ep_return = 0.0;
        self.ep_len = 0;
        self.ep_captures = 0;
        self.ep_collisions = 0;
        self.ep_all_reached = false;
    }

    fn episode_success(&self, kind: EnvKind, prey: usize) -> bool {
        match kind {
            EnvKind::PredatorPrey => self.ep_captures >= prey,
            EnvKind::FindGoal => self.ep_all_reached,
            EnvKind::TrafficJunction => self.ep_collisions == 0,
        }
    }
}

/// Advance every instance `segment_len` steps under frozen parameters.
fn collect_rollout(
    instances: &mut [InstanceState],
    agents: &mut [AgentParams],
    cfg: &ExperimentConfig,
    action_rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch, TrainError> {
    let n = cfg.env.n_agents;
    let t_len = cfg.hyper.segment_len;
    let e_len = instances.len();
    let comm = cfg.method.has_comm();

    let mut batch = RolloutBatch {
        obs: vec![Vec::with_capacity(t_len); e_len],
        incoming: vec![Vec::with_capacity(t_len); e_len],
        actions: vec![Vec::with_capacity(t_len); e_len],
        rewards: vec![Vec::with_capacity(t_len); e_len],
        dones: vec![Vec::with_capacity(t_len); e_len],
        active: vec![Vec::with_capacity(t_len); e_len],
        messages: vec![Vec::with_capacity(t_len); e_len],
        values: vec![Vec::with_capacity(t_len); e_len],
        log_probs: vec![Vec::with_capacity(t_len); e_len],
        hidden0: instances.iter().map(|s| s.hidden.clone()).collect(),
        episode_ids: vec![Vec::with_capacity(t_len); e_len],
        bootstrap_obs: Vec::with_capacity(e_len),
        bootstrap_incoming: Vec::with_capacity(e_len),
        finished_episodes: Vec::new(),
    };

    for _ in 0..t_len {
        for (e, state) in instances.iter_mut().enumerate() {
            let incoming: Vec<Tensor> = (0..n).map(|i| state.incoming_for(i)).collect();
            let mut actions = Vec::with_capacity(n);
            let mut msgs = Vec::with_capacity(n);
            let mut values = Vec::with_capacity(n);
            let mut logps = Vec::with_capacity(n);
            for i in 0..n {
                let received: Vec<Tensor> = vec![incoming[i].clone()];
                let step = act(
                    &mut agents[i],
                    &state.obs[i],
                    &received,
                    &state.hidden[i],
                    action_rng,
                    comm,
                    false,
                );
                actions.push(step.action);
                values.push(step.value.item());
                logps.push(step.log_prob.item());
                msgs.push(step.message);
                state.hidden[i] = step.hidden;
            }

            let res = state.env.step(&actions)?;

            batch.obs[e].push(state.obs.clone());
            batch.incoming[e].push(incoming);
            batch.actions[e].push(actions);
            batch.rewards[e].push(res.rewards.clone());
            batch.dones[e].push(res.done);
            batch.active[e].push(state.active_now.clone());
            batch.messages[e].push(msgs.clone());
            batch.values[e].push(values);
            batch.log_probs[e].push(logps);
            batch.episode_ids[e].push(state.episode_id);

            state.ep_return +=
                res.rewards.iter().sum::<f64>() / n as f64;
            state.ep_len += 1;
            state.ep_captures += res.info.captures;
            state.ep_collisions += res.info.collisions;
            state.ep_all_reached |= res.info.all_reached;

            if res.done {
                batch.finished_episodes.push((
                    state.ep_return,
                    state.ep_len,
                    state.episode_success(cfg.env.kind, cfg.env.n_prey),
                ));
                let fresh = state.env.reset()?;
                state.obs = fresh.into_iter().map(Tensor::vector).collect();
                state.begin_episode(n);
                state.active_now = state.env.active_mask();
            } else {
                state.obs = res.observations.into_iter().map(Tensor::vector).collect();
                state.last_messages = msgs;
                state.last_active = std::mem::replace(&mut state.active_now, state.env.active_mask());
            }
        }
    }
    for state in instances.iter() {
        batch.bootstrap_obs.push(state.obs.clone());
        batch
            .bootstrap_incoming
            .push((0..n).map(|i| state.incoming_for(i)).collect());
    }
    Ok(batch)
}

/// Truncated n-step return targets:
///   G_t = Σ_{k<n} γ^k r_{t+k} + γ^n V(s_{t+n})
/// with no bootstrapping across episode ends. `values` has length T+1; its
/// last entry is the post-segment bootstrap value.
pub fn nstep_returns(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    n: usize,
) -> Result<Vec<f64>, TrainError> {
    let t_len = rewards.len();
    if dones.len() != t_len || values.len() != t_len + 1 {
        return Err(TrainError::Config(format!(
            "nstep_returns: rewards {}, dones {}, values {} (want T+1)",
            rewards.len(),
            dones.len(),
            values.len()
        )));
    }
    if n == 0 {
        return Err(TrainError::Config("nstep_returns: n must be positive".into()));
    }
    let mut out = vec![0.0; t_len];
    for t in 0..t_len {
        let mut g = 0.0;
        let mut disc = 1.0;
        for k in 0..n {
            g += disc * rewards[t + k];
            if dones[t + k] {
                break;
            }
            disc *= gamma;
            if t + k + 1 == t_len {
                g += disc * values[t_len];
                break;
            }
            if k + 1 == n {
                g += disc * values[t + k + 1];
            }
        }
        out[t] = g;
    }
    Ok(out)
}

/// Scale all gradients down when their joint L2 norm exceeds `max_norm`;
/// returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Mean losses of one learner pass, for the metrics stream.
#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub policy: f64,
    pub value: f64,
    pub comm: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

struct AgentReplay {
    /// Per active step: (log-prob of taken action, value, entropy).
    logp: Vec<Tensor>,
    value: Vec<Tensor>,
    entropy: Vec<Tensor>,
    /// Return targets aligned with the active steps.
    targets: Vec<f64>,
    advantages: Vec<f64>,
    /// Logit pairs for positive listening.
    pl_logits: Vec<(Tensor, Tensor)>,
    /// Stop-gradient observation encodings per (instance, t), for message
    /// recomputation.
    encodings: Vec<Vec<Tensor>>,
}

/// Replay one agent's segment on a tape. Messages the agent received come
/// from storage: constants, which is exactly the detached routing of
/// non-differentiable channels.
fn replay_agent(
    tracked: &mut AgentParams,
    master: &mut AgentParams,
    agent: usize,
    batch: &RolloutBatch,
    cfg: &ExperimentConfig,
) -> Result<AgentReplay, TrainError> {
    let comm = cfg.method.has_comm();
    let with_pl = cfg.method.uses_pl();
    let e_len = batch.obs.len();
    let t_len = cfg.hyper.segment_len;
    let mut rep = AgentReplay {
        logp: Vec::new(),
        value: Vec::new(),
        entropy: Vec::new(),
        targets: Vec::new(),
        advantages: Vec::new(),
        pl_logits: Vec::new(),
        encodings: vec![Vec::with_capacity(t_len); e_len],
    };
    let zero_inc = Tensor::zeros(&[(cfg.env.n_agents - 1) * MESSAGE_DIM]);

    for e in 0..e_len {
        let mut h = batch.hidden0[e][agent].clone();
        let mut h_bar = h.clone();
        let mut step_values = Vec::with_capacity(t_len + 1);
        let mut flat: Vec<Option<usize>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let obs = &batch.obs[e][t][agent];
            let inc = &batch.incoming[e][t][agent];
            let out = policy_forward(tracked, obs, inc, &h, comm);
            h = out.hidden;
            rep.encodings[e].push(out.obs_encoding.detach());
            step_values.push(out.value.item());
            if batch.active[e][t][agent] {
                let lsm = out.logits.log_softmax();
                let picked = lsm.pick(batch.actions[e][t][agent]);
                let probs = lsm.exp();
                let ent = probs.mul(&lsm).sum().neg();
                flat.push(Some(rep.logp.len()));
                rep.logp.push(picked);
                rep.value.push(out.value.clone());
                rep.entropy.push(ent);
                if with_pl {
                    let out_bar = policy_forward(tracked, obs, &zero_inc, &h_bar, comm);
                    h_bar = out_bar.hidden;
                    rep.pl_logits.push((out.logits.clone(), out_bar.logits));
                } else if comm {
                    // keep the zeroed chain aligned even when unused
                }
            } else {
                flat.push(None);
                if with_pl {
                    let out_bar = policy_forward(tracked, obs, &zero_inc, &h_bar, comm);
                    h_bar = out_bar.hidden;
                }
            }
            if batch.dones[e][t] {
                h = Tensor::zeros(&[HIDDEN]);
                h_bar = Tensor::zeros(&[HIDDEN]);
            }
        }

        // Post-segment bootstrap from the master copy; targets stay constant.
        let boot = if batch.dones[e][t_len - 1] {
            0.0
        } else {
            policy_forward(
                master,
                &batch.bootstrap_obs[e][agent],
                &batch.bootstrap_incoming[e][agent],
                &h.detach(),
                comm,
            )
            .value
            .item()
        };
        step_values.push(boot);

        let rewards: Vec<f64> = (0..t_len).map(|t| batch.rewards[e][t][agent]).collect();
        let returns =
            nstep_returns(&rewards, &step_values, &batch.dones[e], cfg.hyper.gamma, cfg.hyper.nstep)?;
        for t in 0..t_len {
            if let Some(_idx) = flat[t] {
                rep.targets.push(returns[t]);
                rep.advantages.push(returns[t] - step_values[t]);
            }
        }
    }
    Ok(rep)
}

/// Assemble the actor-critic loss from a replay:
///   L_RL = policy + value_coef · value − entropy_coef · entropy.
fn rl_loss(rep: &AgentReplay, hyper: &Hyper, breakdown: &mut LossBreakdown) -> Option<Tensor> {
    let count = rep.logp.len();
    if count == 0 {
        return None;
    }
    let inv = 1.0 / count as f64;
    let logp_refs: Vec<&Tensor> = rep.logp.iter().collect();
    let stacked_logp = Tensor::stack_rows(&logp_refs).reshape(&[count]);
    let weights: Vec<f64> = rep.advantages.iter().map(|a| -a * inv).collect();
    let policy = stacked_logp.weighted_sum(&weights);

    let value_refs: Vec<&Tensor> = rep.value.iter().collect();
    let stacked_v = Tensor::stack_rows(&value_refs).reshape(&[count]);
    let err = stacked_v.sub(&Tensor::vector(rep.targets.clone()));
    let value = err.mul(&err).mean();

    let ent_refs: Vec<&Tensor> = rep.entropy.iter().collect();
    let entropy = Tensor::stack_rows(&ent_refs).reshape(&[count]).mean();

    breakdown.policy += policy.item();
    breakdown.value += value.item();
    breakdown.entropy += entropy.item();

    Some(
        policy
            .add(&value.scale(hyper.value_coef))
            .add(&entropy.scale(-hyper.entropy_coef)),
    )
}

/// Messages for one agent's grounding loss: its own recomputed through the
/// tracked message head over stop-gradient encodings, everyone else's from
/// storage as constants.
fn grounding_batch(
    tracked: &AgentParams,
    agent: usize,
    encodings: &[Vec<Tensor>],
    batch: &RolloutBatch,
) -> Result<(MessageBatch, Vec<Tensor>), TrainError> {
    let mut mb = MessageBatch::new();
    let mut own = Vec::new();
    for e in 0..batch.obs.len() {
        let mut steps = Vec::with_capacity(batch.obs[e].len());
        for t in 0..batch.obs[e].len() {
            let mut row = Vec::with_capacity(batch.messages[e][t].len());
            for j in 0..batch.messages[e][t].len() {
                if j == agent {
                    let m = produce_message_from_encoding(tracked, &encodings[e][t]);
                    if batch.active[e][t][j] {
                        own.push(m.clone());
                    }
                    row.push(m);
                } else {
                    row.push(batch.messages[e][t][j].detach());
                }
            }
            steps.push(row);
        }
        mb.push_trajectory(steps, batch.episode_ids[e].clone(), {
            (0..batch.active[e].len()).map(|t| batch.active[e][t].clone()).collect()
        })?;
    }
    Ok((mb, own))
}

fn own_active_observations(batch: &RolloutBatch, agent: usize) -> Vec<Tensor> {
    let mut out = Vec::new();
    for e in 0..batch.obs.len() {
        for t in 0..batch.obs[e].len() {
            if batch.active[e][t][agent] {
                out.push(batch.obs[e][t][agent].clone());
            }
        }
    }
    out
}

/// Per-agent gradient buffers in `for_each_param` order.
type AgentGrads = Vec<Vec<f64>>;

fn collect_grads(tracked: &AgentParams, grads: &crate::numerics::Gradients) -> AgentGrads {
    let mut out = Vec::new();
    tracked.for_each_param(&mut |_, t| out.push(grads.get_or_zeros(t)));
    out
}

/// One learner pass for methods whose channels are detached: each agent owns
/// a tape, other agents' messages are constants, so cross-agent gradients
/// are structurally zero.
fn learn_detached(
    agents: &mut [AgentParams],
    batch: &RolloutBatch,
    cfg: &ExperimentConfig,
    simclr_rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<(Vec<AgentGrads>, LossBreakdown), TrainError> {
    let n = agents.len();
    let mut breakdown = LossBreakdown::default();
    let mut all = Vec::with_capacity(n);
    for agent in 0..n {
        let tape = Tape::new();
        let mut master = agents[agent].clone();
        let mut tracked = agents[agent].tracked(&tape);
        let rep = replay_agent(&mut tracked, &mut master, agent, batch, cfg)?;
        let mut total = rl_loss(&rep, &cfg.hyper, &mut breakdown);

        if cfg.method.uses_cacl() && cfg.contrastive.kappa > 0.0 {
            let (mb, _) = grounding_batch(&tracked, agent, &rep.encodings, batch)?;
            match cacl_loss(&mb, &cfg.contrastive, simclr_rng) {
                Ok(l) => {
                    breakdown.comm += l.item();
                    let scaled = l.scale(cfg.contrastive.kappa);
                    total = Some(match total {
                        Some(t) => t.add(&scaled),
                        None => scaled,
                    });
                }
                // A segment without enough active messages contributes no
                // grounding signal.
                Err(CommError::TooFewMessages(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if cfg.method.uses_aecomm() {
            let (_, own) = grounding_batch(&tracked, agent, &rep.encodings, batch)?;
            let obs = own_active_observations(batch, agent);
            if !obs.is_empty() {
                let l = crate::comm::aecomm_loss(&obs, &own, &tracked)?;
                breakdown.comm += l.item();
                total = Some(match total {
                    Some(t) => t.add(&l),
                    None => l,
                });
            }
        }
        if cfg.method.uses_pl() && !rep.pl_logits.is_empty() {
            let with: Vec<Tensor> = rep.pl_logits.iter().map(|(a, _)| a.clone()).collect();
            let zeroed: Vec<Tensor> = rep.pl_logits.iter().map(|(_, b)| b.clone()).collect();
            let l = pl_loss(&with, &zeroed)?;
            breakdown.comm += l.item();
            let scaled = l.scale(cfg.hyper.pl_coef);
            total = Some(match total {
                Some(t) => t.add(&scaled),
                None => scaled,
            });
        }

        let Some(total) = total else {
            all.push(vec![]);
            continue;
        };
        if !total.item().is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration,
                agent,
                component: "total".into(),
            });
        }
        let grads = backward(&total)?;
        all.push(collect_grads(&tracked, &grads));
    }
    breakdown.policy /= n as f64;
    breakdown.value /= n as f64;
    breakdown.comm /= n as f64;
    breakdown.entropy /= n as f64;
    Ok((all, breakdown))
}

/// One learner pass for differentiable channels: all agents share a tape,
/// messages are recomputed tracked and delivered to the receivers, so each
/// receiver's loss backpropagates into the senders' message heads and
/// observation encoders.
fn learn_dial(
    agents: &mut [AgentParams],
    batch: &RolloutBatch,
    cfg: &ExperimentConfig,
    simclr_rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<(Vec<AgentGrads>, LossBreakdown), TrainError> {
    let n = agents.len();
    let e_len = batch.obs.len();
    let t_len = cfg.hyper.segment_len;
    let mut breakdown = LossBreakdown::default();

    let tape = Tape::new();
    let mut tracked: Vec<AgentParams> = agents.iter().map(|a| a.tracked(&tape)).collect();
    let mut masters: Vec<AgentParams> = agents.to_vec();

    let mut reps: Vec<AgentReplay> = (0..n)
        .map(|_| AgentReplay {
            logp: Vec::new(),
            value: Vec::new(),
            entropy: Vec::new(),
            targets: Vec::new(),
            advantages: Vec::new(),
            pl_logits: Vec::new(),
            encodings: vec![Vec::with_capacity(t_len); e_len],
        })
        .collect();

    let zero_msg = Tensor::zeros(&[MESSAGE_DIM]);
    for e in 0..e_len {
        let mut hidden: Vec<Tensor> = (0..n).map(|i| batch.hidden0[e][i].clone()).collect();
        // Tracked messages of the previous step, zero-masked by activity.
        let mut prev: Option<Vec<Tensor>> = None;
        let mut prev_active: Vec<bool> = vec![false; n];
        let mut step_values: Vec<Vec<f64>> = vec![Vec::with_capacity(t_len + 1); n];
        for t in 0..t_len {
            let msgs: Vec<Tensor> = (0..n)
                .map(|i| produce_message(&tracked[i], &batch.obs[e][t][i]))
                .collect();
            for i in 0..n {
                let inc = match &prev {
                    // Segment start: stored constants (gradient truncation).
                    None => batch.incoming[e][t][i].clone(),
                    Some(prev) => {
                        let parts: Vec<&Tensor> = (0..n)
                            .filter(|&j| j != i)
                            .map(|j| if prev_active[j] { &prev[j] } else { &zero_msg })
                            .collect();
                        Tensor::concat(&parts)
                    }
                };
                let out = policy_forward(&mut tracked[i], &batch.obs[e][t][i], &inc, &hidden[i], true);
                hidden[i] = out.hidden;
                reps[i].encodings[e].push(out.obs_encoding.detach());
                step_values[i].push(out.value.item());
                if batch.active[e][t][i] {
                    let lsm = out.logits.log_softmax();
                    let picked = lsm.pick(batch.actions[e][t][i]);
                    let probs = lsm.exp();
                    let ent = probs.mul(&lsm).sum().neg();
                    reps[i].logp.push(picked);
                    reps[i].value.push(out.value.clone());
                    reps[i].entropy.push(ent);
                }
            }
            if batch.dones[e][t] {
                hidden = (0..n).map(|_| Tensor::zeros(&[HIDDEN])).collect();
                prev = None;
                prev_active = vec![false; n];
            } else {
                prev_active = batch.active[e][t].clone();
                prev = Some(msgs);
            }
        }
        for i in 0..n {
            let boot = if batch.dones[e][t_len - 1] {
                0.0
            } else {
                policy_forward(
                    &mut masters[i],
                    &batch.bootstrap_obs[e][i],
                    &batch.bootstrap_incoming[e][i],
                    &hidden[i].detach(),
                    true,
                )
                .value
                .item()
            };
            step_values[i].push(boot);
            let rewards: Vec<f64> = (0..t_len).map(|t| batch.rewards[e][t][i]).collect();
            let returns = nstep_returns(
                &rewards,
                &step_values[i],
                &batch.dones[e],
                cfg.hyper.gamma,
                cfg.hyper.nstep,
            )?;
            for t in 0..t_len {
                if batch.active[e][t][i] {
                    reps[i].targets.push(returns[t]);
                    reps[i].advantages.push(returns[t] - step_values[i][t]);
                }
            }
        }
    }

    let mut total: Option<Tensor> = None;
    for i in 0..n {
        if let Some(l) = rl_loss(&reps[i], &cfg.hyper, &mut breakdown) {
            total = Some(match total {
                Some(t) => t.add(&l),
                None => l,
            });
        }
        if cfg.method.uses_cacl() && cfg.contrastive.kappa > 0.0 {
            let (mb, _) = grounding_batch(&tracked[i], i, &reps[i].encodings, batch)?;
            match cacl_loss(&mb, &cfg.contrastive, simclr_rng) {
                Ok(l) => {
                    breakdown.comm += l.item();
                    let scaled = l.scale(cfg.contrastive.kappa);
                    total = Some(match total {
                        Some(t) => t.add(&scaled),
                        None => scaled,
                    });
                }
                Err(CommError::TooFewMessages(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if cfg.method.uses_aecomm() {
            let (_, own) = grounding_batch(&tracked[i], i, &reps[i].encodings, batch)?;
            let obs = own_active_observations(batch, i);
            if !obs.is_empty() {
                let l = crate::comm::aecomm_loss(&obs, &own, &tracked[i])?;
                breakdown.comm += l.item();
                total = Some(match total {
                    Some(t) => t.add(&l),
                    None => l,
                });
            }
        }
    }

    let Some(total) = total else {
        return Ok((vec![vec![]; n], breakdown));
    };
    if !total.item().is_finite() {
        return Err(TrainError::NonFiniteLoss { iteration, agent: 0, component: "total".into() });
    }
    let grads = backward(&total)?;
    let all = tracked.iter().map(|t| collect_grads(t, &grads)).collect();
    breakdown.policy /= n as f64;
    breakdown.value /= n as f64;
    breakdown.comm /= n as f64;
    breakdown.entropy /= n as f64;
    Ok((all, breakdown))
}

/// Checkpoint metadata stored next to the per-agent parameter blobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: Method,
    pub env: EnvConfig,
    pub seed: u64,
    pub env_steps: usize,
    pub n_agents: usize,
}

pub fn save_checkpoint(
    dir: &Path,
    agents: &[AgentParams],
    meta: &CheckpointMeta,
) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(meta)?)?;
    for (i, agent) in agents.iter().enumerate() {
        let mut named: Vec<(String, Tensor)> = agent.named_params();
        named.extend(agent.buffers());
        let refs: Vec<(String, &Tensor)> =
            named.iter().map(|(n, t)| (n.clone(), t)).collect();
        crate::numerics::serialize::save_params(&dir.join(format!("agent_{i}")), &refs)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Vec<AgentParams>, CheckpointMeta), TrainError> {
    let meta: CheckpointMeta = serde_json::from_slice(
        &fs::read(dir.join("meta.json"))
            .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", dir.display())))?,
    )?;
    let mut agents = Vec::with_capacity(meta.n_agents);
    for i in 0..meta.n_agents {
        let named = crate::numerics::serialize::load_params(&dir.join(format!("agent_{i}")))?;
        let mut agent = AgentParams::init(
            &meta.env,
            meta.method.uses_aecomm(),
            &mut env_rng(meta.seed, STREAM_AGENT_INIT + i as u64),
        );
        let mut by_name: std::collections::HashMap<String, Tensor> = named.into_iter().collect();
        let mut missing = Vec::new();
        let mut order = Vec::new();
        agent.for_each_param(&mut |n, _| order.push(n.to_string()));
        {
            let mut idx = 0;
            agent.for_each_param_mut(&mut |t| {
                match by_name.remove(&order[idx]) {
                    Some(loaded) => {
                        if loaded.shape() == t.shape() {
                            *t = loaded;
                        } else {
                            missing.push(format!("{} (shape)", order[idx]));
                        }
                    }
                    None => missing.push(order[idx].clone()),
                }
                idx += 1;
            });
        }
        if !missing.is_empty() {
            return Err(TrainError::Checkpoint(format!(
                "agent {i}: missing or mismatched parameters: {}",
                missing.join(", ")
            )));
        }
        let buffers: Vec<(String, Tensor)> = by_name.into_iter().collect();
        agent.restore_buffers(&buffers);
        agents.push(agent);
    }
    Ok((agents, meta))
}

/// Resolved-run record written before training starts.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub out_dir: String,
    pub created_unix_ms: u128,
}

pub const METRICS_HEADER: &str =
    "iteration,env_steps,mean_ep_reward,mean_ep_len,success_rate,loss_policy,loss_value,loss_comm,grad_norm";

pub struct TrainOutcome {
    pub iterations: usize,
    pub env_steps: usize,
    pub final_eval: crate::eval::EpisodeStats,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Full training loop: collect, learn, update, evaluate, checkpoint.
/// Deterministic for a fixed config and seed.
pub fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;

    let manifest = RunManifest {
        config: cfg.clone(),
        config_hash: cfg.config_hash(),
        out_dir: out_dir.display().to_string(),
        created_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;

    let mut agents: Vec<AgentParams> = (0..cfg.env.n_agents)
        .map(|i| {
            AgentParams::init(
                &cfg.env,
                cfg.method.uses_aecomm(),
                &mut env_rng(cfg.seed, STREAM_AGENT_INIT + i as u64),
            )
        })
        .collect();
    let mut adam: Vec<Vec<AdamState>> = agents
        .iter()
        .map(|a| {
            let mut states = Vec::new();
            a.for_each_param(&mut |_, t| states.push(AdamState::new(t.len())));
            states
        })
        .collect();
    let adam_hp = AdamHyper { lr: cfg.hyper.lr, eps: cfg.hyper.adam_eps, ..AdamHyper::default() };

    let mut instances: Vec<InstanceState> = (0..cfg.hyper.instances)
        .map(|e| InstanceState::new(&cfg.env, cfg.seed, e as u64))
        .collect::<Result<_, _>>()?;
    let mut action_rng = env_rng(cfg.seed, STREAM_ACTIONS);
    let mut simclr_rng = env_rng(cfg.seed, STREAM_SIMCLR);

    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let iterations = cfg.iterations();
    let mut last_breakdown = LossBreakdown::default();
    let mut final_eval = None;

    for iteration in 1..=iterations {
        let batch = collect_rollout(&mut instances, &mut agents, cfg, &mut action_rng)?;

        let (mut grads, mut breakdown) = if cfg.method.is_dial() {
            learn_dial(&mut agents, &batch, cfg, &mut simclr_rng, iteration)?
        } else {
            learn_detached(&mut agents, &batch, cfg, &mut simclr_rng, iteration)?
        };

        let mut norm_sum = 0.0;
        for (agent, g) in grads.iter_mut().enumerate() {
            if g.is_empty() {
                continue;
            }
            let norm = clip_gradients(g, cfg.hyper.grad_clip);
            if !norm.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    iteration,
                    agent,
                    component: "gradient norm".into(),
                });
            }
            norm_sum += norm;
            let mut idx = 0;
            let states = &mut adam[agent];
            let bufs = std::mem::take(g);
            agents[agent].for_each_param_mut(&mut |t| {
                adam_step(t, &bufs[idx], &mut states[idx], &adam_hp).expect("aligned grads");
                idx += 1;
            });
        }
        breakdown.grad_norm = norm_sum / agents.len() as f64;
        last_breakdown = breakdown;

        if iteration % cfg.eval_interval == 0 || iteration == iterations {
            let stats = crate::eval::run_episodes(
                &agents,
                &cfg.env,
                cfg.method.has_comm(),
                cfg.seed,
                STREAM_EVAL + iteration as u64 * 1000,
                cfg.eval_episodes,
            )
            .map_err(|e| TrainError::Config(e.to_string()))?;
            let env_steps = iteration * cfg.hyper.instances * cfg.hyper.segment_len;
            writeln!(
                metrics,
                "{},{},{},{},{},{},{},{},{}",
                iteration,
                env_steps,
                stats.mean_reward,
                stats.mean_length,
                stats.success_rate,
                last_breakdown.policy,
                last_breakdown.value,
                last_breakdown.comm,
                last_breakdown.grad_norm,
            )
            .unwrap();
            if iteration == iterations {
                final_eval = Some(stats);
            }
        }

        if cfg.checkpoint_interval != 0 && iteration % cfg.checkpoint_interval == 0 {
            let meta = CheckpointMeta {
                method: cfg.method,
                env: cfg.env.clone(),
                seed: cfg.seed,
                env_steps: iteration * cfg.hyper.instances * cfg.hyper.segment_len,
                n_agents: agents.len(),
            };
            save_checkpoint(
                &out_dir.join("checkpoints").join(format!("iter_{iteration:06}")),
                &agents,
                &meta,
            )?;
        }
    }

    let metrics_path = out_dir.join("metrics.csv");
    fs::write(&metrics_path, metrics)?;

    let env_steps = iterations * cfg.hyper.instances * cfg.hyper.segment_len;
    let final_checkpoint = out_dir.join("checkpoints").join("final");
    save_checkpoint(
        &final_checkpoint,
        &agents,
        &CheckpointMeta {
            method: cfg.method,
            env: cfg.env.clone(),
            seed: cfg.seed,
            env_steps,
            n_agents: agents.len(),
        },
    )?;

    Ok(TrainOutcome {
        iterations,
        env_steps,
        final_eval: final_eval.expect("final evaluation always runs"),
        metrics_path,
        final_checkpoint,
    })
}

/// One combined learner step over a provided rollout, exposed for gradient
/// routing tests: returns per-agent raw gradients without applying updates.
pub fn learner_gradients(
    agents: &mut [AgentParams],
    batch: &RolloutBatch,
    cfg: &ExperimentConfig,
    simclr_rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
    let (grads, _) = if cfg.method.is_dial() {
        learn_dial(agents, batch, cfg, simclr_rng, 0)?
    } else {
        learn_detached(agents, batch, cfg, simclr_rng, 0)?
    };
    Ok(grads)
}

/// Collect one rollout from freshly-seeded instances; exposed for tests and
/// the evaluation harness.
pub fn rollout_once(
    agents: &mut [AgentParams],
    cfg: &ExperimentConfig,
) -> Result<RolloutBatch, TrainError> {
    let mut instances: Vec<InstanceState> = (0..cfg.hyper.instances)
        .map(|e| InstanceState::new(&cfg.env, cfg.seed, e as u64))
        .collect::<Result<_, _>>()?;
    let mut rng = env_rng(cfg.seed, STREAM_ACTIONS);
    collect_rollout(&mut instances, agents, cfg, &mut rng)
}
