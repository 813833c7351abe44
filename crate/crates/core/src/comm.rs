//! Communication-grounding objectives: the contrastive alignment loss over
//! message batches, autoencoding reconstruction, positive listening, and the
//! gradient-routing contract for differentiable-channel variants.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{decode_observation, AgentParams};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum CommError {
    #[error("contrastive loss needs at least two messages, got {0}")]
    TooFewMessages(usize),
    #[error("contrastive loss needs at least two trajectories, got {0}")]
    TooFewTrajectories(usize),
    #[error("positive-listening loss over an empty trajectory")]
    EmptyTrajectory,
    #[error("batch lengths disagree: {0}")]
    LengthMismatch(String),
    #[error("invalid contrastive config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Agent(#[from] crate::agents::AgentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// All window peers are positives, averaged per anchor.
    SupCon,
    /// One uniformly-sampled positive per anchor.
    SimClr,
}

#[derive(Debug, Clone)]
pub struct ContrastiveConfig {
    /// Total window span in timesteps (odd); positives lie within
    /// ±(window / 2) of the anchor.
    pub window: usize,
    pub temperature: f64,
    pub kappa: f64,
    pub mode: ContrastiveMode,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            window: 5,
            temperature: 0.1,
            kappa: 0.5,
            mode: ContrastiveMode::SupCon,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), CommError> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(CommError::BadConfig(format!("window {} must be odd", self.window)));
        }
        if self.temperature <= 0.0 {
            return Err(CommError::BadConfig("temperature must be positive".into()));
        }
        if self.kappa < 0.0 {
            return Err(CommError::BadConfig("kappa must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MessageKey {
    pub trajectory: usize,
    pub t: usize,
    pub agent: usize,
}

/// Messages indexed by (trajectory, timestep, agent), with episode markers so
/// positive windows never cross episode resets and an activity mask so
/// inactive slots join neither positives nor the denominator pool.
///
/// Gradient tracking rides on the stored tensors themselves: the builder
/// tracks its own agent's messages and leaves the rest detached.
pub struct MessageBatch {
    trajectories: Vec<Trajectory>,
}

struct Trajectory {
    /// steps[t][agent]
    steps: Vec<Vec<Tensor>>,
    /// Episode id per timestep; increments after each done flag.
    episode: Vec<usize>,
    /// active[t][agent]
    active: Vec<Vec<bool>>,
}

impl Default for MessageBatch {
    fn default() -> Self {
        Self::new()
    }
}

impl MessageBatch {
    pub fn new() -> MessageBatch {
        MessageBatch { trajectories: Vec::new() }
    }

    pub fn push_trajectory(
        &mut self,
        steps: Vec<Vec<Tensor>>,
        episode: Vec<usize>,
        active: Vec<Vec<bool>>,
    ) -> Result<(), CommError> {
        if steps.len() != episode.len() || steps.len() != active.len() {
            return Err(CommError::LengthMismatch(format!(
                "steps {}, episode {}, active {}",
                steps.len(),
                episode.len(),
                active.len()
            )));
        }
        for (s, a) in steps.iter().zip(&active) {
            if s.len() != a.len() {
                return Err(CommError::LengthMismatch("agents per step".into()));
            }
        }
        self.trajectories.push(Trajectory { steps, episode, active });
        Ok(())
    }

    /// Convenience for fully-active batches.
    pub fn push_trajectory_all_active(
        &mut self,
        steps: Vec<Vec<Tensor>>,
        episode: Vec<usize>,
    ) -> Result<(), CommError> {
        let active = steps.iter().map(|s| vec![true; s.len()]).collect();
        self.push_trajectory(steps, episode, active)
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn message(&self, key: MessageKey) -> &Tensor {
        &self.trajectories[key.trajectory].steps[key.t][key.agent]
    }

    pub fn is_active(&self, key: MessageKey) -> bool {
        self.trajectories[key.trajectory].active[key.t][key.agent]
    }

    /// All active message keys, trajectory-major then time then agent.
    pub fn active_keys(&self) -> Vec<MessageKey> {
        let mut keys = Vec::new();
        for (ti, traj) in self.trajectories.iter().enumerate() {
            for (t, step) in traj.steps.iter().enumerate() {
                for agent in 0..step.len() {
                    if traj.active[t][agent] {
                        keys.push(MessageKey { trajectory: ti, t, agent });
                    }
                }
            }
        }
        keys
    }
}

/// Divide each row of a message matrix by its Euclidean norm
/// (differentiable; sigmoid outputs make zero rows impossible).
pub fn normalize_messages(messages: &Tensor) -> Tensor {
    messages.row_normalize()
}

/// The positive set for an anchor: all other active messages of the same
/// trajectory and episode within the timestep window, clipped at segment
/// edges. SimCLR mode draws exactly one of them uniformly.
pub fn positives_for(
    anchor: MessageKey,
    batch: &MessageBatch,
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<MessageKey> {
    let traj = &batch.trajectories[anchor.trajectory];
    let half = cfg.window / 2;
    let lo = anchor.t.saturating_sub(half);
    let hi = (anchor.t + half).min(traj.steps.len().saturating_sub(1));
    let mut set = Vec::new();
    for t in lo..=hi {
        if traj.episode[t] != traj.episode[anchor.t] {
            continue;
        }
        for agent in 0..traj.steps[t].len() {
            if (t, agent) == (anchor.t, anchor.agent) || !traj.active[t][agent] {
                continue;
            }
            set.push(MessageKey { trajectory: anchor.trajectory, t, agent });
        }
    }
    match cfg.mode {
        ContrastiveMode::SupCon => set,
        ContrastiveMode::SimClr => {
            if set.is_empty() {
                set
            } else {
                vec![set[rng.gen_range(0..set.len())]]
            }
        }
    }
}

/// The contrastive alignment loss over a message batch.
///
/// Every active message anchors one term: its positives' similarities are
/// pulled up against a denominator over every other message in the batch
/// (positives included), at temperature `cfg.temperature`, after L2 message
/// normalization. Anchors with an empty positive set contribute zero.
/// Gradients flow only into messages that were stored tracked.
pub fn cacl_loss(
    batch: &MessageBatch,
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, CommError> {
    cfg.validate()?;
    if batch.n_trajectories() < 2 {
        return Err(CommError::TooFewTrajectories(batch.n_trajectories()));
    }
    let keys = batch.active_keys();
    let b = keys.len();
    if b < 2 {
        return Err(CommError::TooFewMessages(b));
    }
    let mut flat_of = std::collections::HashMap::with_capacity(b);
    for (i, &k) in keys.iter().enumerate() {
        flat_of.insert(k, i);
    }

    let rows: Vec<&Tensor> = keys.iter().map(|&k| batch.message(k)).collect();
    let normalized = normalize_messages(&Tensor::stack_rows(&rows));
    let sims = normalized.matmul_nt(&normalized).scale(1.0 / cfg.temperature);

    // Denominator: everything except the anchor itself.
    let mut mask = vec![true; b * b];
    for i in 0..b {
        mask[i * b + i] = false;
    }
    let lse = sims.row_logsumexp_masked(&mask);

    let mut lse_weights = vec![0.0; b];
    let mut sim_weights = vec![0.0; b * b];
    for (i, &anchor) in keys.iter().enumerate() {
        let pos = positives_for(anchor, batch, cfg, rng);
        if pos.is_empty() {
            continue;
        }
        lse_weights[i] = 1.0;
        let share = 1.0 / pos.len() as f64;
        for p in pos {
            sim_weights[i * b + flat_of[&p]] -= share;
        }
    }

    let loss = lse.weighted_sum(&lse_weights).add(&sims.weighted_sum(&sim_weights));

    #[cfg(debug_assertions)]
    {
        // Each anchor term is a mean of log(denominator / one-exp-term)
        // ratios with the term included in the denominator, so it cannot go
        // negative.
        for i in 0..b {
            if lse_weights[i] == 0.0 {
                continue;
            }
            let mut term = lse.data()[i];
            for j in 0..b {
                term += sim_weights[i * b + j] * sims.data()[i * b + j];
            }
            debug_assert!(term >= -1e-12, "anchor {i} produced negative term {term}");
        }
    }

    Ok(loss)
}

/// Mean squared error between decoded messages and the raw observations,
/// averaged over batch and dimensions. Gradients reach the message head and
/// decoder only (observations are constants and the encoding path is the
/// caller's responsibility to keep detached).
pub fn aecomm_loss(
    observations: &[Tensor],
    messages: &[Tensor],
    decoder_owner: &AgentParams,
) -> Result<Tensor, CommError> {
    if observations.len() != messages.len() {
        return Err(CommError::LengthMismatch(format!(
            "{} observations vs {} messages",
            observations.len(),
            messages.len()
        )));
    }
    if observations.is_empty() {
        return Err(CommError::LengthMismatch("empty reconstruction batch".into()));
    }
    let mut errs = Vec::with_capacity(messages.len());
    for (obs, msg) in observations.iter().zip(messages) {
        let rec = decode_observation(decoder_owner, msg)?;
        errs.push(rec.sub(&obs.detach()));
    }
    let refs: Vec<&Tensor> = errs.iter().collect();
    let stacked = Tensor::stack_rows(&refs);
    Ok(stacked.mul(&stacked).mean())
}

/// Positive-listening loss between per-step policy logits with real and
/// zeroed message inputs:
///   L = −(1/T) Σ_t [ Σ_a |π(a) − π̄(a)| + Σ_a π(a) · log π̄(a) ]
pub fn pl_loss(
    logits_with: &[Tensor],
    logits_zeroed: &[Tensor],
) -> Result<Tensor, CommError> {
    if logits_with.len() != logits_zeroed.len() {
        return Err(CommError::LengthMismatch(format!(
            "{} vs {} policy steps",
            logits_with.len(),
            logits_zeroed.len()
        )));
    }
    let t = logits_with.len();
    if t == 0 {
        return Err(CommError::EmptyTrajectory);
    }
    let mut total: Option<Tensor> = None;
    for (lw, lz) in logits_with.iter().zip(logits_zeroed) {
        let pi = lw.log_softmax().exp();
        let log_bar = lz.log_softmax();
        let bar = log_bar.exp();
        let l1 = pi.sub(&bar).abs().sum();
        let ce = pi.mul(&log_bar).sum();
        let term = l1.add(&ce);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term),
        });
    }
    Ok(total.unwrap().scale(-1.0 / t as f64))
}

/// How received messages enter the receiver's computation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageRouting {
    /// Receivers see constants; no gradient crosses agents.
    Detached,
    /// Receivers backpropagate through the channel into the sender's message
    /// head and observation encoder, joining all agents into one graph.
    Differentiable,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::env_rng;

    fn unit(v: [f64; 4]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    fn two_agent_batch(msgs: Vec<Vec<Vec<Tensor>>>) -> MessageBatch {
        let mut batch = MessageBatch::new();
        for traj in msgs {
            let t = traj.len();
            batch.push_trajectory_all_active(traj, vec![0; t]).unwrap();
        }
        batch
    }

    #[test]
    fn normalize_scales_rows_to_unit_norm() {
        let m = Tensor::from_vec(vec![2, 4], vec![3.0, 4.0, 0.0, 0.0, 0.6, 0.8, 0.0, 0.0]);
        let n = normalize_messages(&m);
        assert!((n.data()[0] - 0.6).abs() < 1e-15);
        assert!((n.data()[1] - 0.8).abs() < 1e-15);
        // Already-unit rows unchanged.
        assert!((n.data()[4] - 0.6).abs() < 1e-15);
        assert!((n.data()[5] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalized_sigmoid_range_dots_are_in_unit_interval() {
        let mut rng = env_rng(1, 0);
        let rows: Vec<Tensor> = (0..6)
            .map(|_| Tensor::vector((0..4).map(|_| rng.gen_range(0.01..0.99)).collect()))
            .collect();
        let refs: Vec<&Tensor> = rows.iter().collect();
        let n = normalize_messages(&Tensor::stack_rows(&refs));
        let sims = n.matmul_nt(&n);
        for &v in sims.data() {
            assert!(v > 0.0 && v <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn window_one_keeps_same_timestep_peers_only() {
        let mk = |v: f64| unit([v, 1.0 - v, 0.0, 0.0]);
        let traj: Vec<Vec<Tensor>> =
            (0..10).map(|t| (0..3).map(|a| mk((t * 3 + a) as f64 / 40.0)).collect()).collect();
        let batch = two_agent_batch(vec![traj]);
        let cfg = ContrastiveConfig { window: 1, ..Default::default() };
        let mut rng = env_rng(2, 0);
        let pos = positives_for(MessageKey { trajectory: 0, t: 5, agent: 0 }, &batch, &cfg, &mut rng);
        assert_eq!(
            pos,
            vec![
                MessageKey { trajectory: 0, t: 5, agent: 1 },
                MessageKey { trajectory: 0, t: 5, agent: 2 }
            ]
        );
    }

    #[test]
    fn window_five_interior_anchor_counts_fourteen() {
        let mk = |v: f64| unit([v, 1.0, 0.0, 0.0]);
        let traj: Vec<Vec<Tensor>> =
            (0..20).map(|t| (0..3).map(|a| mk((t + a) as f64)).collect()).collect();
        let batch = two_agent_batch(vec![traj]);
        let cfg = ContrastiveConfig::default();
        let mut rng = env_rng(3, 0);
        let pos =
            positives_for(MessageKey { trajectory: 0, t: 10, agent: 1 }, &batch, &cfg, &mut rng);
        assert_eq!(pos.len(), 5 * 3 - 1);
    }

    #[test]
    fn window_clips_at_segment_edges_and_episode_boundaries() {
        let mk = |v: f64| unit([v, 1.0, 0.0, 0.0]);
        let traj: Vec<Vec<Tensor>> =
            (0..6).map(|t| (0..2).map(|a| mk((t + a) as f64)).collect()).collect();
        let mut batch = MessageBatch::new();
        // Episode flips between t=3 and t=4.
        batch
            .push_trajectory_all_active(traj, vec![0, 0, 0, 0, 1, 1])
            .unwrap();
        let cfg = ContrastiveConfig::default();
        let mut rng = env_rng(4, 0);
        // Anchor at t=0: window [0, 2].
        let pos = positives_for(MessageKey { trajectory: 0, t: 0, agent: 0 }, &batch, &cfg, &mut rng);
        assert!(pos.iter().all(|k| k.t <= 2));
        assert_eq!(pos.len(), 5);
        // Anchor at t=3: t=4,5 belong to the next episode.
        let pos = positives_for(MessageKey { trajectory: 0, t: 3, agent: 0 }, &batch, &cfg, &mut rng);
        assert!(pos.iter().all(|k| k.t <= 3 && k.t >= 1));
        assert_eq!(pos.len(), 5);
    }

    #[test]
    fn simclr_mode_samples_exactly_one_positive() {
        let mk = |v: f64| unit([v, 1.0, 0.0, 0.0]);
        let traj: Vec<Vec<Tensor>> =
            (0..8).map(|t| (0..3).map(|a| mk((t + a) as f64)).collect()).collect();
        let batch = two_agent_batch(vec![traj]);
        let cfg = ContrastiveConfig { mode: ContrastiveMode::SimClr, ..Default::default() };
        let mut rng = env_rng(5, 0);
        let anchor = MessageKey { trajectory: 0, t: 4, agent: 0 };
        let supcon = positives_for(
            anchor,
            &batch,
            &ContrastiveConfig::default(),
            &mut env_rng(5, 0),
        );
        for _ in 0..20 {
            let one = positives_for(anchor, &batch, &cfg, &mut rng);
            assert_eq!(one.len(), 1);
            assert!(supcon.contains(&one[0]));
        }
    }

    #[test]
    fn inactive_messages_never_appear_in_positives() {
        let mk = |v: f64| unit([v, 1.0, 0.0, 0.0]);
        let steps: Vec<Vec<Tensor>> =
            (0..4).map(|t| (0..2).map(|a| mk((t + a) as f64)).collect()).collect();
        let active = vec![
            vec![true, false],
            vec![true, false],
            vec![true, true],
            vec![true, true],
        ];
        let mut batch = MessageBatch::new();
        batch.push_trajectory(steps, vec![0; 4], active).unwrap();
        let cfg = ContrastiveConfig::default();
        let mut rng = env_rng(6, 0);
        let pos = positives_for(MessageKey { trajectory: 0, t: 1, agent: 0 }, &batch, &cfg, &mut rng);
        assert!(pos.iter().all(|k| batch.is_active(*k)));
        assert!(!pos.contains(&MessageKey { trajectory: 0, t: 0, agent: 1 }));
    }

    #[test]
    fn cacl_two_coincident_messages_and_an_orthogonal_negative() {
        let a = unit([1.0, 0.0, 0.0, 0.0]);
        let b = unit([1.0, 0.0, 0.0, 0.0]);
        let c = unit([0.0, 1.0, 0.0, 0.0]);
        let batch = two_agent_batch(vec![vec![vec![a, b]], vec![vec![c]]]);
        let mut rng = env_rng(7, 0);
        let loss = cacl_loss(&batch, &ContrastiveConfig::default(), &mut rng).unwrap();
        let expect = 2.0 * (1.0 + (-10.0_f64).exp()).ln();
        assert!(
            (loss.item() - expect).abs() < 1e-12,
            "loss {} vs {}",
            loss.item(),
            expect
        );
    }

    #[test]
    fn cacl_four_identical_messages_give_four_log_three() {
        let m = || unit([0.5, 0.5, 0.5, 0.5]);
        let batch = two_agent_batch(vec![vec![vec![m(), m()]], vec![vec![m(), m()]]]);
        let mut rng = env_rng(8, 0);
        let loss = cacl_loss(&batch, &ContrastiveConfig::default(), &mut rng).unwrap();
        let expect = 4.0 * 3.0_f64.ln();
        assert!(
            (loss.item() - expect).abs() < 1e-12,
            "loss {} vs {}",
            loss.item(),
            expect
        );
    }

    /// Literal triple-loop transcription of the contrastive objective,
    /// independent of the vectorized path.
    fn cacl_reference(batch: &MessageBatch, cfg: &ContrastiveConfig) -> f64 {
        let keys = batch.active_keys();
        let norm = |k: MessageKey| {
            let d = batch.message(k).to_vec();
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter().map(|v| v / n).collect::<Vec<f64>>()
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for &anchor in &keys {
            let am = norm(anchor);
            let mut rng = env_rng(0, 0); // supcon ignores it
            let pos = positives_for(anchor, batch, cfg, &mut rng);
            if pos.is_empty() {
                continue;
            }
            let mut sum = 0.0;
            for &h in &pos {
                let num = (dot(&am, &norm(h)) / cfg.temperature).exp();
                let mut den = 0.0;
                for &k in &keys {
                    if k == anchor {
                        continue;
                    }
                    den += (dot(&am, &norm(k)) / cfg.temperature).exp();
                }
                sum += (num / den).ln();
            }
            total += -sum / pos.len() as f64;
        }
        total
    }

    fn random_batch(seed: u64, trajectories: usize, steps: usize, agents: usize) -> MessageBatch {
        let mut rng = env_rng(seed, 1);
        let mut batch = MessageBatch::new();
        for _ in 0..trajectories {
            let steps: Vec<Vec<Tensor>> = (0..steps)
                .map(|_| {
                    (0..agents)
                        .map(|_| {
                            Tensor::vector((0..4).map(|_| rng.gen_range(0.05..0.95)).collect())
                        })
                        .collect()
                })
                .collect();
            let episode: Vec<usize> =
                (0..steps.len()).map(|t| usize::from(t >= 13)).collect();
            batch.push_trajectory_all_active(steps, episode).unwrap();
        }
        batch
    }

    #[test]
    fn cacl_matches_triple_loop_reference() {
        let cfg = ContrastiveConfig::default();
        for seed in 0..5 {
            let batch = random_batch(seed, 3, 20, 4);
            let mut rng = env_rng(9, 0);
            let fast = cacl_loss(&batch, &cfg, &mut rng).unwrap().item();
            let slow = cacl_reference(&batch, &cfg);
            assert!((fast - slow).abs() < 1e-9, "seed {seed}: {fast} vs {slow}");
        }
    }

    #[test]
    fn cacl_is_invariant_to_trajectory_order() {
        let cfg = ContrastiveConfig::default();
        let forward = random_batch(3, 3, 12, 2);
        let mut reversed = MessageBatch::new();
        for traj in forward.trajectories.iter().rev() {
            reversed
                .push_trajectory(traj.steps.clone(), traj.episode.clone(), traj.active.clone())
                .unwrap();
        }
        let a = cacl_loss(&forward, &cfg, &mut env_rng(10, 0)).unwrap().item();
        let b = cacl_loss(&reversed, &cfg, &mut env_rng(10, 0)).unwrap().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cacl_rejects_tiny_batches() {
        let batch = two_agent_batch(vec![vec![vec![unit([1.0, 0.0, 0.0, 0.0])]]]);
        let mut rng = env_rng(11, 0);
        assert!(matches!(
            cacl_loss(&batch, &ContrastiveConfig::default(), &mut rng),
            Err(CommError::TooFewTrajectories(1))
        ));
    }

    #[test]
    fn cacl_gradients_reach_only_tracked_messages() {
        use crate::numerics::{backward, Tape};
        let tape = Tape::new();
        let mine = tape.watch(&unit([0.8, 0.2, 0.3, 0.4]));
        let other = unit([0.1, 0.9, 0.2, 0.3]);
        let far = unit([0.5, 0.5, 0.5, 0.5]);
        let batch = two_agent_batch(vec![
            vec![vec![mine.clone(), other.clone()]],
            vec![vec![far.clone()]],
        ]);
        let loss = cacl_loss(&batch, &ContrastiveConfig::default(), &mut env_rng(12, 0)).unwrap();
        let grads = backward(&loss).unwrap();
        assert!(grads.get(&mine).unwrap().iter().any(|&v| v != 0.0));
        assert!(grads.get(&other).is_none());
    }

    #[test]
    fn aecomm_loss_hand_values() {
        let cfg = crate::envs::EnvConfig::predator_prey();
        let mut p = AgentParams::init(&cfg, true, &mut env_rng(13, 0));
        p.decoder = Some(crate::agents::LinearParams {
            w: Tensor::zeros(&[11, 4]),
            b: Tensor::zeros(&[11]),
        });
        let obs = vec![Tensor::filled(&[11], 1.0)];
        let msgs = vec![unit([0.5, 0.5, 0.5, 0.5])];
        // Zero reconstruction of an all-ones observation: MSE 1.
        let loss = aecomm_loss(&obs, &msgs, &p).unwrap();
        assert!((loss.item() - 1.0).abs() < 1e-15);

        // Perfect reconstruction: zero.
        let zero_obs = vec![Tensor::zeros(&[11])];
        let loss = aecomm_loss(&zero_obs, &msgs, &p).unwrap();
        assert!(loss.item() == 0.0);
    }

    #[test]
    fn aecomm_loss_is_batch_order_invariant() {
        let cfg = crate::envs::EnvConfig::predator_prey();
        let p = AgentParams::init(&cfg, true, &mut env_rng(14, 0));
        let mut rng = env_rng(15, 0);
        let obs: Vec<Tensor> = (0..6)
            .map(|_| Tensor::vector((0..11).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect();
        let msgs: Vec<Tensor> = (0..6)
            .map(|_| Tensor::vector((0..4).map(|_| rng.gen_range(0.1..0.9)).collect()))
            .collect();
        let a = aecomm_loss(&obs, &msgs, &p).unwrap().item();
        let rev_obs: Vec<Tensor> = obs.iter().rev().cloned().collect();
        let rev_msgs: Vec<Tensor> = msgs.iter().rev().cloned().collect();
        let b = aecomm_loss(&rev_obs, &rev_msgs, &p).unwrap().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn pl_loss_uniform_two_actions() {
        let logits = vec![Tensor::zeros(&[2])];
        let loss = pl_loss(&logits, &logits.clone()).unwrap();
        let expect = -(0.5_f64.ln());
        assert!((loss.item() - expect).abs() < 1e-12, "{} vs {expect}", loss.item());
    }

    #[test]
    fn pl_loss_l1_term_vanishes_for_identical_policies() {
        let mut rng = env_rng(16, 0);
        for _ in 0..5 {
            let logits = vec![Tensor::vector((0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())];
            let loss = pl_loss(&logits, &logits.clone()).unwrap();
            // Only the cross-entropy term remains: −Σ π log π = entropy ≥ 0.
            let p = logits[0].log_softmax().exp();
            let ent: f64 =
                -p.data().iter().zip(logits[0].log_softmax().data()).map(|(p, l)| p * l).sum::<f64>();
            assert!((loss.item() - ent).abs() < 1e-12);
        }
    }

    #[test]
    fn pl_loss_rejects_empty_trajectory() {
        assert!(matches!(pl_loss(&[], &[]), Err(CommError::EmptyTrajectory)));
    }
}
