//! One decentralized agent: observation/message encoders, message head,
//! recurrent core, and spectrally-normalized policy/value heads. No
//! parameters are shared between agents.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::envs::{EnvConfig, EnvKind};
use crate::numerics::{
    gru_step, linear, scaled_uniform, spectral_normalize, GruParams, SpectralState, Tape, Tensor,
};

/// Messages are length-4 sigmoid outputs, componentwise in (0, 1).
pub const MESSAGE_DIM: usize = 4;

/// Hidden width shared by every layer unless noted otherwise.
pub const HIDDEN: usize = 32;

/// Power-iteration rounds per forward pass; the estimate persists in
/// [`SpectralState`] across calls.
const SN_ITERS: usize = 1;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("decode_observation requires an autoencoding method with a decoder")]
    NoDecoder,
    #[error("parameter set does not match: {0}")]
    BadCheckpoint(String),
}

#[derive(Clone)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    fn init(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> LinearParams {
        LinearParams { w: scaled_uniform(rng, &[out, inp], inp), b: Tensor::zeros(&[out]) }
    }
}

#[derive(Clone)]
pub struct ConvParams {
    pub k: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    fn init(rng: &mut ChaCha8Rng, filters: usize, channels: usize) -> ConvParams {
        ConvParams {
            k: scaled_uniform(rng, &[filters, channels, 3, 3], channels * 9),
            b: Tensor::zeros(&[filters]),
        }
    }
}

#[derive(Clone)]
pub enum ObsEncoder {
    /// Single fully-connected layer (predator-prey, traffic junction).
    Fc(LinearParams),
    /// Two 3x3 convolutions over the egocentric window, then three
    /// fully-connected layers over features ⊕ own position (find-goal).
    Conv { c1: ConvParams, c2: ConvParams, fc: Vec<LinearParams>, fov: usize },
}

/// Policy or value head: two hidden layers plus output, with spectral
/// normalization on the second hidden layer's weight.
#[derive(Clone)]
pub struct HeadParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
    pub out: LinearParams,
    pub sn: SpectralState,
}

impl HeadParams {
    fn init(rng: &mut ChaCha8Rng, out: usize) -> HeadParams {
        let l2 = LinearParams::init(rng, HIDDEN, HIDDEN);
        let mut sn = SpectralState::new(HIDDEN);
        crate::numerics::nn::warm_start_spectral(&l2.w, &mut sn, 4096);
        HeadParams {
            l1: LinearParams::init(rng, HIDDEN, HIDDEN),
            l2,
            out: LinearParams::init(rng, out, HIDDEN),
            sn,
        }
    }

    fn forward(&mut self, h: &Tensor) -> Tensor {
        let a = linear(h, &self.l1.w, &self.l1.b).expect("head l1").relu();
        let w2 = spectral_normalize(&self.l2.w, &mut self.sn, SN_ITERS).expect("head sn");
        let a = w2.matvec(&a).add(&self.l2.b).relu();
        linear(&a, &self.out.w, &self.out.b).expect("head out")
    }
}

#[derive(Clone)]
pub struct AgentParams {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    pub msg_enc_out: usize,
    pub obs_encoder: ObsEncoder,
    pub msg_encoder: Vec<LinearParams>,
    pub message_head: LinearParams,
    pub gru: GruParams,
    pub policy: HeadParams,
    pub value: HeadParams,
    pub decoder: Option<LinearParams>,
}

impl AgentParams {
    /// Architecture per environment; `with_decoder` adds the observation
    /// decoder used by autoencoding methods.
    pub fn init(env: &EnvConfig, with_decoder: bool, rng: &mut ChaCha8Rng) -> AgentParams {
        let obs_dim = env.obs_dim();
        let received = (env.n_agents - 1) * MESSAGE_DIM;
        let (msg_enc_out, msg_layers) = match env.kind {
            EnvKind::PredatorPrey | EnvKind::FindGoal => (8, vec![HIDDEN, 8]),
            EnvKind::TrafficJunction => (16, vec![HIDDEN, HIDDEN, 16]),
        };

        let obs_encoder = match env.kind {
            EnvKind::PredatorPrey | EnvKind::TrafficJunction => {
                ObsEncoder::Fc(LinearParams::init(rng, HIDDEN, obs_dim))
            }
            EnvKind::FindGoal => {
                let flat = 32 * env.fov * env.fov + 2;
                ObsEncoder::Conv {
                    c1: ConvParams::init(rng, 16, 3),
                    c2: ConvParams::init(rng, 32, 16),
                    fc: vec![
                        LinearParams::init(rng, HIDDEN, flat),
                        LinearParams::init(rng, HIDDEN, HIDDEN),
                        LinearParams::init(rng, HIDDEN, HIDDEN),
                    ],
                    fov: env.fov,
                }
            }
        };

        let mut msg_encoder = Vec::new();
        let mut inp = received;
        for &out in &msg_layers {
            msg_encoder.push(LinearParams::init(rng, out, inp));
            inp = out;
        }

        let gru_in = HIDDEN + msg_enc_out;
        let gru = GruParams {
            wz: scaled_uniform(rng, &[HIDDEN, gru_in], gru_in),
            uz: scaled_uniform(rng, &[HIDDEN, HIDDEN], HIDDEN),
            bz: Tensor::zeros(&[HIDDEN]),
            wr: scaled_uniform(rng, &[HIDDEN, gru_in], gru_in),
            ur: scaled_uniform(rng, &[HIDDEN, HIDDEN], HIDDEN),
            br: Tensor::zeros(&[HIDDEN]),
            wn: scaled_uniform(rng, &[HIDDEN, gru_in], gru_in),
            un: scaled_uniform(rng, &[HIDDEN, HIDDEN], HIDDEN),
            bn: Tensor::zeros(&[HIDDEN]),
        };

        AgentParams {
            obs_dim,
            n_actions: env.num_actions(),
            n_agents: env.n_agents,
            msg_enc_out,
            obs_encoder,
            msg_encoder,
            message_head: LinearParams::init(rng, MESSAGE_DIM, HIDDEN),
            gru,
            policy: HeadParams::init(rng, env.num_actions()),
            value: HeadParams::init(rng, 1),
            decoder: with_decoder.then(|| LinearParams::init(rng, obs_dim, MESSAGE_DIM)),
        }
    }

    /// Visit every trainable parameter in a fixed order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match &self.obs_encoder {
            ObsEncoder::Fc(l) => {
                f("obs_encoder.fc.w", &l.w);
                f("obs_encoder.fc.b", &l.b);
            }
            ObsEncoder::Conv { c1, c2, fc, .. } => {
                f("obs_encoder.conv1.k", &c1.k);
                f("obs_encoder.conv1.b", &c1.b);
                f("obs_encoder.conv2.k", &c2.k);
                f("obs_encoder.conv2.b", &c2.b);
                for (i, l) in fc.iter().enumerate() {
                    f(&format!("obs_encoder.fc{i}.w"), &l.w);
                    f(&format!("obs_encoder.fc{i}.b"), &l.b);
                }
            }
        }
        for (i, l) in self.msg_encoder.iter().enumerate() {
            f(&format!("msg_encoder.{i}.w"), &l.w);
            f(&format!("msg_encoder.{i}.b"), &l.b);
        }
        f("message_head.w", &self.message_head.w);
        f("message_head.b", &self.message_head.b);
        for (n, t) in [
            ("gru.wz", &self.gru.wz),
            ("gru.uz", &self.gru.uz),
            ("gru.bz", &self.gru.bz),
            ("gru.wr", &self.gru.wr),
            ("gru.ur", &self.gru.ur),
            ("gru.br", &self.gru.br),
            ("gru.wn", &self.gru.wn),
            ("gru.un", &self.gru.un),
            ("gru.bn", &self.gru.bn),
        ] {
            f(n, t);
        }
        for (prefix, head) in [("policy", &self.policy), ("value", &self.value)] {
            f(&format!("{prefix}.l1.w"), &head.l1.w);
            f(&format!("{prefix}.l1.b"), &head.l1.b);
            f(&format!("{prefix}.l2.w"), &head.l2.w);
            f(&format!("{prefix}.l2.b"), &head.l2.b);
            f(&format!("{prefix}.out.w"), &head.out.w);
            f(&format!("{prefix}.out.b"), &head.out.b);
        }
        if let Some(d) = &self.decoder {
            f("decoder.w", &d.w);
            f("decoder.b", &d.b);
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    /// Visit parameters mutably, in the same order as [`Self::for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        match &mut self.obs_encoder {
            ObsEncoder::Fc(l) => {
                f(&mut l.w);
                f(&mut l.b);
            }
            ObsEncoder::Conv { c1, c2, fc, .. } => {
                f(&mut c1.k);
                f(&mut c1.b);
                f(&mut c2.k);
                f(&mut c2.b);
                for l in fc {
                    f(&mut l.w);
                    f(&mut l.b);
                }
            }
        }
        for l in &mut self.msg_encoder {
            f(&mut l.w);
            f(&mut l.b);
        }
        f(&mut self.message_head.w);
        f(&mut self.message_head.b);
        for t in [
            &mut self.gru.wz,
            &mut self.gru.uz,
            &mut self.gru.bz,
            &mut self.gru.wr,
            &mut self.gru.ur,
            &mut self.gru.br,
            &mut self.gru.wn,
            &mut self.gru.un,
            &mut self.gru.bn,
        ] {
            f(t);
        }
        for head in [&mut self.policy, &mut self.value] {
            f(&mut head.l1.w);
            f(&mut head.l1.b);
            f(&mut head.l2.w);
            f(&mut head.l2.b);
            f(&mut head.out.w);
            f(&mut head.out.b);
        }
        if let Some(d) = &mut self.decoder {
            f(&mut d.w);
            f(&mut d.b);
        }
    }

    /// A copy whose parameters are all watched on `tape`. Spectral states are
    /// cloned; their updates during replay are discarded with the copy.
    pub fn tracked(&self, tape: &Tape) -> AgentParams {
        let mut copy = self.clone();
        copy.for_each_param_mut(&mut |t| *t = tape.watch(t));
        copy
    }

    /// Non-trainable state (spectral singular-vector estimates).
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        vec![
            ("policy.sn_u".to_string(), Tensor::vector(self.policy.sn.u.clone())),
            ("value.sn_u".to_string(), Tensor::vector(self.value.sn.u.clone())),
        ]
    }

    pub fn restore_buffers(&mut self, named: &[(String, Tensor)]) {
        for (n, t) in named {
            match n.as_str() {
                "policy.sn_u" => self.policy.sn.u = t.to_vec(),
                "value.sn_u" => self.value.sn.u = t.to_vec(),
                _ => {}
            }
        }
    }
}

/// Observation encoding: the 32-wide representation the message head and GRU
/// consume.
pub fn encode_obs(p: &AgentParams, obs: &Tensor) -> Tensor {
    match &p.obs_encoder {
        ObsEncoder::Fc(l) => linear(obs, &l.w, &l.b).expect("obs fc").relu(),
        ObsEncoder::Conv { c1, c2, fc, fov } => {
            let window = *fov * *fov;
            let channels = obs.data()[..3 * window].to_vec();
            let pos = Tensor::vector(obs.data()[3 * window..].to_vec());
            let img = Tensor::from_vec(vec![3, *fov, *fov], channels);
            // Observations are constant inputs; slicing them out of the flat
            // layout never severs a gradient path.
            debug_assert!(!obs.is_tracked());
            let a = img.conv2d(&c1.k, &c1.b).relu();
            let a = a.conv2d(&c2.k, &c2.b).relu();
            let flat = a.reshape(&[32 * window]);
            let mut h = Tensor::concat(&[&flat, &pos]);
            for l in fc.iter() {
                h = linear(&h, &l.w, &l.b).expect("obs fc").relu();
            }
            h
        }
    }
}

/// Encoding of the concatenated received messages.
pub fn encode_messages(p: &AgentParams, received: &Tensor) -> Tensor {
    let mut h = received.clone();
    for l in &p.msg_encoder {
        h = linear(&h, &l.w, &l.b).expect("msg fc").relu();
    }
    h
}

/// Message emission: sigmoid over the message head applied to the
/// observation encoding alone (never the recurrent state).
pub fn produce_message(p: &AgentParams, obs: &Tensor) -> Tensor {
    let enc = encode_obs(p, obs);
    produce_message_from_encoding(p, &enc)
}

pub fn produce_message_from_encoding(p: &AgentParams, encoding: &Tensor) -> Tensor {
    linear(encoding, &p.message_head.w, &p.message_head.b).expect("message head").sigmoid()
}

/// AEComm observation reconstruction from a message.
pub fn decode_observation(p: &AgentParams, message: &Tensor) -> Result<Tensor, AgentError> {
    let d = p.decoder.as_ref().ok_or(AgentError::NoDecoder)?;
    linear(message, &d.w, &d.b).map_err(|e| AgentError::BadCheckpoint(e.to_string()))
}

/// Pre-sampling outputs of one policy step.
pub struct PolicyOut {
    pub logits: Tensor,
    pub value: Tensor,
    pub hidden: Tensor,
    pub obs_encoding: Tensor,
}

/// Run encoders, GRU, and both heads. `received` is the concatenation of the
/// other agents' previous-step messages in ascending sender order; with
/// communication disabled the message encoding is a zero vector.
pub fn policy_forward(
    p: &mut AgentParams,
    obs: &Tensor,
    received: &Tensor,
    hidden: &Tensor,
    comm: bool,
) -> PolicyOut {
    let e_o = encode_obs(p, obs);
    let e_m = if comm {
        encode_messages(p, received)
    } else {
        Tensor::zeros(&[p.msg_enc_out])
    };
    let x = Tensor::concat(&[&e_o, &e_m]);
    let h = gru_step(&x, hidden, &p.gru).expect("gru");
    let logits = p.policy.forward(&h);
    let value = p.value.forward(&h).pick(0);
    PolicyOut { logits, value, hidden: h, obs_encoding: e_o }
}

/// One acting step: action, log-probability, entropy, value, emitted
/// message, and the next recurrent state.
pub struct AgentStep {
    pub action: usize,
    pub log_prob: Tensor,
    pub entropy: Tensor,
    pub value: Tensor,
    pub message: Tensor,
    pub hidden: Tensor,
}

/// Categorical sample from logits; greedy takes the argmax with ties going
/// to the lowest action index.
pub fn select_action(logits: &[f64], rng: &mut ChaCha8Rng, greedy: bool) -> usize {
    if greedy {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut roll = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        roll -= w;
        if roll < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

pub fn act(
    p: &mut AgentParams,
    obs: &Tensor,
    received: &[Tensor],
    hidden: &Tensor,
    rng: &mut ChaCha8Rng,
    comm: bool,
    greedy: bool,
) -> AgentStep {
    let refs: Vec<&Tensor> = received.iter().collect();
    let received = if refs.is_empty() {
        Tensor::zeros(&[0])
    } else {
        Tensor::concat(&refs)
    };
    let out = policy_forward(p, obs, &received, hidden, comm);
    let action = select_action(out.logits.data(), rng, greedy);
    let logp = out.logits.log_softmax();
    let log_prob = logp.pick(action);
    let probs = logp.exp();
    let entropy = probs.mul(&logp).sum().neg();
    let message = if comm {
        produce_message_from_encoding(p, &out.obs_encoding)
    } else {
        Tensor::zeros(&[MESSAGE_DIM])
    };
    AgentStep { action, log_prob, entropy, value: out.value, message, hidden: out.hidden }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::env_rng;

    fn pp_agent(seed: u64) -> AgentParams {
        AgentParams::init(&EnvConfig::predator_prey(), false, &mut env_rng(seed, 0))
    }

    #[test]
    fn zero_weight_message_head_emits_halves() {
        let mut p = pp_agent(1);
        p.message_head.w = Tensor::zeros(&[MESSAGE_DIM, HIDDEN]);
        p.message_head.b = Tensor::zeros(&[MESSAGE_DIM]);
        let obs = Tensor::vector(vec![0.3; 11]);
        let m = produce_message(&p, &obs);
        assert_eq!(m.to_vec(), vec![0.5; 4]);
    }

    #[test]
    fn messages_are_deterministic_and_in_open_unit_interval() {
        let mut p = pp_agent(2);
        let obs = Tensor::vector((0..11).map(|i| i as f64 / 11.0).collect());
        let a = produce_message(&p, &obs);
        let b = produce_message(&p, &obs);
        assert_eq!(a.to_vec(), b.to_vec());
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let mut rng = env_rng(3, 0);
        let logits = vec![0.0; 5];
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            counts[select_action(&logits, &mut rng, false)] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.2).abs() < 0.01, "freq {freq}");
        }
    }

    #[test]
    fn greedy_ties_break_to_lowest_index() {
        let mut rng = env_rng(4, 0);
        assert_eq!(select_action(&[1.0, 1.0, 0.5], &mut rng, true), 0);
        assert_eq!(select_action(&[0.0, 2.0, 2.0], &mut rng, true), 1);
    }

    #[test]
    fn act_is_deterministic_given_rng_state() {
        let cfg = EnvConfig::predator_prey();
        let mut p = AgentParams::init(&cfg, false, &mut env_rng(5, 0));
        let obs = Tensor::vector(vec![0.1; 11]);
        let received: Vec<Tensor> = (0..3).map(|_| Tensor::filled(&[4], 0.5)).collect();
        let h = Tensor::zeros(&[HIDDEN]);
        let run = |p: &mut AgentParams| {
            let mut rng = env_rng(6, 0);
            let s = act(p, &obs, &received, &h, &mut rng, true, false);
            (s.action, s.log_prob.item(), s.value.item(), s.message.to_vec(), s.hidden.to_vec())
        };
        // Spectral state warm-up changes nothing once converged.
        for _ in 0..60 {
            run(&mut p);
        }
        assert_eq!(run(&mut p), run(&mut p));
    }

    #[test]
    fn iac_ignores_received_messages() {
        let cfg = EnvConfig::predator_prey();
        let mut p = AgentParams::init(&cfg, false, &mut env_rng(7, 0));
        let obs = Tensor::vector(vec![0.2; 11]);
        let h = Tensor::zeros(&[HIDDEN]);
        let quiet: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(&[4])).collect();
        let loud: Vec<Tensor> = (0..3).map(|_| Tensor::filled(&[4], 0.9)).collect();
        let a = act(&mut p, &obs, &quiet, &h, &mut env_rng(8, 0), false, false);
        let b = act(&mut p, &obs, &loud, &h, &mut env_rng(8, 0), false, false);
        assert_eq!(a.action, b.action);
        assert_eq!(a.value.item(), b.value.item());
        assert_eq!(a.message.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn decode_requires_a_decoder() {
        let p = pp_agent(9);
        let m = Tensor::filled(&[4], 0.5);
        assert!(matches!(decode_observation(&p, &m), Err(AgentError::NoDecoder)));

        let mut with = AgentParams::init(&EnvConfig::predator_prey(), true, &mut env_rng(10, 0));
        with.decoder = Some(LinearParams {
            w: Tensor::zeros(&[11, 4]),
            b: Tensor::zeros(&[11]),
        });
        let rec = decode_observation(&with, &m).unwrap();
        assert_eq!(rec.to_vec(), vec![0.0; 11]);
    }

    #[test]
    fn reconstruction_loss_reaches_message_head() {
        let cfg = EnvConfig::predator_prey();
        let master = AgentParams::init(&cfg, true, &mut env_rng(11, 0));
        let tape = Tape::new();
        let mut tracked = master.tracked(&tape);
        let obs = Tensor::vector(vec![0.4; 11]);
        let msg = produce_message(&tracked, &obs);
        let rec = decode_observation(&tracked, &msg).unwrap();
        let err = rec.sub(&obs);
        let loss = err.mul(&err).mean();
        let grads = crate::numerics::backward(&loss).unwrap();
        let g = grads.get_or_zeros(&tracked.message_head.w);
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn spectral_norm_keeps_head_weights_near_unit_gain() {
        let cfg = EnvConfig::predator_prey();
        let mut p = AgentParams::init(&cfg, false, &mut env_rng(12, 0));
        let obs = Tensor::vector(vec![0.3; 11]);
        let h = Tensor::zeros(&[HIDDEN]);
        let mut rng = env_rng(13, 0);
        for _ in 0..60 {
            act(&mut p, &obs, &[], &h, &mut rng, false, false);
        }
        for head in [&mut p.policy, &mut p.value] {
            let eff = spectral_normalize(&head.l2.w, &mut head.sn.clone(), 1).unwrap();
            // Power-iteration oracle on the effective weight.
            let mut u = vec![1.0_f64; HIDDEN];
            let d = eff.data();
            for _ in 0..200 {
                let mut v = vec![0.0; HIDDEN];
                for i in 0..HIDDEN {
                    for j in 0..HIDDEN {
                        v[j] += u[i] * d[i * HIDDEN + j];
                    }
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                for (i, ui) in u.iter_mut().enumerate() {
                    *ui = d[i * HIDDEN..(i + 1) * HIDDEN]
                        .iter()
                        .zip(&v)
                        .map(|(w, v)| w * v)
                        .sum();
                }
                let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                u.iter_mut().for_each(|x| *x /= n);
            }
            let mut wv = vec![0.0; HIDDEN];
            for i in 0..HIDDEN {
                for j in 0..HIDDEN {
                    wv[j] += u[i] * d[i * HIDDEN + j];
                }
            }
            let sigma = wv.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(sigma <= 1.0 + 1e-3, "effective top singular value {sigma}");
        }
    }

    #[test]
    fn tracked_copy_shares_values_but_not_updates() {
        let cfg = EnvConfig::predator_prey();
        let master = AgentParams::init(&cfg, false, &mut env_rng(14, 0));
        let tape = Tape::new();
        let tracked = master.tracked(&tape);
        let mut names = Vec::new();
        master.for_each_param(&mut |n, _| names.push(n.to_string()));
        let mut tracked_count = 0;
        tracked.for_each_param(&mut |_, t| {
            assert!(t.is_tracked());
            tracked_count += 1;
        });
        assert_eq!(tracked_count, names.len());
    }
}
