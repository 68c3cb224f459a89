use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::{hidden_width, select_from_logits, AgentPolicy, Mlp, SelectMode, SharedValue};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappoConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub clip: f64,
    pub entropy_coef: f64,
    /// Optimization passes over each buffer per update.
    pub update_epochs: usize,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub normalize_advantages: bool,
    /// Hidden width; `None` uses `max(4·d_state, 64)`.
    pub hidden: Option<usize>,
}

impl Default for MappoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 2000,
            minibatch_size: 32,
            clip: 0.2,
            entropy_coef: 0.01,
            update_epochs: 1,
            adam_eps: 1e-5,
            weight_decay: 0.01,
            normalize_advantages: true,
            hidden: None,
        }
    }
}

impl MappoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.minibatch_size == 0 || self.update_epochs == 0 {
            return Err(Error::Config(
                "MAPPO needs lr > 0, minibatch ≥ 1 and update_epochs ≥ 1".into(),
            ));
        }
        if !(self.clip > 0.0) || !(self.entropy_coef >= 0.0) {
            return Err(Error::Config("MAPPO needs clip > 0 and entropy_coef ≥ 0".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.learning_rate,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }
}

/// One agent's one-step episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub old_log_prob: f64,
}

/// Independent per-agent policies with one shared critic, plus their
/// optimizer state.
#[derive(Clone, Debug)]
pub struct Matcher {
    pub policies: Vec<AgentPolicy>,
    pub value: SharedValue,
    pub config: MappoConfig,
    policy_opts: Vec<AdamW>,
    value_opt: AdamW,
}

impl Matcher {
    pub fn new(d_state: usize, actions: &[usize], config: &MappoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if actions.is_empty() || actions.contains(&0) || d_state == 0 {
            return Err(Error::InvalidArgument(
                "every agent needs ≥ 1 action and a non-empty state".into(),
            ));
        }
        let hidden = config.hidden.unwrap_or_else(|| hidden_width(d_state));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D41_5050);
        let policies = actions
            .iter()
            .map(|&k| AgentPolicy::new(d_state, hidden, k, &mut rng))
            .collect();
        let value = SharedValue::new(d_state, hidden, &mut rng);
        Ok(Self {
            policies,
            value,
            policy_opts: actions.iter().map(|_| config.optimizer()).collect(),
            value_opt: config.optimizer(),
            config: config.clone(),
        })
    }

    pub fn n_agents(&self) -> usize {
        self.policies.len()
    }

    pub fn greedy(&self, agent: usize, state: &[f64]) -> Result<usize> {
        let logits = self.policies[agent].logits(state)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(select_from_logits(&logits, SelectMode::Greedy, &mut rng).0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "policy_dims": self.policies.iter().map(|p| p.net.dims()).collect::<Vec<_>>(),
            "value_dims": self.value.net.dims(),
        });
        let mut ck = Checkpoint::new("matcher", meta);
        for (n, p) in self.policies.iter().enumerate() {
            for (name, t) in p.net.named_tensors(&format!("policy.{n}")) {
                ck.push(name, t);
            }
        }
        for (name, t) in self.value.net.named_tensors("value") {
            ck.push(name, t);
        }
        ck
    }

    /// Restores the networks; optimizer state starts fresh.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "matcher" {
            return Err(Error::Checkpoint(format!(
                "expected a matcher checkpoint, found `{}`",
                ck.kind
            )));
        }
        let config: MappoConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let policy_dims: Vec<Vec<usize>> = serde_json::from_value(ck.meta["policy_dims"].clone())?;
        let value_dims: Vec<usize> = serde_json::from_value(ck.meta["value_dims"].clone())?;
        let load = |prefix: &str, dims: &[usize]| -> Result<Mlp> {
            let n = dims.len() - 1;
            let mut weights = Vec::with_capacity(n);
            let mut biases = Vec::with_capacity(n);
            for i in 0..n {
                weights.push(ck.tensor(&format!("{prefix}.w{i}"))?.clone());
                biases.push(ck.tensor(&format!("{prefix}.b{i}"))?.clone());
            }
            Ok(Mlp { weights, biases })
        };
        let policies = policy_dims
            .iter()
            .enumerate()
            .map(|(n, d)| {
                Ok(AgentPolicy {
                    net: load(&format!("policy.{n}"), d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let value = SharedValue {
            net: load("value", &value_dims)?,
        };
        Ok(Self {
            policy_opts: policies.iter().map(|_| config.optimizer()).collect(),
            value_opt: config.optimizer(),
            policies,
            value,
            config,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

fn states_matrix(batch: &[&Transition]) -> Tensor {
    let d = batch[0].state.len();
    Tensor::matrix(
        batch.len(),
        d,
        batch.iter().flat_map(|t| t.state.iter().copied()).collect(),
    )
}

fn apply(opt: &mut AdamW, net: &mut Mlp, grads: &[Tensor]) -> Result<()> {
    let refs: Vec<&Tensor> = grads.iter().collect();
    opt.step(&mut net.tensors_mut(), &refs)
}

/// One MAPPO update over per-agent buffers, which are cleared afterwards.
///
/// Episodes are one step long, so the advantage is `r − v(s)` from the
/// critic before this update, normalized per minibatch. Each policy minimizes
/// the clipped surrogate minus an entropy bonus on its own transitions; the
/// shared critic regresses `r` on the union of all transitions.
pub fn mappo_update(
    matcher: &mut Matcher,
    buffers: &mut [Vec<Transition>],
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if buffers.len() != matcher.n_agents() {
        return Err(Error::InvalidArgument(format!(
            "{} buffers for {} agents",
            buffers.len(),
            matcher.n_agents()
        )));
    }
    if buffers.iter().any(Vec::is_empty) {
        return Err(Error::Empty("replay buffer"));
    }
    let cfg = matcher.config.clone();
    let advantages: Vec<Vec<f64>> = buffers
        .iter()
        .map(|b| {
            b.iter()
                .map(|t| Ok(t.reward - matcher.value.value(&t.state)?))
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut stats = UpdateStats::default();
    let mut n_policy_batches = 0.0;
    for (agent, buffer) in buffers.iter().enumerate() {
        let k = matcher.policies[agent].n_actions();
        if let Some(t) = buffer.iter().find(|t| t.action >= k || !t.reward.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "transition with action {} / reward {} is invalid for agent {agent}",
                t.action, t.reward
            )));
        }
        for _ in 0..cfg.update_epochs {
            let mut order: Vec<usize> = (0..buffer.len()).collect();
            order.shuffle(rng);
            for chunk in order.chunks(cfg.minibatch_size) {
                let batch: Vec<&Transition> = chunk.iter().map(|&i| &buffer[i]).collect();
                let mut adv: Vec<f64> = chunk.iter().map(|&i| advantages[agent][i]).collect();
                if cfg.normalize_advantages && adv.len() > 1 {
                    let mean = adv.iter().sum::<f64>() / adv.len() as f64;
                    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
                    if std > 1e-8 {
                        adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
                    }
                }
                let b = batch.len();
                let mut onehot = vec![0.0; b * k];
                for (i, t) in batch.iter().enumerate() {
                    onehot[i * k + t.action] = 1.0;
                }

                let mut g = Graph::new();
                let leaves = matcher.policies[agent].net.bind(&mut g);
                let x = g.constant(states_matrix(&batch));
                let logits = Mlp::forward_graph(&mut g, &leaves, x)?;
                let lsm = g.log_softmax(logits, None)?;
                let oh = g.constant(Tensor::matrix(b, k, onehot));
                let picked = g.mul(lsm, oh)?;
                let logp = g.sum_cols(picked)?;
                let old = g.constant(Tensor::col_vector(batch.iter().map(|t| t.old_log_prob).collect()));
                let diff = g.sub(logp, old)?;
                let ratio = g.exp(diff)?;
                let a = g.constant(Tensor::col_vector(adv));
                let s1 = g.mul(ratio, a)?;
                let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
                let s2 = g.mul(clipped, a)?;
                let surr = g.minimum(s1, s2)?;
                let surr = g.mean(surr)?;
                let probs = g.exp(lsm)?;
                let plogp = g.mul(probs, lsm)?;
                let neg_ent = g.sum_cols(plogp)?;
                let neg_ent = g.mean(neg_ent)?;
                // loss = −surr − c·entropy = −surr + c·(Σ p log p)
                let ent_term = g.scale(neg_ent, cfg.entropy_coef)?;
                let neg_surr = g.scale(surr, -1.0)?;
                let loss = g.add(neg_surr, ent_term)?;
                stats.policy_loss += -g.scalar(surr);
                stats.entropy += -g.scalar(neg_ent);
                n_policy_batches += 1.0;
                let grads = g.gradient(loss, &leaves)?;
                drop(g);
                apply(
                    &mut matcher.policy_opts[agent],
                    &mut matcher.policies[agent].net,
                    &grads,
                )?;
            }
        }
    }

    let all: Vec<&Transition> = buffers.iter().flatten().collect();
    let mut n_value_batches = 0.0;
    for _ in 0..cfg.update_epochs {
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| all[i]).collect();
            let mut g = Graph::new();
            let leaves = matcher.value.net.bind(&mut g);
            let x = g.constant(states_matrix(&batch));
            let v = Mlp::forward_graph(&mut g, &leaves, x)?;
            let r = g.constant(Tensor::col_vector(batch.iter().map(|t| t.reward).collect()));
            let err = g.sub(v, r)?;
            let sq = g.mul(err, err)?;
            let loss = g.mean(sq)?;
            stats.value_loss += g.scalar(loss);
            n_value_batches += 1.0;
            let grads = g.gradient(loss, &leaves)?;
            drop(g);
            apply(&mut matcher.value_opt, &mut matcher.value.net, &grads)?;
        }
    }
    buffers.iter_mut().for_each(Vec::clear);

    stats.policy_loss /= n_policy_batches;
    stats.entropy /= n_policy_batches;
    stats.value_loss /= n_value_batches;
    if !(stats.policy_loss.is_finite() && stats.value_loss.is_finite()) {
        return Err(Error::Diverged {
            epoch: 0,
            batch: 0,
            detail: format!("MAPPO losses {stats:?}"),
        });
    }
    Ok(stats)
}

/// Environment seen by the matcher: at step `t` every agent observes the
/// same input and picks one of its prompts.
pub trait MatchEnv {
    fn n_agents(&self) -> usize;
    fn n_actions(&self, agent: usize) -> usize;
    fn state_dim(&self) -> usize;
    fn n_steps(&self) -> usize;
    fn state(&self, step: usize) -> &[f64];
    fn reward(&self, agent: usize, step: usize, action: usize) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub input_id: usize,
    pub agent: usize,
    pub action: usize,
    pub reward: f64,
}

/// `input_id,agent,action,reward` rows.
pub fn selection_trace_csv(records: &[SelectionRecord]) -> String {
    let mut out = String::from("input_id,agent,action,reward\n");
    for r in records {
        writeln!(out, "{},{},{},{:.16e}", r.input_id, r.agent, r.action, r.reward).expect("string write");
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainedMatcher {
    pub matcher: Matcher,
    /// Mean reward per step, averaged over agents, for each epoch.
    pub mean_reward: Vec<f64>,
    /// Selections made during the final epoch.
    pub final_trace: Vec<SelectionRecord>,
}

/// Runs `config.epochs` passes over the environment's steps. Each step every
/// agent samples an action and buffers its transition; whenever the buffers
/// hold a minibatch they go through [`mappo_update`].
pub fn train_matcher(env: &dyn MatchEnv, config: &MappoConfig, seed: u64) -> Result<TrainedMatcher> {
    let n_agents = env.n_agents();
    if n_agents == 0 || env.n_steps() == 0 {
        return Err(Error::Empty("matching environment"));
    }
    let actions: Vec<usize> = (0..n_agents).map(|n| env.n_actions(n)).collect();
    let mut matcher = Matcher::new(env.state_dim(), &actions, config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5452_4E4D);
    let mut buffers: Vec<Vec<Transition>> = vec![Vec::new(); n_agents];
    let mut mean_reward = Vec::with_capacity(config.epochs);
    let mut final_trace = Vec::new();

    for epoch in 0..config.epochs {
        let last = epoch + 1 == config.epochs;
        let mut total = 0.0;
        for t in 0..env.n_steps() {
            let state = env.state(t);
            for (agent, buffer) in buffers.iter_mut().enumerate() {
                let logits = matcher.policies[agent].logits(state)?;
                let (action, log_prob) = select_from_logits(&logits, SelectMode::Sample, &mut rng);
                let reward = env.reward(agent, t, action);
                total += reward;
                if last {
                    final_trace.push(SelectionRecord {
                        input_id: t,
                        agent,
                        action,
                        reward,
                    });
                }
                buffer.push(Transition {
                    state: state.to_vec(),
                    action,
                    reward,
                    old_log_prob: log_prob,
                });
            }
            if buffers[0].len() >= config.minibatch_size {
                mappo_update(&mut matcher, &mut buffers, &mut rng)?;
            }
        }
        mean_reward.push(total / (env.n_steps() * n_agents) as f64);
    }
    if !buffers[0].is_empty() {
        mappo_update(&mut matcher, &mut buffers, &mut rng)?;
    }
    Ok(TrainedMatcher {
        matcher,
        mean_reward,
        final_trace,
    })
}
