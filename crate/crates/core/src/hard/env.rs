use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::filter::PromptSet;
use super::mappo::MatchEnv;
use super::metrics::{score_input, GcsWeights};
use crate::concentration::LayerSet;
use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{encode_state, ModelParams, Verbalizer};

/// Prompt matching against a frozen backbone. States and the reward of every
/// (agent, input, prompt) triple are computed once up front; the backbone is
/// only read.
#[derive(Clone, Debug)]
pub struct PlmMatchEnv {
    states: Vec<Vec<f64>>,
    /// `rewards[agent][step][action]`
    rewards: Vec<Vec<Vec<f64>>>,
}

impl PlmMatchEnv {
    pub fn new(
        params: &ModelParams,
        sets: &[PromptSet],
        inputs: &[LabeledExample],
        weights: &GcsWeights,
        verbalizer: &Verbalizer,
        layers: &LayerSet,
    ) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::Empty("prompt set list"));
        }
        if inputs.is_empty() {
            return Err(Error::Empty("training inputs"));
        }
        let states = inputs
            .iter()
            .map(|ex| encode_state(params, &ex.tokens))
            .collect::<Result<Vec<_>>>()?;
        let rewards = sets
            .iter()
            .map(|set| {
                inputs
                    .iter()
                    .map(|ex| {
                        (0..set.len())
                            .map(|a| {
                                let s = score_input(params, &set.prompt(a), ex, verbalizer, layers)?;
                                Ok(weights.reward(s.margin, s.concentration))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { states, rewards })
    }

    /// Mean over steps and agents of the best achievable reward.
    pub fn optimal_mean_reward(&self) -> f64 {
        optimal_mean(&self.rewards)
    }
}

fn optimal_mean(rewards: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for agent in rewards {
        for step in agent {
            total += step.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            n += 1.0;
        }
    }
    total / n
}

impl MatchEnv for PlmMatchEnv {
    fn n_agents(&self) -> usize {
        self.rewards.len()
    }

    fn n_actions(&self, agent: usize) -> usize {
        self.rewards[agent][0].len()
    }

    fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    fn n_steps(&self) -> usize {
        self.states.len()
    }

    fn state(&self, step: usize) -> &[f64] {
        &self.states[step]
    }

    fn reward(&self, agent: usize, step: usize, action: usize) -> f64 {
        self.rewards[agent][step][action]
    }
}

/// Synthetic matching task: inputs come from Gaussian clusters and each
/// agent has one rewarded action per cluster (reward 1, all others 0).
#[derive(Clone, Debug)]
pub struct PlantedBandit {
    centers: Vec<Vec<f64>>,
    noise: f64,
    /// `optimal[agent][cluster]`
    pub optimal: Vec<Vec<usize>>,
    n_actions: usize,
    states: Vec<Vec<f64>>,
    clusters: Vec<usize>,
}

impl PlantedBandit {
    pub fn new(
        n_agents: usize,
        n_actions: usize,
        n_clusters: usize,
        d_state: usize,
        n_steps: usize,
        noise: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4241_4E44);
        let centers: Vec<Vec<f64>> = (0..n_clusters)
            .map(|_| (0..d_state).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let optimal = (0..n_agents)
            .map(|_| {
                let mut picks: Vec<usize> = Vec::with_capacity(n_clusters);
                while picks.len() < n_clusters {
                    let a = rng.gen_range(0..n_actions);
                    if !picks.contains(&a) || n_actions < n_clusters {
                        picks.push(a);
                    }
                }
                picks
            })
            .collect();
        let mut env = Self {
            centers,
            noise,
            optimal,
            n_actions,
            states: Vec::new(),
            clusters: Vec::new(),
        };
        let (states, clusters) = env.sample_inputs(n_steps, &mut rng).into_iter().unzip();
        env.states = states;
        env.clusters = clusters;
        env
    }

    /// Fresh `(state, cluster)` draws, clusters in round-robin order.
    pub fn sample_inputs<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<(Vec<f64>, usize)> {
        (0..n)
            .map(|i| {
                let c = i % self.centers.len();
                let state = self.centers[c]
                    .iter()
                    .map(|&m| m + self.noise * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                (state, c)
            })
            .collect()
    }

    pub fn cluster(&self, step: usize) -> usize {
        self.clusters[step]
    }
}

impl MatchEnv for PlantedBandit {
    fn n_agents(&self) -> usize {
        self.optimal.len()
    }

    fn n_actions(&self, _agent: usize) -> usize {
        self.n_actions
    }

    fn state_dim(&self) -> usize {
        self.centers[0].len()
    }

    fn n_steps(&self) -> usize {
        self.states.len()
    }

    fn state(&self, step: usize) -> &[f64] {
        &self.states[step]
    }

    fn reward(&self, agent: usize, step: usize, action: usize) -> f64 {
        if self.optimal[agent][self.clusters[step]] == action {
            1.0
        } else {
            0.0
        }
    }
}
