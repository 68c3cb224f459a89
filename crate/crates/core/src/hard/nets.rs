use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Graph, Tensor, Var};

/// Fully connected stack with `tanh` between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`. Hidden weights are drawn with
    /// standard deviation `1/√fan_in`; the output layer is scaled by
    /// `out_gain`.
    pub fn new<R: Rng>(dims: &[usize], out_gain: f64, rng: &mut R) -> Self {
        assert!(
            dims.len() >= 2 && dims.iter().all(|&d| d > 0),
            "MLP dims must be positive"
        );
        let n = dims.len() - 1;
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for (i, pair) in dims.windows(2).enumerate() {
            let gain = if i + 1 == n { out_gain } else { 1.0 };
            weights.push(Tensor::randn(pair[0], pair[1], gain / (pair[0] as f64).sqrt(), rng));
            biases.push(Tensor::zeros(1, pair[1]));
        }
        Self { weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("non-empty").cols()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.weights.iter().map(Tensor::cols));
        d
    }

    /// Adds the weights as trainable leaves, in `w0, b0, w1, b1, ...` order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [g.leaf(w.clone(), true), g.leaf(b.clone(), true)])
            .collect()
    }

    /// Records the forward pass of `x: [batch, input]` using bound leaves.
    pub fn forward_graph(g: &mut Graph, leaves: &[Var], x: Var) -> Result<Var> {
        let n = leaves.len() / 2;
        let mut h = x;
        for i in 0..n {
            h = g.linear(h, leaves[2 * i], leaves[2 * i + 1])?;
            if i + 1 < n {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Plain forward pass of one input row.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "state has {} entries, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = x.to_vec();
        let n = self.weights.len();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut out = b.data().to_vec();
            for (k, &hk) in h.iter().enumerate() {
                for (o, &wkj) in out.iter_mut().zip(w.row(k)) {
                    *o += hk * wkj;
                }
            }
            if i + 1 < n {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = out;
        }
        Ok(h)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.weights
            .iter()
            .zip(&self.biases)
            .enumerate()
            .flat_map(|(i, (w, b))| {
                [
                    (format!("{prefix}.w{i}"), w.clone()),
                    (format!("{prefix}.b{i}"), b.clone()),
                ]
            })
            .collect()
    }
}

/// Hidden width for a given state width: `max(4·d_state, 64)`.
pub fn hidden_width(d_state: usize) -> usize {
    (4 * d_state).max(64)
}

/// One agent's policy: state → hidden → one logit per prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentPolicy {
    pub net: Mlp,
}

impl AgentPolicy {
    pub fn new<R: Rng>(d_state: usize, hidden: usize, n_actions: usize, rng: &mut R) -> Self {
        Self {
            net: Mlp::new(&[d_state, hidden, n_actions], 0.01, rng),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(state)
    }
}

/// Value network shared by all agents: state → hidden → hidden → scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedValue {
    pub net: Mlp,
}

impl SharedValue {
    pub fn new<R: Rng>(d_state: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            net: Mlp::new(&[d_state, hidden, hidden, 1], 1.0, rng),
        }
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.net.forward(state)?[0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Sample,
    Greedy,
}

/// Picks an action from `softmax(logits)`: sampled, or the arg-max with ties
/// going to the lowest index. Returns the action and its log-probability.
pub fn select_from_logits<R: Rng>(logits: &[f64], mode: SelectMode, rng: &mut R) -> (usize, f64) {
    let lse = log_sum_exp(logits);
    let action = match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = logits.len() - 1;
            for (i, &v) in logits.iter().enumerate() {
                acc += (v - lse).exp();
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        }
    };
    (action, logits[action] - lse)
}

pub fn policy_select<R: Rng>(
    policy: &AgentPolicy,
    state: &[f64],
    mode: SelectMode,
    rng: &mut R,
) -> Result<(usize, f64)> {
    Ok(select_from_logits(&policy.logits(state)?, mode, rng))
}
