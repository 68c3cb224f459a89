use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use crate::checkpoint::Checkpoint;
use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Prompt, Verbalizer};
use crate::numerics::Tensor;

/// How the soft prompt rows are seeded before training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Gaussian rows matching the embedding table's standard deviation.
    #[default]
    Random,
    /// Embeddings of the verbalizer's label words, cycled.
    Label,
    /// Embeddings of uniformly drawn vocabulary tokens.
    Vocab,
    /// Embeddings drawn from the 1000 most frequent training tokens.
    Top1k,
    /// Embeddings of task-description tokens, cycled.
    Task,
}

/// Trainable `L × d_model` prompt embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt {
    pub embeddings: Tensor,
    pub init: InitStrategy,
}

/// Token sources the non-random initializers draw from.
#[derive(Clone, Copy, Debug)]
pub struct InitContext<'a> {
    pub verbalizer: &'a Verbalizer,
    pub task_tokens: &'a [usize],
    /// Token ids that may be drawn by [`InitStrategy::Vocab`].
    pub vocab_tokens: &'a [usize],
    pub train: &'a [LabeledExample],
}

impl SoftPrompt {
    pub fn new(embeddings: Tensor, init: InitStrategy) -> Result<Self> {
        if !embeddings.is_matrix() || !embeddings.is_finite() {
            return Err(Error::InvalidArgument(
                "soft prompt must be a finite L × d matrix".into(),
            ));
        }
        Ok(Self { embeddings, init })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn as_prompt(&self) -> Prompt {
        Prompt::Embeddings(self.embeddings.clone())
    }

    pub fn to_checkpoint(&self, weights: &LossWeights) -> Checkpoint {
        let meta = serde_json::json!({
            "length": self.len(),
            "d_model": self.width(),
            "init": self.init,
            "weights": weights,
        });
        let mut ck = Checkpoint::new("soft_prompt", meta);
        ck.push("embeddings", self.embeddings.clone());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "soft_prompt" {
            return Err(Error::Checkpoint(format!(
                "expected a soft_prompt checkpoint, found `{}`",
                ck.kind
            )));
        }
        let init = serde_json::from_value(ck.meta["init"].clone())?;
        Self::new(ck.tensor("embeddings")?.clone(), init)
    }
}

fn embedding_rows(params: &ModelParams, ids: &[usize]) -> Tensor {
    let d = params.config.d_model;
    let data = ids
        .iter()
        .flat_map(|&i| params.tok_emb.row(i).iter().copied())
        .collect();
    Tensor::matrix(ids.len(), d, data)
}

fn cycled(ids: &[usize], len: usize) -> Vec<usize> {
    ids.iter().copied().cycle().take(len).collect()
}

/// Builds an `len`-row soft prompt for `params` with the given strategy.
pub fn init_soft_prompt(
    strategy: InitStrategy,
    len: usize,
    params: &ModelParams,
    ctx: &InitContext,
    seed: u64,
) -> Result<SoftPrompt> {
    if len == 0 {
        return Err(Error::InvalidArgument("soft prompt length must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x534F_4654);
    let pick = |pool: &[usize], rng: &mut ChaCha8Rng, what: &'static str| -> Result<Vec<usize>> {
        if pool.is_empty() {
            return Err(Error::Empty(what));
        }
        Ok((0..len).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
    };
    let embeddings = match strategy {
        InitStrategy::Random => {
            let std = params.embedding_std().max(1e-3);
            Tensor::randn(len, params.config.d_model, std, &mut rng)
        }
        InitStrategy::Label => embedding_rows(params, &cycled(ctx.verbalizer.token_ids(), len)),
        InitStrategy::Task => {
            if ctx.task_tokens.is_empty() {
                return Err(Error::Empty("task token list"));
            }
            embedding_rows(params, &cycled(ctx.task_tokens, len))
        }
        InitStrategy::Vocab => embedding_rows(params, &pick(ctx.vocab_tokens, &mut rng, "vocabulary token list")?),
        InitStrategy::Top1k => {
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for ex in ctx.train {
                for &t in &ex.tokens {
                    *counts.entry(t).or_default() += 1;
                }
            }
            let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(1000);
            let pool: Vec<usize> = ranked.into_iter().map(|(t, _)| t).collect();
            embedding_rows(params, &pick(&pool, &mut rng, "training token list")?)
        }
    };
    SoftPrompt::new(embeddings, strategy)
}
