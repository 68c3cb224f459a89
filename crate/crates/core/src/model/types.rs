use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Token ids laid out as `[prompt] ⊕ [input] ⊕ [mask]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    prompt_span: Range<usize>,
    mask_pos: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, prompt_span: Range<usize>, mask_pos: usize, mask_token_id: usize) -> Result<Self> {
        if prompt_span.start > prompt_span.end || prompt_span.end > ids.len() {
            return Err(Error::InvalidArgument(format!(
                "prompt span {prompt_span:?} out of bounds for length {}",
                ids.len()
            )));
        }
        if mask_pos >= ids.len() || prompt_span.contains(&mask_pos) {
            return Err(Error::InvalidArgument(format!(
                "mask position {mask_pos} invalid for span {prompt_span:?}"
            )));
        }
        if ids[mask_pos] != mask_token_id {
            return Err(Error::InvalidArgument(format!("ids[{mask_pos}] is not the mask token")));
        }
        Ok(Self {
            ids,
            prompt_span,
            mask_pos,
        })
    }

    /// `prompt ⊕ input ⊕ [mask]`.
    pub fn compose(prompt: &[usize], input: &[usize], mask_token_id: usize) -> Self {
        let mut ids = Vec::with_capacity(prompt.len() + input.len() + 1);
        ids.extend_from_slice(prompt);
        ids.extend_from_slice(input);
        ids.push(mask_token_id);
        let mask_pos = ids.len() - 1;
        Self {
            ids,
            prompt_span: 0..prompt.len(),
            mask_pos,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn prompt_span(&self) -> Range<usize> {
        self.prompt_span.clone()
    }

    pub fn mask_pos(&self) -> usize {
        self.mask_pos
    }
}

/// A prompt is either discrete tokens or trainable embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub enum Prompt {
    Tokens(Vec<usize>),
    Embeddings(Tensor),
}

impl Prompt {
    pub fn len(&self) -> usize {
        match self {
            Prompt::Tokens(t) => t.len(),
            Prompt::Embeddings(e) => e.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Soft prompt positions carry the pad id as a placeholder; the forward
    /// pass replaces their embeddings and never masks them.
    pub fn compose(&self, input: &[usize], config: &ModelConfig) -> TokenSequence {
        match self {
            Prompt::Tokens(t) => TokenSequence::compose(t, input, config.mask_token_id),
            Prompt::Embeddings(e) => {
                TokenSequence::compose(&vec![config.pad_token_id; e.rows()], input, config.mask_token_id)
            }
        }
    }
}

/// Per-layer, per-head row-stochastic attention matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    layers: Vec<Vec<Tensor>>,
}

impl AttentionTrace {
    pub fn new(layers: Vec<Vec<Tensor>>) -> Result<Self> {
        if layers.is_empty() || layers.iter().any(Vec::is_empty) {
            return Err(Error::Empty("attention trace"));
        }
        let n = layers[0][0].rows();
        for head in layers.iter().flatten() {
            if head.rows() != n || head.cols() != n {
                return Err(Error::InvalidArgument(
                    "attention matrices must be square and equal-sized".into(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers[0].len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers[0][0].rows()
    }

    pub fn head(&self, layer: usize, head: usize) -> &Tensor {
        &self.layers[layer][head]
    }

    /// Attention weight from `query` to `key` in one head.
    pub fn weight(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.layers[layer][head].get(query, key)
    }

    pub fn layers(&self) -> &[Vec<Tensor>] {
        &self.layers
    }
}

/// Label → token id map used to read class scores at the mask position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    token_ids: Vec<usize>,
}

impl Verbalizer {
    pub fn new(token_ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Empty("verbalizer"));
        }
        if token_ids.iter().any(|&t| t >= vocab_size) {
            return Err(Error::InvalidArgument("verbalizer token outside vocabulary".into()));
        }
        let mut sorted = token_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != token_ids.len() {
            return Err(Error::InvalidArgument("verbalizer must be injective".into()));
        }
        Ok(Self { token_ids })
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn n_labels(&self) -> usize {
        self.token_ids.len()
    }

    pub fn token(&self, label: usize) -> usize {
        self.token_ids[label]
    }
}

/// Probabilities over task labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("not a probability vector: {probs:?}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, label: usize) -> f64 {
        self.0[label]
    }

    /// Most probable label, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}
