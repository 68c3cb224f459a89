use serde::{Deserialize, Serialize};

use super::metrics::{score_prompt, GcsWeights, PromptScore};
use crate::concentration::LayerSet;
use crate::corpus::{LabeledExample, PromptCandidate};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Prompt, Verbalizer};

/// The discrete prompts available to one source domain's agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub domain: String,
    pub candidates: Vec<PromptCandidate>,
}

impl PromptSet {
    pub fn new(domain: impl Into<String>, candidates: Vec<PromptCandidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Empty("prompt set"));
        }
        if let Some(c) = candidates.iter().find(|c| c.tokens.is_empty()) {
            return Err(Error::InvalidArgument(format!("prompt {} has no tokens", c.id)));
        }
        Ok(Self {
            domain: domain.into(),
            candidates,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn prompt(&self, action: usize) -> Prompt {
        Prompt::Tokens(self.candidates[action].tokens.clone())
    }

    pub fn longest(&self) -> usize {
        self.candidates.iter().map(|c| c.tokens.len()).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: PromptCandidate,
    pub score: PromptScore,
    pub gcs: f64,
}

/// Scores every candidate and sorts by GCS descending, ties by id ascending.
pub fn rank_candidates(
    params: &ModelParams,
    pool: &[PromptCandidate],
    dataset: &[LabeledExample],
    weights: &GcsWeights,
    verbalizer: &Verbalizer,
    layers: &LayerSet,
) -> Result<Vec<ScoredCandidate>> {
    weights.validate()?;
    let mut scored = pool
        .iter()
        .map(|c| {
            let score = score_prompt(params, &Prompt::Tokens(c.tokens.clone()), dataset, verbalizer, layers)?;
            Ok(ScoredCandidate {
                candidate: c.clone(),
                gcs: score.gcs(weights),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.gcs.total_cmp(&a.gcs).then(a.candidate.id.cmp(&b.candidate.id)));
    Ok(scored)
}

/// Keeps the `k` best candidates by GCS.
pub fn filter_prompt_set(
    params: &ModelParams,
    pool: &[PromptCandidate],
    dataset: &[LabeledExample],
    weights: &GcsWeights,
    verbalizer: &Verbalizer,
    layers: &LayerSet,
    k: usize,
) -> Result<PromptSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if pool.len() < k {
        return Err(Error::InsufficientData(format!(
            "pool of {} prompts cannot fill K = {k}",
            pool.len()
        )));
    }
    let domain = pool[0].domain.clone();
    let ranked = rank_candidates(params, pool, dataset, weights, verbalizer, layers)?;
    PromptSet::new(domain, ranked.into_iter().take(k).map(|s| s.candidate).collect())
}
