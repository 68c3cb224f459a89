//! Synthetic multi-domain classification data, few-shot domain-generalization
//! splits, JSONL ingestion, and discrete prompt pools.

mod candidates;
mod generate;
mod jsonl;
mod split;
mod vocab;

use serde::{Deserialize, Serialize};

pub use candidates::{build_prompt_candidates, plant_random_prompts, CandidateKind, PoolConfig, PromptCandidate};
pub use generate::{
    domain_ids, domain_seed, generate_domains, planted_label, token_marginal, total_variation, Categorical, DomainSpec,
    GeneratorConfig, TaskSpec,
};
pub use jsonl::{load_jsonl, load_prompt_pool, write_jsonl, write_prompt_pool};
pub use split::{mfdg_split, MfdgSplit, SplitConfig};
pub use vocab::{Vocabulary, MASK, PAD, SEP, UNK};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub domain: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain: String,
    pub examples: Vec<LabeledExample>,
}

impl DomainDataset {
    pub fn new(domain: impl Into<String>, examples: Vec<LabeledExample>) -> Self {
        Self {
            domain: domain.into(),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }
}
