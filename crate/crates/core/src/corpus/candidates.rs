use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, SEP};
use super::DomainDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Template,
    Exemplar,
    Random,
    External,
}

/// A discrete prompt offered to one source domain's agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub domain: String,
    pub kind: CandidateKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    /// Candidates per source domain (templates plus exemplars).
    pub per_domain: usize,
    /// How many of the `per_domain` candidates are templates.
    pub templates: usize,
    pub min_template_len: usize,
    pub max_template_len: usize,
    /// Random-token prompts appended to each pool.
    pub planted_random: usize,
    pub random_len: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            per_domain: 15,
            templates: 8,
            min_template_len: 2,
            max_template_len: 4,
            planted_random: 5,
            random_len: 6,
        }
    }
}

fn pool_rng(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt ^ (index as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Builds one pool per source training set: template prompts drawn from the
/// template vocabulary, then in-context exemplars
/// (`review <example> sentiment <label word> <sep>`) taken from that
/// domain's own training data. Ids are unique across all pools.
pub fn build_prompt_candidates(
    sources: &[DomainDataset],
    vocab: &Vocabulary,
    config: &PoolConfig,
    seed: u64,
) -> Result<Vec<Vec<PromptCandidate>>> {
    if config.templates > config.per_domain {
        return Err(Error::Config("templates exceed the pool size".into()));
    }
    if config.min_template_len == 0 || config.min_template_len > config.max_template_len {
        return Err(Error::Config("bad template length range".into()));
    }
    let words = vocab.template_ids();
    let review = vocab.id("review").expect("template word");
    let sentiment = vocab.id("sentiment").expect("template word");
    let mut next_id = 0u64;
    let mut pools = Vec::with_capacity(sources.len());
    for (index, source) in sources.iter().enumerate() {
        let mut rng = pool_rng(seed, index, 0x504F_4F4C);
        let mut pool: Vec<PromptCandidate> = Vec::with_capacity(config.per_domain);
        let mut attempts = 0;
        while pool.len() < config.templates {
            let len = rng.gen_range(config.min_template_len..=config.max_template_len);
            let tokens: Vec<usize> = (0..len)
                .map(|_| *words.choose(&mut rng).expect("template words"))
                .collect();
            attempts += 1;
            if pool.iter().any(|c| c.tokens == tokens) && attempts < 10_000 {
                continue;
            }
            pool.push(PromptCandidate {
                id: next_id,
                tokens,
                domain: source.domain.clone(),
                kind: CandidateKind::Template,
            });
            next_id += 1;
        }
        let n_exemplars = config.per_domain - config.templates;
        if n_exemplars > source.len() {
            return Err(Error::InsufficientData(format!(
                "domain `{}` has {} training examples, {n_exemplars} exemplars requested",
                source.domain,
                source.len()
            )));
        }
        let picks = rand::seq::index::sample(&mut rng, source.len(), n_exemplars);
        for i in picks.iter() {
            let ex = &source.examples[i];
            let mut tokens = Vec::with_capacity(ex.tokens.len() + 4);
            tokens.push(review);
            tokens.extend(&ex.tokens);
            tokens.extend([sentiment, vocab.label_words.start + ex.label, SEP]);
            pool.push(PromptCandidate {
                id: next_id,
                tokens,
                domain: source.domain.clone(),
                kind: CandidateKind::Exemplar,
            });
            next_id += 1;
        }
        pools.push(pool);
    }
    Ok(pools)
}

/// Appends `config.planted_random` prompts of uniformly random content tokens
/// to each pool, with ids continuing past the largest existing id.
pub fn plant_random_prompts(pools: &mut [Vec<PromptCandidate>], vocab: &Vocabulary, config: &PoolConfig, seed: u64) {
    let mut next_id = pools.iter().flatten().map(|c| c.id + 1).max().unwrap_or(0);
    let content = vocab.content_ids();
    for (index, pool) in pools.iter_mut().enumerate() {
        let mut rng = pool_rng(seed, index, 0x524E_4450);
        let domain = pool.first().map(|c| c.domain.clone()).unwrap_or_default();
        for _ in 0..config.planted_random {
            let tokens = (0..config.random_len.max(1))
                .map(|_| rng.gen_range(content.clone()))
                .collect();
            pool.push(PromptCandidate {
                id: next_id,
                tokens,
                domain: domain.clone(),
                kind: CandidateKind::Random,
            });
            next_id += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_domains, mfdg_split, SplitConfig, TaskSpec};
    use std::collections::HashSet;

    fn setup() -> (Vocabulary, Vec<DomainDataset>) {
        let task = TaskSpec::default();
        let data = generate_domains(&task, 3, 0.5, 2).unwrap();
        let split = mfdg_split(&data, &SplitConfig::default(), 2, 2).unwrap();
        (task.vocabulary(3), split.train)
    }

    #[test]
    fn ids_unique_and_exemplars_from_own_domain() {
        let (vocab, train) = setup();
        let cfg = PoolConfig::default();
        let mut pools = build_prompt_candidates(&train, &vocab, &cfg, 4).unwrap();
        plant_random_prompts(&mut pools, &vocab, &cfg, 4);
        let ids: HashSet<u64> = pools.iter().flatten().map(|c| c.id).collect();
        assert_eq!(ids.len(), pools.iter().map(Vec::len).sum::<usize>());
        for (pool, source) in pools.iter().zip(&train) {
            assert_eq!(pool.len(), cfg.per_domain + cfg.planted_random);
            for c in pool.iter().filter(|c| c.kind == CandidateKind::Exemplar) {
                assert_eq!(c.domain, source.domain);
                let body = &c.tokens[1..c.tokens.len() - 3];
                assert!(source.examples.iter().any(|e| e.tokens == body));
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (vocab, train) = setup();
        let cfg = PoolConfig::default();
        let a = build_prompt_candidates(&train, &vocab, &cfg, 9).unwrap();
        let b = build_prompt_candidates(&train, &vocab, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }
}
