use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use super::{DomainDataset, LabeledExample};
use crate::error::{Error, Result};

/// Shape of the synthetic classification task shared by every domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub label_names: Vec<String>,
    pub indicative_per_label: usize,
    pub n_filler: usize,
    pub n_common_style: usize,
    pub n_style_per_domain: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a position holds a label-indicative token.
    pub indicative_rate: f64,
    /// Probability that a position holds a style token.
    pub style_rate: f64,
    /// Probability that an indicative token belongs to the example's label.
    pub rule_strength: f64,
    /// Probability that a finished example's label is replaced by another.
    pub label_noise: f64,
    /// Weight of the domain-specific frequency skew over indicative tokens at
    /// full shift.
    pub skew: f64,
    pub examples_per_domain: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            label_names: vec!["negative".into(), "positive".into()],
            indicative_per_label: 12,
            n_filler: 24,
            n_common_style: 8,
            n_style_per_domain: 8,
            min_len: 8,
            max_len: 14,
            indicative_rate: 0.25,
            style_rate: 0.3,
            rule_strength: 0.8,
            label_noise: 0.0,
            skew: 0.8,
            examples_per_domain: 1500,
        }
    }
}

impl TaskSpec {
    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.label_names.len() < 2 {
            return Err(Error::Config("the task needs at least 2 labels".into()));
        }
        let mut names = self.label_names.clone();
        names.sort();
        names.dedup();
        if names.len() != self.label_names.len() {
            return Err(Error::Config("label names must be distinct".into()));
        }
        if self.indicative_per_label == 0
            || self.n_filler == 0
            || self.n_common_style == 0
            || self.n_style_per_domain == 0
        {
            return Err(Error::Config("every token class needs at least one token".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "bad length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !unit(self.indicative_rate) || !unit(self.style_rate) || self.indicative_rate + self.style_rate > 1.0 {
            return Err(Error::Config("indicative_rate + style_rate must lie in [0, 1]".into()));
        }
        if !(self.rule_strength > 0.0 && self.rule_strength <= 1.0) {
            return Err(Error::Config("rule_strength must lie in (0, 1]".into()));
        }
        if !unit(self.label_noise) || !unit(self.skew) {
            return Err(Error::Config("label_noise and skew must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self, n_domains: usize) -> Vocabulary {
        Vocabulary::synthetic(self, &domain_ids(n_domains))
    }
}

/// Generator settings serialized alongside experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub task: TaskSpec,
    pub n_domains: usize,
    pub shift: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            n_domains: 3,
            shift: 0.6,
        }
    }
}

impl GeneratorConfig {
    pub fn vocabulary(&self) -> Vocabulary {
        self.task.vocabulary(self.n_domains)
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<DomainDataset>> {
        generate_domains(&self.task, self.n_domains, self.shift, seed)
    }
}

pub fn domain_ids(n_domains: usize) -> Vec<String> {
    (0..n_domains).map(|i| format!("d{i}")).collect()
}

/// A finite distribution over token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    pub ids: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Categorical {
    fn uniform(ids: impl IntoIterator<Item = usize>) -> Self {
        let ids: Vec<usize> = ids.into_iter().collect();
        let p = 1.0 / ids.len() as f64;
        Self {
            probs: vec![p; ids.len()],
            ids,
        }
    }

    fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.probs).expect("categorical weights are positive")
    }
}

/// Emission model of one domain: label prior, per-label indicative-token
/// distributions, style and filler distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub label_prior: Vec<f64>,
    pub indicative: Vec<Categorical>,
    pub style: Categorical,
    pub filler: Categorical,
    pub min_len: usize,
    pub max_len: usize,
    pub indicative_rate: f64,
    pub style_rate: f64,
    pub rule_strength: f64,
    pub label_noise: f64,
}

impl DomainSpec {
    /// Domain `index` of `n_domains` at shift strength `shift`.
    ///
    /// With probability `shift` a style token comes from the domain's own
    /// style block instead of the common one, and indicative-token frequencies
    /// tilt toward a domain-specific half of each label's block.
    pub fn build(task: &TaskSpec, vocab: &Vocabulary, index: usize, n_domains: usize, shift: f64) -> Self {
        let n_labels = task.n_labels();
        let n_ind = task.indicative_per_label;
        let favored = (n_ind / 2).max(1);
        let offset = index * n_ind / n_domains.max(1);
        let tilt = shift * task.skew;
        let indicative = vocab
            .indicative
            .iter()
            .map(|range| {
                let probs = (0..n_ind)
                    .map(|j| {
                        let in_block = (j + n_ind - offset) % n_ind < favored;
                        (1.0 - tilt) / n_ind as f64 + if in_block { tilt / favored as f64 } else { 0.0 }
                    })
                    .collect();
                Categorical {
                    ids: range.clone().collect(),
                    probs,
                }
            })
            .collect();

        let common = vocab.common_style.clone();
        let own = vocab.domain_style[index].clone();
        let mut ids: Vec<usize> = common.clone().collect();
        let mut probs = vec![(1.0 - shift) / common.len() as f64; common.len()];
        ids.extend(own.clone());
        probs.extend(std::iter::repeat(shift / own.len() as f64).take(own.len()));
        let (ids, probs) = ids.into_iter().zip(probs).filter(|&(_, p)| p > 0.0).unzip();

        Self {
            id: domain_ids(n_domains)[index].clone(),
            label_prior: vec![1.0 / n_labels as f64; n_labels],
            indicative,
            style: Categorical { ids, probs },
            filler: Categorical::uniform(vocab.filler.clone()),
            min_len: task.min_len,
            max_len: task.max_len,
            indicative_rate: task.indicative_rate,
            style_rate: task.style_rate,
            rule_strength: task.rule_strength,
            label_noise: task.label_noise,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> LabeledExample {
        let n_labels = self.label_prior.len();
        let label = WeightedIndex::new(&self.label_prior).expect("label prior").sample(rng);
        let len = rng.gen_range(self.min_len..=self.max_len);

        #[derive(Clone, Copy, PartialEq)]
        enum Slot {
            Indicative,
            Style,
            Filler,
        }
        let mut slots: Vec<Slot> = (0..len)
            .map(|_| {
                let u: f64 = rng.gen();
                if u < self.indicative_rate {
                    Slot::Indicative
                } else if u < self.indicative_rate + self.style_rate {
                    Slot::Style
                } else {
                    Slot::Filler
                }
            })
            .collect();
        if !slots.contains(&Slot::Indicative) {
            let pos = rng.gen_range(0..len);
            slots[pos] = Slot::Indicative;
        }
        let n_cues = slots.iter().filter(|&&s| s == Slot::Indicative).count();

        // Redraw cue labels until the true label holds a strict plurality.
        let cue_labels = loop {
            let draw: Vec<usize> = (0..n_cues)
                .map(|_| {
                    if rng.gen::<f64>() < self.rule_strength {
                        label
                    } else {
                        let other = rng.gen_range(0..n_labels - 1);
                        if other >= label {
                            other + 1
                        } else {
                            other
                        }
                    }
                })
                .collect();
            if plurality(&draw, n_labels) == Some(label) {
                break draw;
            }
        };

        let cue_samplers: Vec<_> = self.indicative.iter().map(Categorical::sampler).collect();
        let style = self.style.sampler();
        let filler = self.filler.sampler();
        let mut cues = cue_labels.into_iter();
        let tokens = slots
            .into_iter()
            .map(|slot| match slot {
                Slot::Indicative => {
                    let y = cues.next().expect("one cue label per slot");
                    self.indicative[y].ids[cue_samplers[y].sample(rng)]
                }
                Slot::Style => self.style.ids[style.sample(rng)],
                Slot::Filler => self.filler.ids[filler.sample(rng)],
            })
            .collect();

        let label = if self.label_noise > 0.0 && rng.gen::<f64>() < self.label_noise {
            let other = rng.gen_range(0..n_labels - 1);
            if other >= label {
                other + 1
            } else {
                other
            }
        } else {
            label
        };
        LabeledExample {
            tokens,
            label,
            domain: self.id.clone(),
        }
    }
}

fn plurality(labels: &[usize], n_labels: usize) -> Option<usize> {
    let mut counts = vec![0usize; n_labels];
    for &y in labels {
        counts[y] += 1;
    }
    let best = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|&(_, &c)| c == best);
    let (y, _) = winners.next()?;
    if winners.next().is_some() {
        None
    } else {
        Some(y)
    }
}

/// The label whose indicative tokens strictly outnumber every other label's,
/// if any.
pub fn planted_label(tokens: &[usize], vocab: &Vocabulary) -> Option<usize> {
    let labels: Vec<usize> = tokens
        .iter()
        .filter_map(|t| vocab.indicative.iter().position(|r| r.contains(t)))
        .collect();
    plurality(&labels, vocab.indicative.len())
}

pub fn domain_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generates `n_domains` corpora of `task.examples_per_domain` examples each.
///
/// Label-indicative tokens and the label rule are shared; style tokens and
/// indicative-token frequencies move apart as `shift` goes from 0 to 1.
pub fn generate_domains(task: &TaskSpec, n_domains: usize, shift: f64, seed: u64) -> Result<Vec<DomainDataset>> {
    task.validate()?;
    if n_domains < 2 {
        return Err(Error::Config(format!("need at least 2 domains, got {n_domains}")));
    }
    if !(0.0..=1.0).contains(&shift) {
        return Err(Error::Config(format!("shift strength {shift} outside [0, 1]")));
    }
    let vocab = task.vocabulary(n_domains);
    Ok((0..n_domains)
        .map(|index| {
            let spec = DomainSpec::build(task, &vocab, index, n_domains, shift);
            let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(seed, index));
            DomainDataset {
                domain: spec.id.clone(),
                examples: (0..task.examples_per_domain).map(|_| spec.sample(&mut rng)).collect(),
            }
        })
        .collect())
}

/// Empirical unigram distribution over `vocab_size` ids.
pub fn token_marginal(dataset: &DomainDataset, vocab_size: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab_size];
    let mut total = 0.0;
    for ex in &dataset.examples {
        for &t in &ex.tokens {
            counts[t] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
