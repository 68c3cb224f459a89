use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::generate::TaskSpec;
use crate::error::Result;
use crate::model::{ModelConfig, Verbalizer};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<mask>", "<unk>", "<sep>"];

const TEMPLATE_WORDS: [&str; 16] = [
    "review",
    "sentiment",
    "text",
    "label",
    "is",
    "the",
    "answer",
    ":",
    "it",
    "was",
    "overall",
    "verdict",
    "opinion",
    "in",
    "summary",
    "this",
];

/// Closed synthetic vocabulary; one whitespace-separated word per token.
///
/// Token classes occupy contiguous id ranges so generators can sample by
/// class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub label_words: Range<usize>,
    pub templates: Range<usize>,
    /// One range of indicative tokens per label.
    pub indicative: Vec<Range<usize>>,
    pub filler: Range<usize>,
    pub common_style: Range<usize>,
    /// One range of style tokens per domain, in domain order.
    pub domain_style: Vec<Range<usize>>,
}

impl Vocabulary {
    pub fn synthetic(task: &TaskSpec, domains: &[String]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let block = |tokens: &mut Vec<String>, words: Vec<String>| {
            let start = tokens.len();
            tokens.extend(words);
            start..tokens.len()
        };
        let label_words = block(&mut tokens, task.label_names.clone());
        let templates = block(&mut tokens, TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect());
        let indicative = task
            .label_names
            .iter()
            .map(|name| {
                block(
                    &mut tokens,
                    (0..task.indicative_per_label)
                        .map(|k| format!("{name}_cue{k}"))
                        .collect(),
                )
            })
            .collect();
        let filler = block(&mut tokens, (0..task.n_filler).map(|k| format!("w{k}")).collect());
        let common_style = block(
            &mut tokens,
            (0..task.n_common_style).map(|k| format!("style{k}")).collect(),
        );
        let domain_style = domains
            .iter()
            .map(|d| {
                block(
                    &mut tokens,
                    (0..task.n_style_per_domain).map(|k| format!("{d}_style{k}")).collect(),
                )
            })
            .collect();
        let mut vocab = Self {
            tokens,
            index: HashMap::new(),
            label_words,
            templates,
            indicative,
            filler,
            common_style,
            domain_style,
        };
        vocab.rebuild_index();
        vocab
    }

    /// Restores the word index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", String::as_str)
    }

    /// Whitespace tokenization; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn verbalizer(&self) -> Result<Verbalizer> {
        Verbalizer::new(self.label_words.clone().collect(), self.len())
    }

    pub fn template_ids(&self) -> Vec<usize> {
        self.templates.clone().collect()
    }

    /// Every non-special token id.
    pub fn content_ids(&self) -> Range<usize> {
        SPECIALS.len()..self.len()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.len(), MASK, PAD)
    }
}
