use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DomainDataset, LabeledExample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Held-out domain; `None` picks the last domain.
    pub target: Option<String>,
    pub shots_per_source: usize,
    pub validation_per_source: usize,
    /// Extra label-balanced source examples reserved for in-domain testing.
    pub in_domain_test_per_source: usize,
    pub test_size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            target: None,
            shots_per_source: 32,
            validation_per_source: 32,
            in_domain_test_per_source: 300,
            test_size: 1000,
        }
    }
}

/// Few-shot source training data plus a large held-out target test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfdgSplit {
    pub sources: Vec<String>,
    pub target: String,
    pub train: Vec<DomainDataset>,
    pub validation: Vec<DomainDataset>,
    pub in_domain_test: Vec<DomainDataset>,
    pub test: DomainDataset,
    /// Source examples not used by any split, available for backbone
    /// pretraining.
    pub unlabeled_pool: Vec<DomainDataset>,
}

impl MfdgSplit {
    pub fn train_size(&self) -> usize {
        self.train.iter().map(DomainDataset::len).sum()
    }
}

/// Splits generated domains into few-shot source sets and a target test set.
pub fn mfdg_split(datasets: &[DomainDataset], config: &SplitConfig, n_labels: usize, seed: u64) -> Result<MfdgSplit> {
    let target = match &config.target {
        Some(t) => t.clone(),
        None => datasets.last().ok_or(Error::Empty("dataset list"))?.domain.clone(),
    };
    let target_data = datasets
        .iter()
        .find(|d| d.domain == target)
        .ok_or_else(|| Error::InvalidArgument(format!("target domain `{target}` not among the datasets")))?;
    if n_labels == 0 {
        return Err(Error::InvalidArgument("n_labels must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D46_4447);
    let mut out = MfdgSplit {
        sources: Vec::new(),
        target: target.clone(),
        train: Vec::new(),
        validation: Vec::new(),
        in_domain_test: Vec::new(),
        test: DomainDataset::new(target.clone(), Vec::new()),
        unlabeled_pool: Vec::new(),
    };
    for source in datasets.iter().filter(|d| d.domain != target) {
        let mut by_label: Vec<Vec<&LabeledExample>> = vec![Vec::new(); n_labels];
        for ex in &source.examples {
            if ex.label >= n_labels {
                return Err(Error::InvalidArgument(format!("label {} out of range", ex.label)));
            }
            by_label[ex.label].push(ex);
        }
        for bucket in &mut by_label {
            bucket.shuffle(&mut rng);
        }
        let mut take = |total: usize, what: &str| -> Result<Vec<LabeledExample>> {
            if total % n_labels != 0 {
                return Err(Error::Config(format!(
                    "{what} size {total} is not divisible by {n_labels} labels"
                )));
            }
            let per_label = total / n_labels;
            let mut picked = Vec::with_capacity(total);
            for (y, bucket) in by_label.iter_mut().enumerate() {
                if bucket.len() < per_label {
                    return Err(Error::InsufficientData(format!(
                        "domain `{}` has {} examples of label {y}, {what} needs {per_label}",
                        source.domain,
                        bucket.len()
                    )));
                }
                picked.extend(bucket.drain(..per_label).cloned());
            }
            picked.shuffle(&mut rng);
            Ok(picked)
        };
        let train = take(config.shots_per_source, "train")?;
        let validation = take(config.validation_per_source, "validation")?;
        let in_domain = take(config.in_domain_test_per_source, "in-domain test")?;
        let mut rest: Vec<LabeledExample> = by_label.into_iter().flatten().cloned().collect();
        rest.shuffle(&mut rng);

        out.sources.push(source.domain.clone());
        out.train.push(DomainDataset::new(source.domain.clone(), train));
        out.validation
            .push(DomainDataset::new(source.domain.clone(), validation));
        out.in_domain_test
            .push(DomainDataset::new(source.domain.clone(), in_domain));
        out.unlabeled_pool.push(DomainDataset::new(source.domain.clone(), rest));
    }
    if out.sources.is_empty() {
        return Err(Error::InsufficientData("no source domains besides the target".into()));
    }

    let needed = 10 * out.train_size();
    if config.test_size < needed {
        return Err(Error::Config(format!(
            "target test size {} must be at least 10x the training size ({needed})",
            config.test_size
        )));
    }
    if target_data.len() < config.test_size {
        return Err(Error::InsufficientData(format!(
            "target domain has {} examples, test set needs {}",
            target_data.len(),
            config.test_size
        )));
    }
    let mut test = target_data.examples.clone();
    test.shuffle(&mut rng);
    test.truncate(config.test_size);
    out.test = DomainDataset::new(target, test);
    Ok(out)
}
