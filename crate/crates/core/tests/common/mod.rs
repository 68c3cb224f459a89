#![allow(dead_code)]

use concentra::corpus::PoolConfig;
use concentra::corpus::{mfdg_split, DomainDataset, GeneratorConfig, MfdgSplit, SplitConfig, TaskSpec, Vocabulary};
use concentra::hard::MappoConfig;
use concentra::harness::{BackboneConfig, ExperimentConfig, HardSettings, Method, PilotSettings, SoftSettings};
use concentra::model::{init_params, pretrain_backbone, ModelConfig, ModelParams, PretrainConfig, Verbalizer};
use concentra::soft::TrainConfig;

pub fn small_generator(examples_per_domain: usize) -> GeneratorConfig {
    GeneratorConfig {
        task: TaskSpec {
            examples_per_domain,
            ..TaskSpec::default()
        },
        n_domains: 3,
        shift: 0.8,
    }
}

pub fn small_model_config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq: 48,
        ..vocab.model_config()
    }
}

pub struct Fixture {
    pub vocab: Vocabulary,
    pub verbalizer: Verbalizer,
    pub data: Vec<DomainDataset>,
    pub split: MfdgSplit,
    pub params: ModelParams,
}

pub fn small_split_config() -> SplitConfig {
    SplitConfig {
        shots_per_source: 16,
        validation_per_source: 8,
        in_domain_test_per_source: 60,
        test_size: 400,
        ..SplitConfig::default()
    }
}

/// Three-domain corpus, its split, and a d=16 backbone pretrained for
/// `epochs` on the unlabeled source pool.
pub fn fixture(seed: u64, epochs: usize) -> Fixture {
    let gen = small_generator(400);
    let vocab = gen.vocabulary();
    let verbalizer = vocab.verbalizer().unwrap();
    let data = gen.generate(seed).unwrap();
    let split = mfdg_split(&data, &small_split_config(), 2, seed).unwrap();
    let cfg = small_model_config(&vocab);
    let params = if epochs == 0 {
        init_params(&cfg, seed).unwrap()
    } else {
        let pre = PretrainConfig {
            epochs,
            prompt_tokens: vocab.template_ids(),
            ..PretrainConfig::default()
        };
        pretrain_backbone(&cfg, &split.unlabeled_pool, &verbalizer, &pre, seed)
            .unwrap()
            .params
    };
    Fixture {
        vocab,
        verbalizer,
        data,
        split,
        params,
    }
}

/// A complete experiment small enough for a few seconds per seed.
pub fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![0, 1],
        methods: Method::ALL.to_vec(),
        generator: small_generator(300),
        split: SplitConfig {
            shots_per_source: 8,
            validation_per_source: 8,
            in_domain_test_per_source: 40,
            test_size: 200,
            ..SplitConfig::default()
        },
        backbone: BackboneConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq: 48,
            pretrain: PretrainConfig {
                epochs: 6,
                ..PretrainConfig::default()
            },
        },
        soft: SoftSettings {
            prompt_len: 3,
            train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..SoftSettings::default()
        },
        hard: HardSettings {
            pool: PoolConfig {
                per_domain: 6,
                templates: 3,
                planted_random: 2,
                ..PoolConfig::default()
            },
            k: 5,
            mappo: MappoConfig {
                epochs: 4,
                ..MappoConfig::default()
            },
            ..HardSettings::default()
        },
        layers: None,
        pilot: PilotSettings {
            enabled: true,
            inputs: 20,
            top_k: 4,
        },
    }
}
