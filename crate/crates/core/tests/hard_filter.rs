mod common;

use concentra::concentration::{concentration, LayerSet};
use concentra::corpus::{build_prompt_candidates, plant_random_prompts, PoolConfig, PromptCandidate};
use concentra::hard::{
    filter_prompt_set, gcs, margin, metric_acc, metric_cf, rank_candidates, reward, score_prompt, GcsWeights,
};
use concentra::model::{forward_prompted, label_distribution, Prompt};
use proptest::prelude::*;

fn pools(f: &common::Fixture, seed: u64) -> Vec<Vec<PromptCandidate>> {
    let cfg = PoolConfig {
        per_domain: 10,
        templates: 5,
        planted_random: 3,
        ..PoolConfig::default()
    };
    let mut p = build_prompt_candidates(&f.split.train, &f.vocab, &cfg, seed).unwrap();
    plant_random_prompts(&mut p, &f.vocab, &cfg, seed);
    p
}

#[test]
fn keeping_everything_only_sorts() {
    let f = common::fixture(1, 2);
    let layers = LayerSet::deep(2);
    let pool = &pools(&f, 1)[0];
    let data = &f.split.train[0].examples;
    let set = filter_prompt_set(
        &f.params,
        pool,
        data,
        &GcsWeights::default(),
        &f.verbalizer,
        &layers,
        pool.len(),
    )
    .unwrap();
    assert_eq!(set.len(), pool.len());
    let mut ids: Vec<u64> = set.candidates.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    let mut expected: Vec<u64> = pool.iter().map(|c| c.id).collect();
    expected.sort_unstable();
    assert_eq!(ids, expected);

    let scores: Vec<f64> = set
        .candidates
        .iter()
        .map(|c| {
            gcs(
                &f.params,
                &Prompt::Tokens(c.tokens.clone()),
                data,
                &GcsWeights::default(),
                &f.verbalizer,
                &layers,
            )
            .unwrap()
        })
        .collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    assert!(filter_prompt_set(
        &f.params,
        pool,
        data,
        &GcsWeights::default(),
        &f.verbalizer,
        &layers,
        pool.len() + 1
    )
    .is_err());
}

#[test]
fn filtering_is_deterministic_and_ties_keep_the_lower_id() {
    let f = common::fixture(1, 2);
    let layers = LayerSet::deep(2);
    let data = &f.split.train[1].examples;
    let mut pool = pools(&f, 2)[1].clone();
    let twin = PromptCandidate {
        id: 1000,
        ..pool[0].clone()
    };
    let mut low = pool[0].clone();
    low.id = 999;
    pool.push(twin);
    pool.push(low);
    let ranked = rank_candidates(&f.params, &pool, data, &GcsWeights::default(), &f.verbalizer, &layers).unwrap();
    let pos = |id: u64| ranked.iter().position(|s| s.candidate.id == id).unwrap();
    assert_eq!(ranked[pos(999)].gcs.to_bits(), ranked[pos(1000)].gcs.to_bits());
    assert_eq!(pos(999) + 1, pos(1000));
    assert!(pos(pool[0].id) < pos(999));

    let a = filter_prompt_set(
        &f.params,
        &pool,
        data,
        &GcsWeights::default(),
        &f.verbalizer,
        &layers,
        6,
    )
    .unwrap();
    let b = filter_prompt_set(
        &f.params,
        &pool,
        data,
        &GcsWeights::default(),
        &f.verbalizer,
        &layers,
        6,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn accuracy_only_weights_rank_by_margin_sum() {
    let f = common::fixture(3, 2);
    let layers = LayerSet::deep(2);
    let data = &f.split.train[0].examples;
    let pool = &pools(&f, 3)[0];
    let w = GcsWeights {
        acc: 1.0,
        cs: 0.0,
        cf: 0.0,
    };
    let ranked = rank_candidates(&f.params, pool, data, &w, &f.verbalizer, &layers).unwrap();
    let accs: Vec<f64> = ranked
        .iter()
        .map(|s| {
            metric_acc(
                &f.params,
                &Prompt::Tokens(s.candidate.tokens.clone()),
                data,
                &f.verbalizer,
            )
            .unwrap()
        })
        .collect();
    assert!(accs.windows(2).all(|w| w[0] >= w[1]), "{accs:?}");
    for (s, a) in ranked.iter().zip(&accs) {
        assert!((s.score.m_acc - a).abs() < 1e-12);
        assert!(a.abs() <= data.len() as f64);
    }
}

#[test]
fn sub_metrics_agree_with_their_oracles() {
    let f = common::fixture(5, 2);
    let layers = LayerSet::deep(2);
    let data = &f.split.train[0].examples[..10];
    let prompt = Prompt::Tokens(f.vocab.encode("review the text sentiment"));
    let w = GcsWeights::default();
    let s = score_prompt(&f.params, &prompt, data, &f.verbalizer, &layers).unwrap();
    assert!((s.m_cf - metric_cf(&f.params, &prompt, data, &layers).unwrap()).abs() < 1e-12);
    assert!(s.m_cf >= 0.0);

    let mut m_acc = 0.0;
    let mut strength = 0.0;
    for ex in data {
        let (seq, out) = forward_prompted(&f.params, &prompt, &ex.tokens).unwrap();
        let m = margin(&label_distribution(&out.mask_logits, &f.verbalizer).unwrap(), ex.label);
        let c = concentration(&out.trace, seq.prompt_span(), seq.mask_pos(), &layers)
            .unwrap()
            .value();
        m_acc += m;
        strength += c;
        let r = reward(&f.params, &prompt, ex, &w, &f.verbalizer, &layers).unwrap();
        assert!((r - (w.acc * m + w.cs * c)).abs() < 1e-12);
        let no_cs = GcsWeights { cs: 0.0, ..w };
        let r0 = reward(&f.params, &prompt, ex, &no_cs, &f.verbalizer, &layers).unwrap();
        assert!((r0 - w.acc * m).abs() < 1e-12);
    }
    strength /= data.len() as f64;
    assert!((s.m_acc - m_acc).abs() < 1e-12);
    assert!((s.strength - strength).abs() < 1e-12);
    let direct = gcs(&f.params, &prompt, data, &w, &f.verbalizer, &layers).unwrap();
    assert!((direct - (w.acc * m_acc + w.cs * strength - w.cf * s.m_cf)).abs() < 1e-9);
}

#[test]
fn dominated_planted_prompt_is_excluded() {
    let f = common::fixture(6, 8);
    let layers = LayerSet::deep(2);
    let train = &f.split.train[0].examples;
    let cfg = PoolConfig {
        per_domain: 6,
        templates: 3,
        planted_random: 0,
        ..PoolConfig::default()
    };
    let real = build_prompt_candidates(&f.split.train, &f.vocab, &cfg, 6)
        .unwrap()
        .remove(0);
    let w = GcsWeights::default();
    let scores: Vec<_> = real
        .iter()
        .map(|c| {
            score_prompt(
                &f.params,
                &Prompt::Tokens(c.tokens.clone()),
                train,
                &f.verbalizer,
                &layers,
            )
            .unwrap()
        })
        .collect();

    // keep only the real candidates that beat a planted random prompt on every sub-metric
    let mut found = None;
    for seed in 0..400 {
        let mut pools = vec![real.clone()];
        plant_random_prompts(
            &mut pools,
            &f.vocab,
            &PoolConfig {
                planted_random: 1,
                ..cfg.clone()
            },
            seed,
        );
        let cand = pools[0].last().unwrap().clone();
        let s = score_prompt(
            &f.params,
            &Prompt::Tokens(cand.tokens.clone()),
            train,
            &f.verbalizer,
            &layers,
        )
        .unwrap();
        let better: Vec<_> = real
            .iter()
            .zip(&scores)
            .filter(|(_, r)| s.m_acc < r.m_acc && s.strength < r.strength && s.m_cf > r.m_cf)
            .map(|(c, _)| c.clone())
            .collect();
        if better.len() >= 2 {
            found = Some((cand, better));
            break;
        }
    }
    let (planted, mut pool) = found.expect("no dominated random prompt found");
    let keep = pool.len();
    pool.push(planted.clone());
    for weights in [
        w,
        GcsWeights {
            acc: 0.1,
            cs: 5.0,
            cf: 0.2,
        },
        GcsWeights {
            acc: 1.0,
            cs: 0.1,
            cf: 50.0,
        },
    ] {
        let set = filter_prompt_set(&f.params, &pool, train, &weights, &f.verbalizer, &layers, keep).unwrap();
        assert!(set.candidates.iter().all(|c| c.id != planted.id));
    }
}

proptest! {
    #[test]
    fn gcs_is_monotone_in_each_sub_metric(
        acc in 0.01f64..20.0, cs in 0.01f64..20.0, cf in 0.01f64..20.0,
        m in -5.0f64..5.0, s in 0.0f64..1.0, k in 0.0f64..3.0, d in 0.001f64..1.0,
    ) {
        let w = GcsWeights { acc, cs, cf };
        let base = w.combine(m, s, k);
        prop_assert!(w.combine(m + d, s, k) > base);
        prop_assert!(w.combine(m, s + d, k) > base);
        prop_assert!(w.combine(m, s, k + d) < base);
    }
}
