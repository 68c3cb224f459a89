mod common;

use concentra::harness::{
    emit_report, run_experiment, run_seed, Aggregate, ExperimentConfig, Method, MetricsReport, ReportFormat, METRICS,
};
use concentra::soft::LossWeights;
use std::sync::OnceLock;

fn tiny_report() -> &'static MetricsReport {
    static REPORT: OnceLock<MetricsReport> = OnceLock::new();
    REPORT.get_or_init(|| run_experiment(&common::tiny_experiment()).unwrap())
}

#[test]
fn every_seed_and_method_is_reported() {
    let r = tiny_report();
    assert_eq!(r.seeds.len(), 2);
    for s in &r.seeds {
        assert!(s.error.is_none(), "{:?}", s.error);
        assert_eq!(s.methods.len(), Method::ALL.len());
        for m in s.methods.values() {
            assert!((0.0..=1.0).contains(&m.in_domain_acc) && (0.0..=1.0).contains(&m.target_acc));
            assert!((m.gap - (m.in_domain_acc - m.target_acc)).abs() < 1e-15);
            assert_eq!(m.in_domain_layer_profile.len(), 2);
            assert_eq!(m.target_layer_profile.len(), 2);
        }
    }
    let pilot = r.pilot.as_ref().expect("pilot on the first seed");
    assert!(!pilot.prompts.is_empty());
}

#[test]
fn summary_is_recomputable_from_seed_values() {
    let r = tiny_report();
    for m in Method::ALL {
        for metric in METRICS {
            let values = r.values(m, metric);
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let agg: &Aggregate = &r.summary[m.name()][metric];
            assert_eq!(agg.n, values.len());
            assert!((agg.mean - mean).abs() < 1e-12);
            assert!((agg.std - var.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn emitted_report_files_are_consistent() {
    let r = tiny_report();
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_report(r, dir.path(), &[ReportFormat::Json, ReportFormat::Csv]).unwrap();
    for name in ["report.json", "report.csv", "pilot.json", "pilot.csv"] {
        assert!(paths.contains(&dir.path().join(name)), "{name}");
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * Method::ALL.len() * METRICS.len());
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back = MetricsReport::from_json(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
    assert_eq!(&back, r);
}

#[test]
fn runs_are_deterministic() {
    let cfg = ExperimentConfig {
        seeds: vec![3],
        methods: vec![Method::SoftCs, Method::HardBoth],
        ..common::tiny_experiment()
    };
    let a = run_experiment(&cfg).unwrap().to_json().unwrap();
    let b = run_experiment(&cfg).unwrap().to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn both_terms_off_reduces_to_vanilla_tuning() {
    let mut cfg = common::tiny_experiment();
    cfg.methods = vec![Method::SoftVanilla, Method::SoftBoth];
    cfg.soft.weights = LossWeights {
        cs: 0.0,
        cf: 0.0,
        ..LossWeights::default()
    };
    let (out, _) = run_seed(&cfg, 0, false).unwrap();
    assert_eq!(out[&Method::SoftVanilla], out[&Method::SoftBoth]);
}

#[test]
fn failing_seeds_are_recorded() {
    let mut cfg = common::tiny_experiment();
    cfg.backbone.max_seq = 8;
    cfg.methods = vec![Method::SoftVanilla];
    let r = run_experiment(&cfg).unwrap();
    assert!(r.seeds.iter().all(|s| s.error.is_some() && s.methods.is_empty()));
    assert!(r.mean(Method::SoftVanilla, "target_acc").is_none());
    assert!(r.to_csv().lines().skip(1).all(|l| l.ends_with(',')));
    assert!(r.summary_table().contains("failed"));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = common::tiny_experiment();
    cfg.seeds.clear();
    assert!(run_experiment(&cfg).is_err());
    assert!(ExperimentConfig::from_json(r#"{"methods": ["soft-both", "soft-both"]}"#).is_err());
    assert!(ExperimentConfig::from_json(r#"{"methods": ["no-such"]}"#).is_err());
    let cfg = ExperimentConfig::from_json(r#"{"seeds": [7], "methods": ["hard-both"]}"#).unwrap();
    assert_eq!((cfg.seeds, cfg.methods), (vec![7], vec![Method::HardBoth]));
}

#[test]
fn method_results_do_not_depend_on_the_method_list() {
    let full = tiny_report();
    let cfg = ExperimentConfig {
        methods: vec![Method::HardBoth, Method::SoftCf],
        ..common::tiny_experiment()
    };
    let subset = run_experiment(&cfg).unwrap();
    for (a, b) in full.seeds.iter().zip(&subset.seeds) {
        for m in [Method::HardBoth, Method::SoftCf] {
            assert_eq!(a.methods[m.name()], b.methods[m.name()], "{m}");
        }
    }
}
