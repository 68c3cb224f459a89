use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::pipeline::{run_seed, MethodOutcome};
use crate::canonical::canonical_json;
use crate::concentration::PilotReport;
use crate::error::{Error, Result};

pub const METRICS: [&str; 3] = ["in_domain_acc", "target_acc", "gap"];

/// One method on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub in_domain_acc: f64,
    pub target_acc: f64,
    /// In-domain minus target accuracy.
    pub gap: f64,
    pub in_domain_layer_profile: Vec<f64>,
    pub target_layer_profile: Vec<f64>,
}

impl MethodMetrics {
    pub fn from_outcome(o: &MethodOutcome) -> Self {
        Self {
            in_domain_acc: o.in_domain.accuracy,
            target_acc: o.target.accuracy,
            gap: o.in_domain.accuracy - o.target.accuracy,
            in_domain_layer_profile: o.in_domain.layer_profile.clone(),
            target_layer_profile: o.target.layer_profile.clone(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "in_domain_acc" => Some(self.in_domain_acc),
            "target_acc" => Some(self.target_acc),
            "gap" => Some(self.gap),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Keyed by method name; empty when the seed failed.
    pub methods: BTreeMap<String, MethodMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedReport>,
    /// `summary[method][metric]` over the seeds that succeeded.
    pub summary: BTreeMap<String, BTreeMap<String, Aggregate>>,
    /// Per-layer concentration profile of each method's prompt on the first
    /// seed.
    pub pilot: Option<PilotReport>,
}

impl MetricsReport {
    pub fn new(config: ExperimentConfig, seeds: Vec<SeedReport>, pilot: Option<PilotReport>) -> Self {
        let summary = summarize(&config.methods, &seeds);
        Self {
            config,
            seeds,
            summary,
            pilot,
        }
    }

    /// Per-seed values of one metric for one method, skipping failed seeds.
    pub fn values(&self, method: Method, metric: &str) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|s| s.methods.get(method.name()))
            .filter_map(|m| m.metric(metric))
            .collect()
    }

    pub fn mean(&self, method: Method, metric: &str) -> Option<f64> {
        self.summary.get(method.name())?.get(metric).map(|a| a.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `seed,method,metric,value`, one row per seed × method × metric; a
    /// failed seed leaves `value` empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,method,metric,value\n");
        for s in &self.seeds {
            for m in &self.config.methods {
                for metric in METRICS {
                    let value = s
                        .methods
                        .get(m.name())
                        .and_then(|mm| mm.metric(metric))
                        .map(|v| format!("{v:.16e}"))
                        .unwrap_or_default();
                    writeln!(out, "{},{},{metric},{value}", s.seed, m.name()).expect("string write");
                }
            }
        }
        out
    }

    /// Plain-text table of means and standard deviations.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<14} {:>18} {:>18} {:>18}\n", "method", "in-domain", "target", "gap");
        for m in &self.config.methods {
            let cell = |metric: &str| {
                self.summary
                    .get(m.name())
                    .and_then(|s| s.get(metric))
                    .map(|a| format!("{:.2} ± {:.2}", 100.0 * a.mean, 100.0 * a.std))
                    .unwrap_or_else(|| "n/a".into())
            };
            writeln!(
                out,
                "{:<14} {:>18} {:>18} {:>18}",
                m.name(),
                cell("in_domain_acc"),
                cell("target_acc"),
                cell("gap")
            )
            .expect("string write");
        }
        for s in self.seeds.iter().filter(|s| s.error.is_some()) {
            writeln!(out, "seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or("")).expect("string write");
        }
        out
    }
}

pub fn summarize(methods: &[Method], seeds: &[SeedReport]) -> BTreeMap<String, BTreeMap<String, Aggregate>> {
    let mut summary = BTreeMap::new();
    for m in methods {
        let mut per_metric = BTreeMap::new();
        for metric in METRICS {
            let values: Vec<f64> = seeds
                .iter()
                .filter_map(|s| s.methods.get(m.name()))
                .filter_map(|mm| mm.metric(metric))
                .collect();
            if let Some(a) = Aggregate::from_values(&values) {
                per_metric.insert(metric.to_string(), a);
            }
        }
        summary.insert(m.name().to_string(), per_metric);
    }
    summary
}

/// Worker count: `CONCENTRA_THREADS` if set, else the available parallelism,
/// never more than the number of jobs.
pub fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("CONCENTRA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

/// Runs every seed of the experiment, in parallel when workers allow. A seed
/// that errors is recorded and the rest proceed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.validate()?;
    let n = config.seeds.len();
    type SeedResult = Result<(BTreeMap<Method, MethodOutcome>, Option<PilotReport>)>;
    let results: Mutex<Vec<Option<SeedResult>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..worker_count(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = run_seed(config, config.seeds[i], i == 0);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("results lock");

    let mut seeds = Vec::with_capacity(n);
    let mut pilot = None;
    for (i, r) in results.into_iter().enumerate() {
        let seed = config.seeds[i];
        match r.expect("every seed runs") {
            Ok((outcomes, p)) => {
                if i == 0 {
                    pilot = p;
                }
                seeds.push(SeedReport {
                    seed,
                    methods: outcomes
                        .iter()
                        .map(|(m, o)| (m.name().to_string(), MethodMetrics::from_outcome(o)))
                        .collect(),
                    error: None,
                });
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                seeds.push(SeedReport {
                    seed,
                    methods: BTreeMap::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(MetricsReport::new(config.clone(), seeds, pilot))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes `report.json` / `report.csv` into `dir`, plus `pilot.json` and
/// `pilot.csv` when the report carries pilot data. Returns the paths written.
pub fn emit_report(report: &MetricsReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    if formats.is_empty() {
        return Err(Error::InvalidArgument("no report format requested".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        let (path, text) = match f {
            ReportFormat::Json => (dir.join("report.json"), report.to_json()?),
            ReportFormat::Csv => (dir.join("report.csv"), report.to_csv()),
        };
        std::fs::write(&path, text)?;
        written.push(path);
    }
    if let Some(p) = &report.pilot {
        let (json, csv) = (dir.join("pilot.json"), dir.join("pilot.csv"));
        p.write(&json, &csv)?;
        written.extend([json, csv]);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(i: f64, t: f64) -> MethodMetrics {
        MethodMetrics {
            in_domain_acc: i,
            target_acc: t,
            gap: i - t,
            in_domain_layer_profile: vec![0.1, 0.2],
            target_layer_profile: vec![0.3, 0.4],
        }
    }

    fn report() -> MetricsReport {
        let config = ExperimentConfig {
            seeds: vec![0, 1, 2],
            methods: vec![Method::SoftVanilla, Method::SoftBoth],
            ..ExperimentConfig::default()
        };
        let seeds = vec![
            SeedReport {
                seed: 0,
                methods: [
                    ("soft-vanilla".into(), metrics(0.9, 0.7)),
                    ("soft-both".into(), metrics(0.91, 0.75)),
                ]
                .into(),
                error: None,
            },
            SeedReport {
                seed: 1,
                methods: BTreeMap::new(),
                error: Some("diverged".into()),
            },
            SeedReport {
                seed: 2,
                methods: [
                    ("soft-vanilla".into(), metrics(0.8, 0.6)),
                    ("soft-both".into(), metrics(0.85, 0.1 / 3.0)),
                ]
                .into(),
                error: None,
            },
        ];
        MetricsReport::new(config, seeds, None)
    }

    #[test]
    fn aggregate_matches_hand_values() {
        let a = Aggregate::from_values(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.mean, 2.5);
        assert!((a.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Aggregate::from_values(&[0.3]).unwrap().std, 0.0);
        assert!(Aggregate::from_values(&[]).is_none());
    }

    #[test]
    fn summary_is_recomputable_from_seed_rows() {
        let r = report();
        for m in [Method::SoftVanilla, Method::SoftBoth] {
            for metric in METRICS {
                let v = r.values(m, metric);
                assert_eq!(v.len(), 2);
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                assert!((r.mean(m, metric).unwrap() - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_round_trips_and_csv_has_every_cell() {
        let r = report();
        let text = r.to_json().unwrap();
        let back = MetricsReport::from_json(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), text);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count() - 1, 3 * 2 * METRICS.len());
        assert!(csv.contains("1,soft-both,gap,\n"));
    }

    #[test]
    fn thread_cap_is_bounded_by_jobs() {
        assert_eq!(worker_count(1), 1);
        assert!(worker_count(64) >= 1);
    }
}
