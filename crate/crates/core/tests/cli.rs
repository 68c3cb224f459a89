mod common;

use concentra::harness::{ExperimentConfig, Method};
use std::path::Path;
use std::process::{Command, Output};

fn concentra(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concentra"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = concentra(args, dir);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) {
    let cfg = ExperimentConfig {
        seeds: vec![0],
        methods: vec![Method::SoftBoth, Method::HardBoth],
        ..common::tiny_experiment()
    };
    std::fs::write(dir.join("cfg.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
}

#[test]
fn stages_chain_through_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d);
    let c = ["--config", "cfg.json", "--seed", "0"];
    let with = |extra: &[&'static str]| -> Vec<&str> { [&c[..], extra].concat() };

    ok(&[&["gen"][..], &with(&["--out", "g"])].concat(), d);
    assert!(d.join("g/vocab.json").exists());

    ok(&[&["pretrain"][..], &with(&["--out", "p"])].concat(), d);
    let curve = std::fs::read_to_string(d.join("p/pretrain_loss.csv")).unwrap();
    assert!(curve.starts_with("epoch,loss\n"));

    let b = ["--backbone", "p/backbone.ckpt"];
    ok(&[&["train-soft"][..], &with(&["--out", "s"]), &b].concat(), d);
    assert!(d.join("s/soft_prompt.ckpt").exists() && d.join("s/soft_curve.csv").exists());

    ok(&[&["filter"][..], &with(&["--out", "f"]), &b].concat(), d);
    let scores = std::fs::read_to_string(d.join("f/gcs_scores.csv")).unwrap();
    // header plus 2 source pools of 6 + 2 candidates
    assert_eq!(scores.lines().count(), 1 + 2 * 8);

    ok(
        &[
            &["train-match"][..],
            &with(&["--out", "m", "--prompt-sets", "f/prompt_sets.jsonl"]),
            &b,
        ]
        .concat(),
        d,
    );
    let trace = std::fs::read_to_string(d.join("m/selection_trace.csv")).unwrap();
    assert!(trace.starts_with("input_id,agent,action,reward\n"));

    for (name, extra) in [
        ("e1", vec!["--soft-prompt", "s/soft_prompt.ckpt"]),
        ("e2", vec!["--hard-prompt", "review sentiment"]),
        (
            "e3",
            vec!["--matcher", "m/matcher.ckpt", "--prompt-sets", "f/prompt_sets.jsonl"],
        ),
    ] {
        let stdout = ok(&[&["eval"][..], &with(&["--out", name]), &b, &extra].concat(), d);
        let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
        let acc = v["target_acc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    ok(
        &[
            &["pilot"][..],
            &with(&["--out", "pl", "--hard-prompt", "review sentiment"]),
            &b,
        ]
        .concat(),
        d,
    );
    assert!(d.join("pl/pilot.json").exists() && d.join("pl/pilot.csv").exists());
}

#[test]
fn run_is_reproducible_and_reports_reemit() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d);
    let table = ok(&["run", "--config", "cfg.json", "--out", "a"], d);
    assert!(table.contains("soft-both") && table.contains("hard-both"));
    ok(&["run", "--config", "cfg.json", "--out", "b"], d);
    let a = std::fs::read(d.join("a/report.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/report.json")).unwrap());

    ok(&["report", "--input", "a/report.json", "--out", "c"], d);
    assert_eq!(a, std::fs::read(d.join("c/report.json")).unwrap());
    assert_eq!(
        std::fs::read(d.join("a/report.csv")).unwrap(),
        std::fs::read(d.join("c/report.csv")).unwrap()
    );
}

#[test]
fn bad_input_exits_with_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.json"), r#"{"seeds": []}"#).unwrap();
    let out = concentra(&["run", "--config", "bad.json"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = concentra(&["eval", "--config", "bad.json"], d);
    assert!(!out.status.success());
    assert!(!concentra(&["no-such-command"], d).status.success());
}
