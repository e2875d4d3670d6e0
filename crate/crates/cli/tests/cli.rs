use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(rel: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "fixtures", rel]
        .iter()
        .collect();
    p.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blindspot"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(o));
    serde_json::from_str(&stdout(o)).unwrap()
}

fn reference_audit(extra: &[&str]) -> Output {
    let (policy, corpus, rho, loss) = (
        fixture("reference/policy.jsonl"),
        fixture("reference/corpus.jsonl"),
        fixture("reference/rho.jsonl"),
        fixture("reference/loss.jsonl"),
    );
    let mut args = vec![
        "audit", "--policy", &policy, "--corpus", &corpus, "--rho", &rho, "--loss", &loss, "--mode", "chosen",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn exact_audit_on_reference_fixture() {
    let v = json(&reference_audit(&["--format", "structured"]));
    assert_eq!(v["provenance"]["schema"], "blindspot-report/1");
    assert_eq!(v["provenance"]["q_mode"], "chosen_only");
    assert_eq!(v["provenance"]["loss_class"], "nonnegative");
    assert_eq!(v["provenance"]["tolerance"], 1e-12);
    let r = &v["result"];
    assert_eq!(r["kind"], "exact_audit");
    // rows (0.9, 0.1)/(0.2, 0.8) against (0.5, 0.5)/(0.6, 0.4) under a uniform rho
    assert!((r["gap"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert!((r["tv"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert!((r["bound"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert!((r["r_gen"].as_f64().unwrap() - 0.15).abs() < 1e-12);
    assert!((r["r_disc"].as_f64().unwrap() - 0.55).abs() < 1e-12);
    assert_eq!(r["bound_satisfied"], true);
}

#[test]
fn text_audit_names_provenance() {
    let o = reference_audit(&[]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for key in ["q_mode", "loss_class", "seed", "tolerance"] {
        assert!(text.lines().any(|l| l.starts_with(key)), "missing {key}:\n{text}");
    }
    assert!(text.contains("\nbound                   0.8\n"));
}

#[test]
fn structured_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [&["--exact"][..], &["--samples", "5000", "--seed", "9"][..]] {
        let outs: Vec<Vec<u8>> = (0..2)
            .map(|i| {
                let path = dir.path().join(format!("r{i}.json"));
                let path = path.to_str().unwrap();
                let mut args = vec!["--format", "structured", "--out", path];
                args.extend_from_slice(extra);
                let o = reference_audit(&args);
                assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
                std::fs::read(path).unwrap()
            })
            .collect();
        assert!(!outs[0].is_empty());
        assert_eq!(outs[0], outs[1]);
    }
}

#[test]
fn sampled_audit_records_n_and_seed() {
    let v = json(&reference_audit(&[
        "--samples",
        "20000",
        "--seed",
        "4",
        "--format",
        "structured",
    ]));
    assert_eq!(v["provenance"]["seed"], 4);
    let r = &v["result"];
    assert_eq!(r["kind"], "sampled_audit");
    assert_eq!(r["r_gen"]["n"], 20000);
    assert_eq!(r["seed_p"], 4);
    assert!((r["r_gen"]["value"].as_f64().unwrap() - 0.15).abs() < 0.02);
}

#[test]
fn missing_corpus_exits_with_io_code() {
    let o = run(&[
        "audit",
        "--policy",
        &fixture("reference/policy.jsonl"),
        "--corpus",
        "/definitely/not/here.jsonl",
        "--loss",
        &fixture("reference/loss.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.jsonl"));
}

#[test]
fn malformed_corpus_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"prompt\":\"x1\",\"candidate_a\":\"y1\",\"candidate_b\":\"y2\"}\n",
    )
    .unwrap();
    let o = run(&[
        "audit",
        "--policy",
        &fixture("reference/policy.jsonl"),
        "--corpus",
        bad.to_str().unwrap(),
        "--loss",
        &fixture("reference/loss.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("line 1: missing required field `chosen`"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn flag_errors_exit_one() {
    assert_eq!(run(&["audit"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(reference_audit(&["--confidence", "1.5"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn default_demo_shows_blind_spot() {
    let v = json(&run(&["demo", "--format", "structured", "--exact"]));
    let exact = &v["result"]["exact"];
    let l_max = exact["l_max"].as_f64().unwrap();
    let gap = exact["r_gen"].as_f64().unwrap() - exact["r_disc"].as_f64().unwrap();
    assert!(gap >= 0.25 * l_max);
    assert!(exact["r_disc"].as_f64().unwrap() <= 0.1 * l_max);
    assert_eq!(exact["bound_satisfied"], true);
    assert_eq!(v["result"]["narrative"]["headline_met"], true);
    assert!(v["result"]["signed_witness"]["cells"].as_array().unwrap().len() == 32);
    assert!(v["result"]["sampled"].is_null());
}

#[test]
fn demo_fixture_matches_golden_report() {
    let o = run(&[
        "demo",
        "--config",
        &fixture("demo/default.json"),
        "--format",
        "structured",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let golden = std::fs::read(fixture("demo/golden_report.json")).unwrap();
    assert!(o.stdout == golden, "demo report drifted from the golden file");
}

#[test]
fn zero_suppression_demo_has_no_gap() {
    let v = json(&run(&[
        "demo",
        "--config",
        &fixture("demo/zero_suppression.json"),
        "--format",
        "structured",
    ]));
    assert_eq!(v["result"]["exact"]["gap"], 0.0);
    assert_eq!(v["result"]["narrative"]["headline_met"], false);
}

#[test]
fn demo_seed_only_moves_the_sampled_section() {
    let a = json(&run(&[
        "demo",
        "--seed",
        "1",
        "--samples",
        "2000",
        "--format",
        "structured",
    ]));
    let b = json(&run(&[
        "demo",
        "--seed",
        "2",
        "--samples",
        "2000",
        "--format",
        "structured",
    ]));
    assert_eq!(a["result"]["exact"], b["result"]["exact"]);
    assert_ne!(a["result"]["sampled"], b["result"]["sampled"]);
}

#[test]
fn bad_demo_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("demo.json");
    std::fs::write(&cfg, "{\"scenario\": {\"prompt_count\": 0}}").unwrap();
    assert_eq!(run(&["demo", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn ten_pair_classification_matches_hand_count() {
    let v = json(&run(&[
        "classify",
        "--corpus",
        &fixture("classify/ten_pairs.jsonl"),
        "--judges",
        "length,helpfulness",
        "--format",
        "structured",
    ]));
    let r = &v["result"];
    // worked by hand from word counts and mode ranks of each pair
    let expected = [
        "consensus",
        "consensus",
        "consensus",
        "consensus",
        "consensus",
        "conflict",
        "indifference",
        "conflict",
        "conflict",
        "consensus",
    ];
    let got: Vec<&str> = r["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["category"].as_str().unwrap())
        .collect();
    assert_eq!(got, expected);
    let s = &r["summary"];
    assert_eq!(
        (
            s["consensus"].as_u64(),
            s["conflict"].as_u64(),
            s["indifference"].as_u64()
        ),
        (Some(6), Some(3), Some(1))
    );
    assert_eq!(
        (
            s["arbitrariness"]["hits"].as_u64(),
            s["arbitrariness"]["total"].as_u64()
        ),
        (Some(1), Some(6))
    );
    let sup = &r["supremacy"]["entries"];
    assert_eq!(
        (sup[0][1]["hits"].as_u64(), sup[0][1]["total"].as_u64()),
        (Some(2), Some(3))
    );
    assert_eq!(
        (sup[1][0]["hits"].as_u64(), sup[1][0]["total"].as_u64()),
        (Some(1), Some(3))
    );
}

#[test]
fn empty_corpus_classifies_to_zero_counts() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let v = json(&run(&[
        "classify",
        "--corpus",
        empty.to_str().unwrap(),
        "--format",
        "structured",
    ]));
    let s = &v["result"]["summary"];
    assert_eq!(s["total"], 0);
    assert!(s["arbitrariness"].is_null());
    assert!(s["discretionary_share"].is_null());
}

#[test]
fn unknown_judge_lists_available() {
    let o = run(&[
        "classify",
        "--corpus",
        &fixture("classify/ten_pairs.jsonl"),
        "--judges",
        "length,kindness",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(
        err.contains("kindness") && err.contains("helpfulness") && err.contains("harm-avoidance"),
        "{err}"
    );
}

#[test]
fn rule_file_adds_judges() {
    let dir = tempfile::tempdir().unwrap();
    let rules = dir.path().join("rules.json");
    std::fs::write(
        &rules,
        r#"[{"name": "brevity", "kind": "length", "prefer": "shorter"}]"#,
    )
    .unwrap();
    let v = json(&run(&[
        "classify",
        "--corpus",
        &fixture("classify/ten_pairs.jsonl"),
        "--judge-rules",
        rules.to_str().unwrap(),
        "--judges",
        "length,brevity",
        "--format",
        "structured",
    ]));
    // opposite length rules never agree: every pair is conflict or indifference
    assert_eq!(v["result"]["summary"]["consensus"], 0);
}

#[test]
fn sample_command_is_seeded() {
    let args = [
        "sample",
        "--policy",
        &fixture("reference/policy.jsonl"),
        "--samples",
        "100",
        "--seed",
        "5",
    ];
    let a = run(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, run(&args).stdout);
    let text = stdout(&a);
    assert_eq!(text.lines().count(), 101);
    assert!(text.starts_with("{\"seed\":5,\"regime\":\"on_policy\",\"n\":100}\n"));
}
