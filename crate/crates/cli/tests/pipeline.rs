mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use monkeys_core::llm::MockBackend;
use monkeys_core::selection::SelectionMethod;

fn count_files(dir: &std::path::Path, prefix: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with(prefix))
        .count()
}

#[test]
fn generate_writes_ten_machine_pairs_and_reruns_are_free() {
    let dir = fixture();
    let backend = mock(dir.path());
    let r = runner(dir.path(), backend.clone());
    assert!(r.context().success());
    assert!(r.generate().success());
    let first = backend.calls();
    assert!(first > 0);

    let store = store_root(dir.path());
    for iid in ["bounds", "calc", "stats", "temps", "text", "wordcount"] {
        let traj = store.join("instances").join(iid).join("trajectories");
        assert_eq!(count_files(&traj, "testing-"), 10, "{iid}");
        assert_eq!(count_files(&traj, "editing-"), 10, "{iid}");
        let cands = read_json(&store.join("instances").join(iid).join("candidates.json"));
        assert_eq!(cands.as_array().unwrap().len(), 10, "{iid}");
    }

    let again = mock(dir.path());
    let r = runner(dir.path(), again.clone());
    let ctx = r.context();
    let gen = r.generate();
    assert_eq!(ctx.skipped.len(), 6);
    assert_eq!(gen.skipped.len(), 6);
    assert_eq!(again.calls(), 0);
}

#[test]
fn generate_requires_context() {
    let dir = fixture();
    let r = runner(dir.path(), mock(dir.path()));
    let report = r.generate();
    assert_eq!(report.failed.len(), 6);
    assert!(report.failed[0].1.contains("context"), "{:?}", report.failed);
}

#[test]
fn every_method_selects_for_every_instance() {
    let dir = fixture();
    let r = runner(dir.path(), mock(dir.path()));
    assert!(r.context().success());
    assert!(r.generate().success());
    for method in SelectionMethod::NATIVE {
        let report = r.select(method);
        assert!(report.success(), "{}", report.render());
        for iid in &r.instances {
            let path = r.store.selection_path(&iid.instance_id, method);
            let rec = read_json(&path);
            assert_eq!(rec["method"], method.name());
        }
        let preds = std::fs::read_to_string(r.store.report_path(&format!("predictions-{}.jsonl", method.name()))).unwrap();
        assert_eq!(preds.lines().count(), 6);
    }

    // majority falls for the rounded conversion, the selection machine does not
    let temps = |m: SelectionMethod| read_json(&r.store.selection_path("temps", m))["candidate_id"].clone();
    assert_eq!(temps(SelectionMethod::Majority), "temps/editing/00");
    assert_eq!(temps(SelectionMethod::MachineTop3), "temps/editing/01");
}

#[test]
fn ensemble_pools_external_predictions() {
    let dir = fixture();
    let r = runner(dir.path(), mock(dir.path()));
    assert!(r.context().success() && r.generate().success());
    assert!(r.select(SelectionMethod::MachineTop3).success());
    let files: Vec<_> = ["sys_a.jsonl", "sys_b.jsonl", "sys_c.json", "sys_d.jsonl"]
        .iter()
        .map(|f| dir.path().join("predictions").join(f))
        .collect();
    let report = r.ensemble_select(&files, SelectionMethod::MachineTop3);
    assert!(report.success(), "{}", report.render());

    let pool = read_json(&r.store.artifact("calc", "ensemble-candidates.json"));
    // external candidates in file order; the native pick joins them at selection
    let ids: Vec<&str> = pool.as_array().unwrap().iter().map(|c| c["candidate_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["ext-sys_a-0", "ext-sys_b-0", "ext-sys_d-0"]);

    let dropped = read_json(&r.store.report_path("ensemble-dropped.json"));
    assert_eq!(dropped.as_array().unwrap().len(), 1);
    assert_eq!(dropped[0]["instance_id"], "bounds");

    let wc = read_json(&r.store.selection_path("wordcount", SelectionMethod::Ensemble));
    assert_eq!(wc["candidate_id"], "ext-sys_b-0");
    assert_eq!(wc["selected_index"], 2);

    let (analysis, summary) = r.analyze();
    assert!(analysis.success());
    let summary = summary.unwrap();
    let wc = summary.metrics.iter().find(|m| m.instance_id == "wordcount").unwrap();
    assert_eq!(wc.resolved["ensemble"], Some(true));
    assert_eq!(wc.resolved["machine_top3"], Some(false));
}

#[test]
fn costs_match_an_independent_recount() {
    let dir = fixture();
    let r = runner_limited(dir.path(), 2, mock(dir.path()));
    assert!(r.context().success() && r.generate().success());
    assert!(r.select(SelectionMethod::MachineTop3).success());
    let table = r.costs().unwrap();

    // sum every usage object in the store and price it by hand
    fn walk(v: &serde_json::Value, acc: &mut [u64; 4]) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, x) in map {
                    if k == "usage" {
                        for (i, f) in ["input_tokens", "output_tokens", "cache_read_tokens", "cache_write_tokens"]
                            .iter()
                            .enumerate()
                        {
                            acc[i] += x[*f].as_u64().unwrap_or(0);
                        }
                    } else {
                        walk(x, acc);
                    }
                }
            }
            serde_json::Value::Array(xs) => xs.iter().for_each(|x| walk(x, acc)),
            _ => {}
        }
    }
    let mut tokens = [0u64; 4];
    for (path, bytes) in tree(&store_root(dir.path()).join("instances")) {
        if path.contains("trajectories") || path.ends_with("context.json") {
            walk(&serde_json::from_slice(&bytes).unwrap(), &mut tokens);
        }
    }
    let prices = [3.0, 15.0, 0.3, 3.75];
    let usd: f64 = tokens.iter().zip(prices).map(|(&t, p)| t as f64 * p / 1e6).sum();
    assert!(usd > 0.0);
    assert!((table.total.total.usd() - usd).abs() < 1e-9, "{} vs {usd}", table.total.total.usd());

    let ledger = read_json(&store_root(dir.path()).join("ledger.json"));
    assert!((ledger["total_nanodollars"].as_i64().unwrap() as f64 / 1e9 - usd).abs() < 1e-9);
    let pct: f64 = table.rows.iter().map(|row| row.percent).sum();
    assert!((pct - 100.0).abs() < 1e-9);
}

#[test]
fn backend_requests_stay_within_the_worker_limit() {
    let dir = fixture_with(|t| t.replace("backend_requests = 4", "backend_requests = 2"));
    let backend = Arc::new(MockBackend::load_dir(&dir.path().join("playbooks")).unwrap().with_latency(Duration::from_millis(15)));
    let r = runner_limited(dir.path(), 2, backend.clone());
    assert!(r.context().success());
    assert!(r.generate().success());
    assert!(backend.calls() > 40);
    assert!(backend.max_in_flight() <= 2, "{}", backend.max_in_flight());
    assert_eq!(backend.max_in_flight(), 2, "the limit should actually be reached");
}

#[test]
fn force_redoes_only_the_requested_stage() {
    let dir = fixture();
    let r = runner_limited(dir.path(), 2, mock(dir.path()));
    assert!(r.context().success() && r.generate().success());
    let before = tree(&store_root(dir.path()));

    let backend = mock(dir.path());
    let mut forced = runner_limited(dir.path(), 2, backend.clone());
    forced.force = true;
    let report = forced.generate();
    assert_eq!(report.completed.len(), 2);
    assert!(backend.calls() > 0);
    // context untouched, generation reproduced exactly
    assert!(tree_diff(&before, &tree(&store_root(dir.path()))).is_empty());
}

#[test]
fn cli_reports_and_exit_codes() {
    let dir = fixture();
    let out = monkeys_ok(dir.path(), &["--limit", "2", "run", "--method", "majority"]);
    assert!(out.contains("context: 2 completed"), "{out}");
    assert!(out.contains("select majority: 2 completed"), "{out}");
    let out = monkeys_ok(dir.path(), &["--limit", "2", "costs"]);
    assert!(out.contains("Gen. edits"), "{out}");

    let bad = std::process::Command::new(env!("CARGO_BIN_EXE_monkeys"))
        .current_dir(dir.path())
        .args(["-c", "missing.toml", "context"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let failing = monkeys(dir.path(), &["--limit", "3", "select", "--method", "majority"]);
    assert_eq!(failing.status.code(), Some(1), "the third instance has no candidates yet");
}
