mod common;

use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use common::fixture_path;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_skillchain"));
    c.env_remove("SKILLCHAIN_LIBRARY").env_remove("SKILLCHAIN_PORT").env_remove("SKILLCHAIN_LLM_ENDPOINT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_corpus(dir: &Path, lists: &[&[&str]]) -> std::path::PathBuf {
    let path = dir.join("corpus.jsonl");
    let text: String = lists.iter().map(|l| format!("{{\"tokens\": {}}}\n", serde_json::to_string(l).unwrap())).collect();
    std::fs::write(&path, text).unwrap();
    path
}

const DRYWALL: &[&str] = &["start", "prepare", "plan", "cut", "connect", "finish"];

#[test]
fn validate_exit_codes() {
    let ok = run(&["validate", p(&fixture_path("drywall.json"))]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: Value = serde_json::from_str(&stdout(&ok)).unwrap();
    assert_eq!(report["ok"], true);

    let dir = tempfile::tempdir().unwrap();
    let mut lib: Value = serde_json::from_str(common::DRYWALL_LIBRARY).unwrap();
    // a second skill claiming `trim` breaks exclusivity
    lib["skills"][2]["synonyms"] = serde_json::json!(["trim"]);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, lib.to_string()).unwrap();
    assert_eq!(run(&["validate", p(&bad)]).status.code(), Some(1));

    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(&["validate", p(&bad)]).status.code(), Some(1));
    assert_eq!(run(&["validate", p(&dir.path().join("missing.json"))]).status.code(), Some(2));
}

#[test]
fn hmm_fit_is_reproducible_by_seed() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &[DRYWALL, &["start", "prepare", "cut", "plan"], &["start", "plan", "finish"]]);
    let fit = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let o = run(&["fit", p(&corpus), "--model", "hmm", "--seed", seed, "--states", "3", "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let a = fit("7", "a.json");
    let b = fit("7", "b.json");
    assert_eq!(a, b);
    assert_ne!(a, fit("8", "c.json"));
}

#[test]
fn fit_evaluate_heatmap_chain() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &[DRYWALL, DRYWALL]);
    let model = dir.path().join("m.json");
    let o = run(&["fit", p(&corpus), "--model", "transition", "-o", p(&model)]);
    assert_eq!(o.status.code(), Some(0));

    let ev = run(&["evaluate", p(&model), p(&corpus)]);
    assert_eq!(ev.status.code(), Some(0));
    let report: Value = serde_json::from_str(&stdout(&ev)).unwrap();
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["n_predictions"], 10);

    let hm = run(&["heatmap", p(&model)]);
    assert_eq!(hm.status.code(), Some(0));
    let text = stdout(&hm);
    assert_eq!(text.lines().next().unwrap(), "from\\to,connect,cut,finish,plan,prepare,start");
    assert_eq!(text.lines().count(), 7);

    let ch = run(&["chain", p(&model), "--start", "start", "--library", p(&fixture_path("drywall.json"))]);
    assert_eq!(ch.status.code(), Some(0), "{}", String::from_utf8_lossy(&ch.stderr));
    let chain: Vec<String> = serde_json::from_str(&stdout(&ch)).unwrap();
    assert_eq!(chain, DRYWALL);

    // library from the environment
    let ch = bin()
        .args(["chain", p(&model), "--start", "start", "--max-len", "2"])
        .env("SKILLCHAIN_LIBRARY", fixture_path("drywall.json"))
        .output()
        .unwrap();
    assert_eq!(ch.status.code(), Some(1));

    for kind in ["chowliu", "chow_liu", "hmm"] {
        let m = dir.path().join(format!("{kind}.json"));
        assert_eq!(run(&["fit", p(&corpus), "--model", kind, "-o", p(&m)]).status.code(), Some(0));
        assert_eq!(run(&["evaluate", p(&m), p(&corpus)]).status.code(), Some(0));
        assert_eq!(run(&["heatmap", p(&m)]).status.code(), Some(1));
    }
}

#[test]
fn ingest_with_rule_backend() {
    let o = run(&[
        "ingest",
        p(&fixture_path("drywall_tutorial.txt")),
        "--library",
        p(&fixture_path("drywall.json")),
        "--task-label",
        "drywall",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lib = common::drywall();
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    for t in lines[0]["tokens"].as_array().unwrap() {
        assert!(lib.contains(&t.as_str().unwrap().into()), "{t}");
    }
    assert_eq!(lines[0]["task_label"], "drywall");

    // the LLM backend needs an endpoint
    let o = run(&["ingest", p(&fixture_path("drywall_tutorial.txt")), "--library", p(&fixture_path("drywall.json")), "--backend", "llm"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_prints_the_event_log() {
    let o = run(&[
        "simulate",
        p(&fixture_path("drywall_task.json")),
        "--library",
        p(&fixture_path("drywall.json")),
        "--sequence",
        &DRYWALL.join(","),
        "--object",
        "panel",
        "--target",
        "wall",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let events: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.last().unwrap()["kind"], "plan_completed");
    for (i, e) in events.iter().enumerate() {
        assert_eq!(e["seq_no"], i);
    }
    let broken = run(&[
        "simulate",
        p(&fixture_path("drywall_task.json")),
        "--library",
        p(&fixture_path("drywall.json")),
        "--sequence",
        "start,cut,finish",
        "--object",
        "panel",
    ]);
    assert_eq!(broken.status.code(), Some(1));
}

#[test]
fn serve_reads_port_from_environment() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = bin()
        .args(["serve", "--task", p(&fixture_path("drywall_task.json"))])
        .env("SKILLCHAIN_LIBRARY", fixture_path("drywall.json"))
        .env("SKILLCHAIN_PORT", port.to_string())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    let body = loop {
        match std::net::TcpStream::connect(("127.0.0.1", port)) {
            Ok(mut s) => {
                use std::io::{Read, Write};
                write!(s, "GET /session HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
                let mut out = String::new();
                s.read_to_string(&mut out).unwrap();
                break out;
            }
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => panic!("server did not start: {e}"),
        }
    };
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    assert!(body.contains("\"stud_centers\""));
}
