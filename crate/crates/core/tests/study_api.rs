mod common;

use std::sync::Arc;

use serde_json::{json, Value};

use kgcot::study::server::ServerConfig;
use kgcot::study::{self, Side, StudyConfig, StudyStore};

fn store(n: usize, seed: u64, dir: &std::path::Path) -> Arc<StudyStore> {
    let (s1, s2) = common::system_outputs(n);
    let config = StudyConfig {
        sample_size: None,
        ..StudyConfig::default()
    };
    let st = study::build_study(s1, s2, seed, &config).unwrap();
    Arc::new(StudyStore::open(st, &dir.join("preferences.jsonl")).unwrap())
}

fn submit(agent: &ureq::Agent, base: &str, c: &str, who: &str, dim: &str, choice: &str) -> (u16, String) {
    common::post_json(
        agent,
        &format!("{base}/api/study/preference"),
        &json!({"comparison_id": c, "annotator_id": who, "dimension": dim, "choice": choice}),
    )
}

#[test]
fn scripted_session_matches_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let store = store(4, 21, dir.path());
    let sides: Vec<Side> = store.study().comparisons.iter().map(|c| c.system1_side).collect();
    let server = common::TestServer::start(
        store.clone(),
        ServerConfig {
            static_dir: None,
            admin_token: Some("t".into()),
        },
    );
    let agent = common::agent();
    let base = server.base.clone();

    // Clarity: annotator x picks A everywhere, then corrects c0001 to B.
    for i in 1..=4 {
        assert_eq!(submit(&agent, &base, &format!("c{i:04}"), "x", "clarity_coherence", "A").0, 200);
    }
    assert_eq!(submit(&agent, &base, "c0001", "x", "clarity_coherence", "B").0, 200);
    // Coverage: annotator y judges two comparisons with B.
    for c in ["c0002", "c0003"] {
        assert_eq!(submit(&agent, &base, c, "y", "coverage_relevance", "B").0, 200);
    }

    let picks_system1 = |i: usize, choice: Side| sides[i] == choice;
    let clarity_hand: usize = [Side::B, Side::A, Side::A, Side::A]
        .iter()
        .enumerate()
        .filter(|(i, &c)| picks_system1(*i, c))
        .count();
    let coverage_hand: usize = [1, 2].iter().filter(|&&i| picks_system1(i, Side::B)).count();

    let (status, body) = common::get(&agent, &format!("{base}/api/study/report"), Some("t"));
    assert_eq!(status, 200);
    let report: Value = serde_json::from_str(&body).unwrap();
    let dims = &report["pooled"]["dimensions"];
    assert_eq!(dims["clarity_coherence"]["annotated"], 4);
    assert_eq!(dims["clarity_coherence"]["wins"]["system1"], clarity_hand);
    assert_eq!(dims["clarity_coherence"]["wins"]["system2"], 4 - clarity_hand);
    assert_eq!(dims["coverage_relevance"]["annotated"], 2);
    assert_eq!(dims["coverage_relevance"]["wins"]["system1"], coverage_hand);
    assert_eq!(dims["correctness_soundness"]["annotated"], 0);
    assert_eq!(dims["correctness_soundness"]["rate"]["system1"], Value::Null);
    assert_eq!(report["per_annotator"]["y"]["judgments"], 2);
    assert_eq!(report["pooled"]["judgments"], 6);

    let (status, export) = common::get(&agent, &format!("{base}/api/study/export"), None);
    assert_eq!(status, 200);
    assert_eq!(export.lines().count(), 7, "log keeps the corrected submission too");
    server.stop();
}

#[test]
fn next_walks_the_queue_then_reports_done() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::TestServer::start(store(2, 1, dir.path()), ServerConfig::default());
    let agent = common::agent();
    let next = || -> Value {
        let (status, body) = common::get(&agent, &format!("{}/api/study/next?annotator=z", server.base), None);
        assert_eq!(status, 200);
        serde_json::from_str(&body).unwrap()
    };
    let first = next();
    assert_eq!(first["comparison_id"], "c0001");
    assert_eq!(first["progress"], json!({"completed": 0, "total": 2}));
    assert_eq!(first["ties_enabled"], false);
    assert_eq!(first["dimensions"].as_array().unwrap().len(), 3);
    // Partially judged comparisons stay at the head of the queue.
    submit(&agent, &server.base, "c0001", "z", "clarity_coherence", "A");
    assert_eq!(next()["comparison_id"], "c0001");
    for c in ["c0001", "c0002"] {
        for d in ["clarity_coherence", "coverage_relevance", "correctness_soundness"] {
            assert_eq!(submit(&agent, &server.base, c, "z", d, "B").0, 200);
        }
    }
    let done = next();
    assert_eq!(done["done"], true);
    assert_eq!(done["progress"], json!({"completed": 2, "total": 2}));
    server.stop();
}

#[test]
fn bad_requests_are_rejected_with_client_errors() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::TestServer::start(store(2, 1, dir.path()), ServerConfig::default());
    let agent = common::agent();
    let base = &server.base;
    assert_eq!(common::get(&agent, &format!("{base}/api/study/next"), None).0, 400);
    assert_eq!(submit(&agent, base, "c0001", "a", "speed", "A").0, 400);
    assert_eq!(submit(&agent, base, "c0001", "a", "clarity_coherence", "tie").0, 400);
    assert_eq!(submit(&agent, base, "c0001", "", "clarity_coherence", "A").0, 400);
    assert_eq!(submit(&agent, base, "c9999", "a", "clarity_coherence", "A").0, 404);
    let (status, _) = common::post_json(&agent, &format!("{base}/api/study/preference"), &json!({"comparison_id": 1}));
    assert_eq!(status, 400);
    let (status, body) = common::get(&agent, &format!("{base}/api/study/report"), None);
    assert_eq!(status, 403, "report needs a configured admin token: {body}");
    assert_eq!(common::get(&agent, &format!("{base}/api/health"), None), (200, r#"{"status":"ok"}"#.into()));
    assert_eq!(common::get(&agent, &format!("{base}/api/study/export"), None).1, "");
    server.stop();
}

#[test]
fn concurrent_annotators_serialize_through_one_log() {
    let dir = tempfile::tempdir().unwrap();
    let store = store(10, 8, dir.path());
    let server = common::TestServer::start(store.clone(), ServerConfig::default());
    let base = server.base.clone();
    let threads: Vec<_> = (0..6)
        .map(|t| {
            let base = base.clone();
            std::thread::spawn(move || {
                let agent = common::agent();
                for i in 1..=10 {
                    let choice = if (i + t) % 2 == 0 { "A" } else { "B" };
                    let (status, _) =
                        submit(&agent, &base, &format!("c{i:04}"), &format!("ann{t}"), "correctness_soundness", choice);
                    assert_eq!(status, 200);
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    server.stop();
    let log = dir.path().join("preferences.jsonl");
    let records = study::replay(&log).unwrap();
    assert_eq!(records.len(), 60);
    let report = store.report();
    let stats = &report.pooled.dimensions["correctness_soundness"];
    assert_eq!(stats.annotated, 60);
    assert_eq!(stats.wins.values().sum::<usize>(), 60);
}

#[test]
fn static_bundle_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<!doctype html><title>review</title>").unwrap();
    let server = common::TestServer::start(
        store(1, 1, dir.path()),
        ServerConfig {
            static_dir: Some(ui),
            admin_token: None,
        },
    );
    let agent = common::agent();
    let (status, body) = common::get(&agent, &format!("{}/", server.base), None);
    assert_eq!(status, 200);
    assert!(body.contains("<title>review</title>"));
    assert_eq!(common::get(&agent, &format!("{}/api/health", server.base), None).0, 200);
    server.stop();
}
