//! Brute-force oracles and fixture helpers shared by integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use kgcot::kg::{KgEdge, KgNode, KnowledgeGraph, Orientation};
use rand::Rng;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/mini")
}

pub fn node(id: &str) -> KgNode {
    KgNode {
        node_id: id.into(),
        node_type: "t".into(),
        node_name: id.into(),
        source: "test".into(),
    }
}

pub fn edge(src: &str, dst: &str, rel: &str) -> KgEdge {
    KgEdge {
        src: src.into(),
        dst: dst.into(),
        relation: rel.into(),
        display_relation: rel.into(),
    }
}

/// Random directed multigraph: up to `max_nodes` nodes, up to `max_edges`
/// edges, no self-loops, repeated endpoint pairs allowed with a small
/// relation alphabet so parallel edges occur.
pub fn random_multigraph(rng: &mut impl Rng, max_nodes: usize, max_edges: usize) -> (Vec<String>, Vec<KgEdge>) {
    let n = rng.random_range(2..=max_nodes);
    let ids: Vec<String> = (0..n).map(|i| format!("N{i:02}")).collect();
    let m = rng.random_range(0..=max_edges);
    let mut edges = Vec::new();
    for _ in 0..m {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let rel = ["r1", "r2", "r3"][rng.random_range(0..3)];
        edges.push(edge(&ids[a], &ids[b], rel));
    }
    (ids, edges)
}

pub fn build(ids: &[String], edges: &[KgEdge]) -> KnowledgeGraph {
    KnowledgeGraph::new(ids.iter().map(|i| node(i)).collect(), edges.to_vec())
        .expect("valid graph")
        .0
}

/// Exhaustive simple-path enumeration by iterative deepening: the first depth
/// at which any simple path reaches `dst` is the minimum length, and every
/// simple path of that length is returned. Empty past `max_hops`.
pub fn brute_shortest(edges: &[KgEdge], src: &str, dst: &str, directed: bool, max_hops: usize) -> BTreeSet<Vec<String>> {
    let mut adj: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for e in edges {
        adj.entry(&e.src).or_default().insert(&e.dst);
        if !directed {
            adj.entry(&e.dst).or_default().insert(&e.src);
        }
    }
    fn dfs(
        adj: &HashMap<&str, BTreeSet<&str>>,
        dst: &str,
        depth: usize,
        trail: &mut Vec<String>,
        found: &mut BTreeSet<Vec<String>>,
    ) {
        let u = trail.last().unwrap().clone();
        if u == dst {
            found.insert(trail.clone());
            return;
        }
        if trail.len() > depth {
            return;
        }
        if let Some(next) = adj.get(u.as_str()) {
            for v in next {
                if !trail.iter().any(|t| t == v) {
                    trail.push(v.to_string());
                    dfs(adj, dst, depth, trail, found);
                    trail.pop();
                }
            }
        }
    }
    for depth in 1..=max_hops {
        let mut found = BTreeSet::new();
        dfs(&adj, dst, depth, &mut vec![src.to_string()], &mut found);
        if !found.is_empty() {
            return found;
        }
    }
    BTreeSet::new()
}

/// Expected orientation and folded relation set of hop `u -> v`.
pub fn expected_step(edges: &[KgEdge], u: &str, v: &str, directed: bool) -> (Orientation, BTreeSet<String>) {
    let between = |a: &str, b: &str| -> BTreeSet<String> {
        edges
            .iter()
            .filter(|e| e.src == a && e.dst == b)
            .map(|e| e.relation.clone())
            .collect()
    };
    let fwd = between(u, v);
    if !fwd.is_empty() || directed {
        (Orientation::Forward, fwd)
    } else {
        (Orientation::Reverse, between(v, u))
    }
}

/// Probability that a random positive outscores a random negative, ties half.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Step-summed precision over every distinct threshold, highest first.
pub fn aupr_sweep(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    if pos == 0.0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let predicted: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = predicted.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let recall = tp / pos;
        let precision = tp / predicted.len() as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(area)
}

/// Scores drawn from a small grid so ties are common.
pub fn random_instance(rng: &mut impl Rng, max_n: usize) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=max_n);
    let grid = rng.random_range(3..=12);
    let scores = (0..n).map(|_| rng.random_range(0..grid) as f64 / grid as f64).collect();
    let labels = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
    (scores, labels)
}

/// Fixture config with its output directory moved to `out`.
pub fn fixture_config(out: &Path) -> kgcot::config::PipelineConfig {
    let mut config = kgcot::config::PipelineConfig::load(&fixture_dir().join("config.json")).unwrap();
    config.paths.out = out.to_path_buf();
    config
}

/// Every file under `dir`, relative path to bytes.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

pub struct TestServer {
    pub base: String,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    handle: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl TestServer {
    /// Serve `store` on an ephemeral port from a background runtime.
    pub fn start(
        store: std::sync::Arc<kgcot::study::StudyStore>,
        config: kgcot::study::server::ServerConfig,
    ) -> TestServer {
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let handle = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                kgcot::study::server::serve(listener, store, &config, async {
                    let _ = rx.await;
                })
                .await
            })
        });
        let addr = addr_rx.recv().unwrap();
        TestServer {
            base: format!("http://{addr}"),
            shutdown: Some(tx),
            handle: Some(handle),
        }
    }

    /// Graceful shutdown; returns once the log is synced.
    pub fn stop(mut self) {
        self.shutdown.take().unwrap().send(()).unwrap();
        self.handle.take().unwrap().join().unwrap().unwrap();
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

/// (status, body) for GET `url`, optionally with a bearer token.
pub fn get(agent: &ureq::Agent, url: &str, token: Option<&str>) -> (u16, String) {
    let mut req = agent.get(url);
    if let Some(t) = token {
        req = req.header("Authorization", &format!("Bearer {t}"));
    }
    let mut resp = req.call().unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

pub fn post_json(agent: &ureq::Agent, url: &str, body: &serde_json::Value) -> (u16, String) {
    let mut resp = agent
        .post(url)
        .header("Content-Type", "application/json")
        .send(body.to_string().as_bytes())
        .unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_string().unwrap())
}

/// Comparison-unit outputs for two systems whose texts never name the system.
pub fn system_outputs(n: usize) -> (Vec<kgcot::study::SystemOutput>, Vec<kgcot::study::SystemOutput>) {
    let make = |i: usize, verdict: &str, trace: &str| kgcot::study::SystemOutput {
        unit_id: Some(format!("u{i:04}")),
        case_id: None,
        disease_id: None,
        input_summary: Some(format!("Visit {i}: hypertension, hyperlipidemia")),
        ground_truth: Some((i % 2) as u8),
        prediction: serde_json::Value::String(verdict.into()),
        trace: trace.into(),
    };
    (
        (0..n).map(|i| make(i, "Yes", "Risk factors connect through the paths.\nConclusion: Yes")).collect(),
        (0..n).map(|i| make(i, "No", "Little evidence.\nConclusion: No")).collect(),
    )
}
