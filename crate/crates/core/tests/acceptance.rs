//! Release acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgcot::align::{self, AlignConfig, ConceptEntry, MappingStage};
use kgcot::cohort::{make_splits, IndexCase, SplitConfig};
use kgcot::cot::{self, CorpusSample, CotReport, LABEL_MARKER};
use kgcot::eval;
use kgcot::kg::{KgNode, KnowledgeGraph, PathQuery};
use kgcot::llm::{cosine, Gateway, MockBackend, Scenario, ScenarioRule};
use kgcot::prompts::PromptSet;
use kgcot::study::{self, server::ServerConfig, Dimension, Side, StudyConfig, StudyStore, Submission};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn path_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut queries = 0;
    let mut with_paths = 0;
    for g in 0..200 {
        let (ids, edges) = common::random_multigraph(&mut rng, 12, 30);
        let kg = common::build(&ids, &edges);
        for _ in 0..5 {
            let s = rng.random_range(0..ids.len());
            let mut t = rng.random_range(0..ids.len() - 1);
            if t >= s {
                t += 1;
            }
            for directed in [false, true] {
                let query = PathQuery::new(ids.len(), usize::MAX).directed(directed);
                let got = kg.all_shortest_paths(&ids[s], &ids[t], &query).map_err(|e| e.to_string())?;
                let oracle = common::brute_shortest(&edges, &ids[s], &ids[t], directed, ids.len());
                let got_set: BTreeSet<Vec<String>> = got.iter().map(|p| p.nodes.clone()).collect();
                ensure(got_set == oracle && got_set.len() == got.len(), || {
                    format!("graph {g} {}->{} directed={directed}: {got_set:?} vs {oracle:?}", ids[s], ids[t])
                })?;
                for p in &got {
                    for (hop, step) in p.nodes.windows(2).zip(&p.steps) {
                        let (orient, rels) = common::expected_step(&edges, &hop[0], &hop[1], directed);
                        let folded: BTreeSet<String> = step.relations().map(String::from).collect();
                        ensure(step.orientation == orient && folded == rels, || {
                            format!("graph {g} hop {}->{}: {:?} {folded:?}", hop[0], hop[1], step.orientation)
                        })?;
                    }
                }
                queries += 1;
                with_paths += usize::from(!got.is_empty());
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("{queries} queries ({with_paths} reachable), exact set equality, {:.2}s", elapsed.as_secs_f64()))
}

fn hop_bound_respected() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut checked = 0;
    for g in 0..300 {
        let (ids, edges) = common::random_multigraph(&mut rng, 12, 30);
        let kg = common::build(&ids, &edges);
        let bound = rng.random_range(1..=5);
        let s = rng.random_range(0..ids.len());
        let t = (s + 1 + rng.random_range(0..ids.len() - 1)) % ids.len();
        let paths = kg
            .all_shortest_paths(&ids[s], &ids[t], &PathQuery::new(bound, usize::MAX))
            .map_err(|e| e.to_string())?;
        ensure(paths.iter().all(|p| p.len() <= bound), || format!("graph {g}: path longer than {bound}"))?;
        let oracle = common::brute_shortest(&edges, &ids[s], &ids[t], false, bound);
        ensure(paths.len() == oracle.len(), || format!("graph {g}: {} vs {} paths", paths.len(), oracle.len()))?;
        checked += 1;
    }
    let ids: Vec<String> = (0..7).map(|i| format!("C{i}")).collect();
    let chain: Vec<_> = ids.windows(2).map(|w| common::edge(&w[0], &w[1], "next")).collect();
    let kg = common::build(&ids, &chain);
    let at5 = kg.all_shortest_paths("C0", "C6", &PathQuery::new(5, 64)).map_err(|e| e.to_string())?;
    let at6 = kg.all_shortest_paths("C0", "C6", &PathQuery::new(6, 64)).map_err(|e| e.to_string())?;
    ensure(at5.is_empty(), || format!("chain of 6 with bound 5 returned {} paths", at5.len()))?;
    ensure(at6.len() == 1, || "chain of 6 with bound 6 should return its path".into())?;
    Ok(format!("{checked} fuzzed queries within bound; chain of 6 empty at L=5"))
}

fn metric_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let mut worst: f64 = 0.0;
    let mut undefined = 0;
    for i in 0..100 {
        let (scores, labels) = common::random_instance(&mut rng, 50);
        let roc = eval::auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let pr = eval::aupr(&scores, &labels).map_err(|e| e.to_string())?;
        let (roc_o, pr_o) = (common::auroc_pairs(&scores, &labels), common::aupr_sweep(&scores, &labels));
        ensure(roc.is_some() == roc_o.is_some() && pr.is_some() == pr_o.is_some(), || {
            format!("instance {i}: definedness differs")
        })?;
        undefined += usize::from(roc.is_none());
        if let (Some(a), Some(b)) = (roc, roc_o) {
            worst = worst.max((a - b).abs());
            for transformed in [
                scores.iter().map(|s| s * s * s).collect::<Vec<_>>(),
                scores.iter().map(|s| 2.0 * s + 1.0).collect(),
            ] {
                let t = eval::auroc(&transformed, &labels).unwrap().unwrap();
                ensure((t - a).abs() <= 1e-9, || format!("instance {i}: AUROC not rank-invariant ({a} vs {t})"))?;
            }
        }
        if let (Some(a), Some(b)) = (pr, pr_o) {
            worst = worst.max((a - b).abs());
        }
        ensure(worst <= 1e-9, || format!("instance {i}: deviation {worst:e}"))?;
    }
    Ok(format!("100 instances, max deviation {worst:.1e}, {undefined} single-class"))
}

fn metric_spot_values() -> Outcome {
    let roc = eval::auroc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap().unwrap();
    let pr = eval::aupr(&[0.9, 0.8, 0.7], &[0, 1, 1]).unwrap().unwrap();
    ensure((roc - 0.75).abs() <= 1e-9, || format!("AUROC {roc}"))?;
    ensure((pr - 0.58333).abs() <= 1e-5, || format!("AUPR {pr}"))?;
    Ok(format!("AUROC {roc:.9}, AUPR {pr:.5}"))
}

const WORDS: [&str; 8] = ["renal", "cardiac", "failure", "acute", "chronic", "syndrome", "disorder", "lesion"];

fn phrase(rng: &mut ChaCha8Rng) -> String {
    (0..rng.random_range(1..=2))
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// One random vocabulary/KG/reply combination checked against an independent
/// expectation. Returns the number of violations.
fn alignment_trial(rng: &mut ChaCha8Rng, trial: usize, stages: &mut BTreeMap<String, usize>) -> Result<usize, String> {
    let dim = 3;
    let n_nodes = rng.random_range(3..=10);
    let nodes: Vec<KgNode> = (0..n_nodes)
        .map(|i| KgNode {
            node_id: format!("N{i:02}"),
            node_type: "disease".into(),
            node_name: phrase(rng),
            source: "fuzz".into(),
        })
        .collect();
    let kg = KnowledgeGraph::new(nodes.clone(), Vec::new()).map_err(|e| e.to_string())?.0;
    let mut embeddings = BTreeMap::new();
    for n in &nodes {
        embeddings.insert(n.node_name.clone(), unit_vector(rng, dim));
    }
    let n_entries = rng.random_range(1..=6);
    let mut entries = Vec::new();
    let mut rules = Vec::new();
    let mut replies = HashMap::new();
    for i in 0..n_entries {
        let code = format!("E{i}");
        let description = match rng.random_range(0..3) {
            // exact label, possibly re-cased and re-spaced
            0 => nodes[rng.random_range(0..n_nodes)].node_name.to_uppercase().replace(' ', "  "),
            _ => format!("{} {}", phrase(rng), i),
        };
        if !embeddings.contains_key(&description.to_lowercase()) {
            let near = &nodes[rng.random_range(0..n_nodes)].node_name;
            let base = embeddings[near].clone();
            let jitter = rng.random_range(0.0..0.8);
            let v: Vec<f64> = base.iter().map(|x| x + rng.random_range(-jitter..jitter)).collect();
            embeddings.insert(description.to_lowercase(), v);
        }
        let reply = match rng.random_range(0..6) {
            0 => Some(r#"{"verdict":"confirm"}"#.to_string()),
            1 => Some(format!(r#"{{"verdict":"revise","node_id":"N{:02}"}}"#, rng.random_range(0..n_nodes))),
            2 => Some(r#"{"verdict":"revise","node_id":"OUTSIDE"}"#.to_string()),
            3 => Some(r#"{"verdict":"reject","reason":"no"}"#.to_string()),
            4 => Some("maybe".to_string()),
            _ => None,
        };
        rules.push(ScenarioRule {
            tag: Some("entity_select".into()),
            contains: Some(format!("ICD-9 code: {code}\n")),
            fail: reply.is_none().then(|| "outage".to_string()),
            reply: reply.clone(),
            token_scores: None,
        });
        replies.insert(code.clone(), reply);
        entries.push(ConceptEntry { code, description });
    }
    let scenario = Scenario {
        embedding_dim: dim,
        seed: trial as u64,
        rules,
        default_reply: None,
        embeddings,
    };
    let vectors: HashMap<String, Vec<f64>> = scenario
        .embeddings
        .iter()
        .map(|(k, v)| (kgcot::text::normalize_label(k), v.clone()))
        .collect();
    let gateway = Gateway::new(Box::new(MockBackend::new(scenario).map_err(|e| e.to_string())?));
    let config = AlignConfig {
        tau: [0.5, 0.85, 0.95][rng.random_range(0..3)],
        candidates: rng.random_range(1..=4),
        ..AlignConfig::default()
    };
    let prompts = PromptSet::load(None).map_err(|e| e.to_string())?;
    let result = align::run_alignment(&entries, &[], &kg, &gateway, &prompts, &config).map_err(|e| e.to_string())?;

    let mut violations = 0;
    for (entry, record) in entries.iter().zip(&result.records) {
        *stages.entry(format!("{:?}", record.stage)).or_default() += 1;
        let norm = kgcot::text::normalize_label(&entry.description);
        let exact: Option<&str> = nodes
            .iter()
            .filter(|n| kgcot::text::normalize_label(&n.node_name) == norm)
            .map(|n| n.node_id.as_str())
            .min();
        // Independent ranking over all nodes.
        let q = &vectors[&norm];
        let mut ranked: Vec<(f64, &str)> = nodes
            .iter()
            .filter_map(|n| cosine(q, &vectors[&kgcot::text::normalize_label(&n.node_name)]).map(|c| (c, n.node_id.as_str())))
            .collect();
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        ranked.truncate(config.candidates);
        let in_candidates = |id: &str| ranked.iter().any(|(_, n)| *n == id);
        let expected: (MappingStage, Option<&str>) = match exact {
            Some(id) => (MappingStage::Exact, Some(id)),
            None if ranked.first().is_none_or(|(s, _)| s.partial_cmp(&config.tau) != Some(std::cmp::Ordering::Greater)) => (MappingStage::Rejected, None),
            None => {
                let top = ranked[0].1;
                let reply = replies[&entry.code].as_deref();
                match reply {
                    Some(r) if r.contains("confirm") => (MappingStage::LlmValidated, Some(top)),
                    Some(r) if r.contains("revise") => {
                        let target = r.split('"').nth(7).unwrap();
                        if target == top {
                            (MappingStage::LlmValidated, Some(top))
                        } else if in_candidates(target) {
                            (MappingStage::LlmRevised, Some(target))
                        } else {
                            (MappingStage::Rejected, None)
                        }
                    }
                    _ => (MappingStage::Rejected, None),
                }
            }
        };
        let accepted_in_candidates = match (&record.node_id, record.stage) {
            (Some(id), MappingStage::LlmValidated | MappingStage::LlmRevised | MappingStage::Similarity) => {
                in_candidates(id)
            }
            (Some(_), MappingStage::Exact) => true,
            (None, MappingStage::Rejected) => true,
            _ => false,
        };
        if (record.stage, record.node_id.as_deref()) != expected || !accepted_in_candidates {
            violations += 1;
            eprintln!(
                "  trial {trial} {}: got {:?} {:?}, expected {:?}",
                entry.code, record.stage, record.node_id, expected
            );
        }
    }
    Ok(violations)
}

fn alignment_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let mut violations = 0;
    let mut stages = BTreeMap::new();
    for trial in 0..500 {
        violations += alignment_trial(&mut rng, trial, &mut stages)?;
    }
    ensure(violations == 0, || format!("{violations} violations"))?;
    ensure(stages.len() == 4, || format!("stage coverage too thin: {stages:?}"))?;
    Ok(format!("500 combinations, 0 violations, stages {stages:?}"))
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn filter_soundness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pipeline = kgcot::pipeline::Pipeline::new(common::fixture_config(dir.path())).map_err(|e| e.to_string())?;
    pipeline.run_all().map_err(|e| e.to_string())?;
    let corpus: Vec<CorpusSample> = read_lines(&dir.path().join("corpus.jsonl"));
    let report: CotReport =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).map_err(|e| e.to_string())?;
    for s in &corpus {
        let last = s.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        ensure(cot::parse_conclusion(last).as_label() == Some(s.label), || {
            format!("{}: conclusion does not match label", s.sample_id)
        })?;
        ensure(s.conclusion.as_label() == Some(s.label), || format!("{}: stored conclusion", s.sample_id))?;
        ensure(cot::is_label_free(s), || format!("{}: user message contains {LABEL_MARKER:?}", s.sample_id))?;
    }
    let t = &report.totals;
    let identity = |c: &cot::Counts| c.generated == c.kept + c.dropped_mismatch + c.dropped_unparseable + c.failed;
    ensure(identity(t) && report.per_disease.values().all(identity), || "accounting identity broken".into())?;
    ensure(t.kept == corpus.len(), || format!("kept {} but corpus has {}", t.kept, corpus.len()))?;
    ensure(t.dropped_mismatch > 0 && t.dropped_unparseable > 0, || "scenario is not adversarial".into())?;
    let golden: serde_json::Value =
        serde_json::from_slice(&std::fs::read(common::fixture_dir().join("golden/filter_counts.json")).unwrap()).unwrap();
    ensure(serde_json::to_value(t).unwrap() == golden, || format!("counts {t:?} differ from golden"))?;
    Ok(format!(
        "{} kept of {} ({} mismatched, {} unparseable), all label-consistent and label-free",
        t.kept, t.generated, t.dropped_mismatch, t.dropped_unparseable
    ))
}

fn split_arithmetic() -> Outcome {
    let cases: Vec<IndexCase> = (0..12_353)
        .map(|i| IndexCase {
            case_id: format!("P{i:05}-v0"),
            patient_id: format!("P{i:05}"),
            index_seq: 0,
            codes_t: BTreeSet::new(),
            labels: BTreeMap::new(),
        })
        .collect();
    let config = SplitConfig {
        test_frac: 0.10,
        train_sizes: vec![400, 1000],
    };
    let a = make_splits(&cases, 42, &config).map_err(|e| e.to_string())?;
    let b = make_splits(&cases, 42, &config).map_err(|e| e.to_string())?;
    ensure(a.test.len() == 1235, || format!("|test| = {}", a.test.len()))?;
    let t400: BTreeSet<&String> = a.train[&400].iter().collect();
    let t1000: BTreeSet<&String> = a.train[&1000].iter().collect();
    let test: BTreeSet<&String> = a.test.iter().collect();
    let dev: BTreeSet<&String> = a.dev.iter().collect();
    ensure(t400.len() == 400 && t1000.len() == 1000 && t400.is_subset(&t1000), || "train nesting".into())?;
    ensure(test.is_disjoint(&t1000) && test.is_disjoint(&dev) && t1000.is_disjoint(&dev), || "overlap".into())?;
    ensure(test.len() + t1000.len() + dev.len() == cases.len(), || "splits do not cover the cohort".into())?;
    let (ja, jb) = (serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    ensure(ja == jb, || "not byte-identical under a fixed seed".into())?;
    Ok(format!("|test| = 1235, train_400 within train_1000, disjoint, {} dev", dev.len()))
}

fn write_config(dir: &Path, body: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&body).unwrap()).unwrap();
    path
}

fn fixture_paths() -> serde_json::Value {
    let f = common::fixture_dir();
    let p = |name: &str| f.join(name).display().to_string();
    serde_json::json!({
        "kg_nodes": p("nodes.tsv"), "kg_edges": p("edges.tsv"), "vocab": p("vocab.tsv"),
        "cohort": p("cohort.jsonl"), "label_map": p("label_map.tsv"),
    })
}

fn default_parameters_recorded() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = write_config(
        dir.path(),
        serde_json::json!({
            "paths": fixture_paths(),
            "provider": {"kind": "mock", "scenario": common::fixture_dir().join("scenario.json")},
            "diseases": [
                {"disease_id": "AMI", "label": "Acute myocardial infarction"},
                {"disease_id": "HTN", "label": "Essential hypertension"}
            ]
        }),
    );
    let out = dir.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_kgcot"))
        .args(["map-entities", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("resolved-config.json")).unwrap()).map_err(|e| e.to_string())?;
    let q = &resolved["parameters"];
    let expect = serde_json::json!({
        "tau": 0.85, "candidates": 20, "k_node": 8, "k_path": 5, "max_hops": 5,
        "threshold": 0.5, "test_frac": 0.10, "train_sizes": [400, 1000]
    });
    for (k, v) in expect.as_object().unwrap() {
        ensure(&q[k] == v, || format!("{k} = {} (expected {v})", q[k]))?;
    }
    ensure(resolved["templates"].as_object().is_some_and(|t| t.len() == 4), || "template versions missing".into())?;
    Ok("tau 0.85, C 20, K_node 8, K_path 5, L 5, threshold 0.5, test_frac 0.10, train_sizes [400,1000]".into())
}

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = common::fixture_dir().join("config.json");
    let start = Instant::now();
    for run in ["a", "b"] {
        let out = Command::new(env!("CARGO_BIN_EXE_kgcot"))
            .args(["run-all", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(run))
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    }
    let elapsed = start.elapsed();
    let a = common::snapshot(&dir.path().join("a"));
    let b = common::snapshot(&dir.path().join("b"));
    let mut compared = 0;
    for (name, bytes) in &a {
        if name == Path::new("resolved-config.json") {
            continue;
        }
        ensure(b.get(name) == Some(bytes), || format!("{} differs between runs", name.display()))?;
        compared += 1;
    }
    for must in ["mapping.jsonl", "evidence/AMI.json", "evidence/HTN.json", "corpus.jsonl", "metrics.json"] {
        ensure(a.contains_key(Path::new(must)), || format!("{must} missing"))?;
    }
    let golden = std::fs::read(common::fixture_dir().join("golden/mapping.jsonl")).unwrap();
    ensure(a[Path::new("mapping.jsonl")] == golden, || "mapping.jsonl differs from golden".into())?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{compared} artifacts byte-identical across two runs, mapping matches golden, {:.2}s", elapsed.as_secs_f64()))
}

fn study_arithmetic() -> Outcome {
    let (s1, s2) = common::system_outputs(140);
    let config = StudyConfig::default();
    let st = study::build_study(s1, s2, 7, &config).map_err(|e| e.to_string())?;
    ensure(st.comparisons.len() == 115, || format!("{} comparisons", st.comparisons.len()))?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log = dir.path().join("preferences.jsonl");
    let store = StudyStore::open(st.clone(), &log).map_err(|e| e.to_string())?;
    let wins = [(Dimension::ClarityCoherence, 111), (Dimension::CoverageRelevance, 109), (Dimension::CorrectnessSoundness, 113)];
    for (dim, k) in wins {
        for (i, c) in st.comparisons.iter().enumerate() {
            let system1_wins = i < k;
            // A first, wrong-way submission exercises last-write-wins.
            for (pass, want1) in [(0, !system1_wins), (1, system1_wins)] {
                if pass == 0 && i % 9 != 0 {
                    continue;
                }
                let choice = match (c.system1_side, want1) {
                    (Side::A, true) | (Side::B, false) => "A",
                    _ => "B",
                };
                store
                    .record(&Submission {
                        comparison_id: c.comparison_id.clone(),
                        annotator_id: if i < 65 { "ann1".into() } else { "ann2".into() },
                        dimension: dim.as_str().into(),
                        choice: choice.into(),
                    })
                    .map_err(|e| e.to_string())?;
            }
        }
    }
    let report = store.report();
    let replayed = {
        let mut ledger = study::Ledger::default();
        for r in study::replay(&log).map_err(|e| e.to_string())? {
            ledger.apply(&r);
        }
        study::report(&st, &ledger)
    };
    ensure(serde_json::to_value(&report).unwrap() == serde_json::to_value(&replayed).unwrap(), || {
        "replayed log gives a different report".into()
    })?;
    let mut rates = Vec::new();
    for ((dim, k), paper) in wins.iter().zip([96.5, 94.8, 98.3]) {
        let stats = &report.pooled.dimensions[dim.as_str()];
        let rate = stats.rate["system1"].ok_or("undefined rate")? * 100.0;
        ensure(stats.wins["system1"] == *k && stats.annotated == 115, || format!("{}: {:?}", dim.as_str(), stats))?;
        ensure(stats.wins["system1"] + stats.wins["system2"] == stats.annotated, || "accounting".into())?;
        ensure(format!("{rate:.1}") == format!("{paper:.1}"), || format!("{rate:.2}% vs {paper}%"))?;
        rates.push(format!("{rate:.2}%"));
    }
    let expected_two_dp = ["96.52%", "94.78%", "98.26%"];
    ensure(rates == expected_two_dp, || format!("{rates:?}"))?;

    let (s1, s2) = common::system_outputs(1000);
    let big = study::build_study(s1, s2, 11, &StudyConfig { sample_size: None, ..StudyConfig::default() })
        .map_err(|e| e.to_string())?;
    let as_a = big.comparisons.iter().filter(|c| c.system1_side == Side::A).count() as f64 / 1000.0;
    ensure((0.45..=0.55).contains(&as_a), || format!("system1 as A in {:.1}%", as_a * 100.0))?;
    Ok(format!("rates {} (replay-consistent), system1 as A {:.1}% of 1000", rates.join(" / "), as_a * 100.0))
}

fn study_api_blinding() -> Outcome {
    let names = ["alpha-pipeline".to_string(), "beta-baseline".to_string()];
    let (s1, s2) = common::system_outputs(6);
    let st = study::build_study(
        s1,
        s2,
        3,
        &StudyConfig {
            sample_size: None,
            ties_enabled: false,
            system_names: names.clone(),
        },
    )
    .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Arc::new(StudyStore::open(st, &dir.path().join("preferences.jsonl")).map_err(|e| e.to_string())?);
    let server = common::TestServer::start(
        store,
        ServerConfig {
            static_dir: None,
            admin_token: Some("s3cret".into()),
        },
    );
    let agent = common::agent();
    let mut bodies = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for annotator in ["ann1", "ann2"] {
        loop {
            let (status, body) = common::get(&agent, &format!("{}/api/study/next?annotator={annotator}", server.base), None);
            ensure(status == 200, || format!("next returned {status}"))?;
            bodies.push(body.clone());
            let v: serde_json::Value = serde_json::from_str(&body).map_err(|e| e.to_string())?;
            if v["done"] == true {
                break;
            }
            for dim in Dimension::ALL {
                let choice = if rng.random_bool(0.5) { "A" } else { "B" };
                let (status, ack) = common::post_json(
                    &agent,
                    &format!("{}/api/study/preference", server.base),
                    &serde_json::json!({
                        "comparison_id": v["comparison_id"], "annotator_id": annotator,
                        "dimension": dim.as_str(), "choice": choice
                    }),
                );
                ensure(status == 200, || format!("preference returned {status}: {ack}"))?;
                bodies.push(ack);
            }
        }
    }
    let (status, body) = common::post_json(
        &agent,
        &format!("{}/api/study/preference", server.base),
        &serde_json::json!({"comparison_id": "c0001", "annotator_id": "ann1", "dimension": "speed", "choice": "A"}),
    );
    ensure(status == 400, || format!("invalid dimension returned {status}"))?;
    bodies.push(body);
    for path in ["/api/study/export", "/api/health", "/api/study/report", "/", "/index.html"] {
        bodies.push(common::get(&agent, &format!("{}{path}", server.base), None).1);
    }
    let (status, body) = common::get(&agent, &format!("{}/api/study/report", server.base), Some("wrong"));
    ensure(status == 401, || format!("wrong token returned {status}"))?;
    bodies.push(body);
    let (status, report) = common::get(&agent, &format!("{}/api/study/report", server.base), Some("s3cret"));
    ensure(status == 200 && report.contains(&names[0]), || "admin report unavailable".into())?;
    server.stop();

    let forbidden = [names[0].as_str(), names[1].as_str(), "system1_side", "system2", "system1", "unit_id", "hidden", "\"systems\""];
    let mut hits = 0;
    for body in &bodies {
        for f in forbidden {
            if body.contains(f) {
                hits += 1;
                eprintln!("  leak {f:?} in {body}");
            }
        }
    }
    ensure(hits == 0, || format!("{hits} identifier occurrences"))?;
    Ok(format!("{} client-visible responses scanned, 0 identifiers", bodies.len()))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        ("path oracle equivalence", path_oracle_equivalence),
        ("hop bound respected", hop_bound_respected),
        ("AUROC/AUPR oracle equivalence", metric_oracle_equivalence),
        ("metric spot values", metric_spot_values),
        ("alignment precedence and containment", alignment_fuzz),
        ("filter soundness", filter_soundness),
        ("split arithmetic", split_arithmetic),
        ("default parameters recorded", default_parameters_recorded),
        ("end-to-end determinism and speed", end_to_end_determinism),
        ("study arithmetic", study_arithmetic),
        ("study API blinding", study_api_blinding),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
