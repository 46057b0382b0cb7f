//! Per-disease relevance sets and pruned shortest-path evidence.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{extract_json, MappingRecord, ResolvedDisease};
use crate::kg::{KgError, KnowledgeGraph, Orientation, PathQuery, ReasoningPath};
use crate::llm::{cosine, ChatRequest, Gateway, LlmError};
use crate::prompts::{PromptError, PromptSet, PromptTemplate, TemplateName};
use crate::text::normalize_label;

#[derive(Debug, thiserror::Error)]
pub enum EvidenceError {
    #[error("disease {disease_id}: no mapped feature nodes to select from")]
    NoFeatures { disease_id: String },
    #[error("disease {disease_id}: node selection yielded no valid members (reply: {reply:?})")]
    NoRelevantNodes { disease_id: String, reply: String },
    #[error("disease {disease_id}: {source}")]
    Llm {
        disease_id: String,
        #[source]
        source: LlmError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid evidence file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvidenceConfig {
    pub k_node: usize,
    pub k_path: usize,
    pub max_hops: usize,
    pub max_paths: usize,
    pub directed: bool,
    /// Keep only the M features closest to the disease node before selection.
    /// `None` sends every mapped feature.
    pub prefilter_top_m: Option<usize>,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        EvidenceConfig {
            k_node: 8,
            k_path: 5,
            max_hops: 5,
            max_paths: 64,
            directed: false,
            prefilter_top_m: Some(300),
        }
    }
}

impl EvidenceConfig {
    pub fn path_query(&self) -> PathQuery {
        PathQuery::new(self.max_hops, self.max_paths).directed(self.directed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceSet {
    pub disease_node: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub provider: String,
    pub model: String,
    pub templates: BTreeMap<String, String>,
    pub k_node: usize,
    pub k_path: usize,
    pub max_hops: usize,
    pub max_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseEvidence {
    pub disease_id: String,
    pub disease_node: String,
    pub relevance: Vec<String>,
    pub paths: Vec<ReasoningPath>,
    pub flags: Vec<String>,
    pub provenance: Provenance,
}

impl DiseaseEvidence {
    pub fn relevance_set(&self) -> RelevanceSet {
        RelevanceSet {
            disease_node: self.disease_node.clone(),
            members: self.relevance.clone(),
        }
    }
}

fn node_name<'a>(kg: &'a KnowledgeGraph, id: &'a str) -> &'a str {
    kg.node(id).map_or(id, |n| n.node_name.as_str())
}

/// `A -[rel]-> B <-[rel]- C` over node names and display relations.
pub fn render_path(kg: &KnowledgeGraph, path: &ReasoningPath) -> String {
    let mut out = String::from(node_name(kg, &path.nodes[0]));
    for (step, next) in path.steps.iter().zip(&path.nodes[1..]) {
        let rel = if step.display_relation.is_empty() {
            &step.relation
        } else {
            &step.display_relation
        };
        match step.orientation {
            Orientation::Forward => out.push_str(&format!(" -[{rel}]-> ")),
            Orientation::Reverse => out.push_str(&format!(" <-[{rel}]- ")),
        }
        out.push_str(node_name(kg, next));
    }
    out
}

/// Distinct KG nodes that some accepted mapping record points at, by id.
pub fn feature_nodes(mapping: &[MappingRecord], kg: &KnowledgeGraph) -> Vec<String> {
    mapping
        .iter()
        .filter_map(|r| r.node_id.as_deref())
        .filter(|id| kg.contains(id))
        .map(str::to_string)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Top-`m` features by cosine to the disease node name (ties by id), returned
/// in id order.
pub fn prefilter_features(
    disease_node: &str,
    features: &[String],
    kg: &KnowledgeGraph,
    gateway: &Gateway,
    m: usize,
) -> Result<Vec<String>, LlmError> {
    if features.len() <= m {
        return Ok(features.to_vec());
    }
    let mut texts = vec![node_name(kg, disease_node).to_string()];
    texts.extend(features.iter().map(|f| node_name(kg, f).to_string()));
    let vectors = gateway.embed(&texts)?;
    let mut scored: Vec<(f64, &String)> = features
        .iter()
        .zip(&vectors[1..])
        .map(|(f, v)| (cosine(&vectors[0], v).unwrap_or(-1.0), f))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let mut kept: Vec<String> = scored.into_iter().take(m).map(|(_, f)| f.clone()).collect();
    kept.sort();
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    pub chosen: T,
    pub warnings: Vec<String>,
}

fn parse_node_reply(
    reply: &str,
    disease_node: &str,
    features: &[String],
    kg: &KnowledgeGraph,
    k_node: usize,
) -> Selection<Vec<String>> {
    let mut warnings = Vec::new();
    let items: Vec<serde_json::Value> = extract_json(reply, '[', ']')
        .and_then(|s| serde_json::from_str(s).ok())
        .unwrap_or_default();
    let by_id: BTreeSet<&str> = features.iter().map(String::as_str).collect();
    let mut members: Vec<String> = Vec::new();
    for item in items {
        let raw = match &item {
            serde_json::Value::String(s) => s.trim().to_string(),
            other => other.to_string(),
        };
        let resolved = if by_id.contains(raw.as_str()) || raw == disease_node {
            Some(raw.clone())
        } else {
            let key = normalize_label(&raw);
            features
                .iter()
                .chain(std::iter::once(&disease_node.to_string()))
                .find(|f| normalize_label(node_name(kg, f)) == key)
                .cloned()
        };
        match resolved {
            Some(id) if id == disease_node => warnings.push(format!("dropped disease node {id} from selection")),
            Some(id) if members.contains(&id) => warnings.push(format!("duplicate selection {id}")),
            Some(id) => members.push(id),
            None => warnings.push(format!("dropped unknown selection {raw:?}")),
        }
    }
    if members.len() > k_node {
        warnings.push(format!("truncated selection from {} to {k_node}", members.len()));
        members.truncate(k_node);
    }
    Selection {
        chosen: members,
        warnings,
    }
}

/// Ask the model for the `k_node` features most relevant to the disease.
/// Unknown ids, the disease node itself, and duplicates are dropped.
pub fn select_relevant_nodes(
    disease: &ResolvedDisease,
    features: &[String],
    kg: &KnowledgeGraph,
    gateway: &Gateway,
    template: &PromptTemplate,
    k_node: usize,
) -> Result<Selection<RelevanceSet>, EvidenceError> {
    let listed: Vec<&String> = features.iter().filter(|f| **f != disease.node_id).collect();
    if listed.is_empty() {
        return Err(EvidenceError::NoFeatures {
            disease_id: disease.disease_id.clone(),
        });
    }
    let lines = listed
        .iter()
        .map(|f| {
            let n = kg.node(f).expect("features are KG nodes");
            format!("{} | {} | {}", n.node_id, n.node_name, n.node_type)
        })
        .collect::<Vec<_>>()
        .join("\n");
    let vars: BTreeMap<&str, String> = [
        ("disease_name", node_name(kg, &disease.node_id).to_string()),
        ("disease_node", disease.node_id.clone()),
        ("k_node", k_node.to_string()),
        ("features", lines),
    ]
    .into_iter()
    .collect();
    let request = ChatRequest::new("node_select", template.render(&vars)?, 0.0);
    let reply = gateway.chat(&request).map_err(|source| EvidenceError::Llm {
        disease_id: disease.disease_id.clone(),
        source,
    })?;
    let parsed = parse_node_reply(&reply.text, &disease.node_id, features, kg, k_node);
    if parsed.chosen.is_empty() {
        return Err(EvidenceError::NoRelevantNodes {
            disease_id: disease.disease_id.clone(),
            reply: crate::text::truncate_chars(&reply.text, 200).to_string(),
        });
    }
    Ok(Selection {
        chosen: RelevanceSet {
            disease_node: disease.node_id.clone(),
            members: parsed.chosen,
        },
        warnings: parsed.warnings,
    })
}

fn path_order(a: &ReasoningPath, b: &ReasoningPath) -> std::cmp::Ordering {
    a.len()
        .cmp(&b.len())
        .then_with(|| a.nodes.cmp(&b.nodes))
        .then_with(|| {
            let ra = a.steps.iter().map(|s| (&s.relation, s.orientation == Orientation::Reverse));
            let rb = b.steps.iter().map(|s| (&s.relation, s.orientation == Orientation::Reverse));
            ra.cmp(rb)
        })
}

/// All shortest paths from each member to the disease node, ordered by
/// (length, node ids, relations). Members without a path are returned too.
pub fn extract_candidate_paths(
    relevance: &RelevanceSet,
    kg: &KnowledgeGraph,
    query: &PathQuery,
) -> Result<(Vec<ReasoningPath>, Vec<String>), KgError> {
    let mut paths = Vec::new();
    let mut unreachable = Vec::new();
    for m in &relevance.members {
        let found = kg.all_shortest_paths(m, &relevance.disease_node, query)?;
        if found.is_empty() {
            unreachable.push(m.clone());
        }
        paths.extend(found);
    }
    paths.sort_by(path_order);
    Ok((paths, unreachable))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    pub paths: Vec<ReasoningPath>,
    pub fallback: bool,
    pub warnings: Vec<String>,
}

fn parse_index_reply(reply: &str, n: usize, k_path: usize, warnings: &mut Vec<String>) -> Vec<usize> {
    let items: Vec<serde_json::Value> = match extract_json(reply, '[', ']').and_then(|s| serde_json::from_str(s).ok()) {
        Some(v) => v,
        None => return Vec::new(),
    };
    let mut chosen = Vec::new();
    for item in items {
        let idx = match &item {
            serde_json::Value::Number(x) => x.as_u64(),
            serde_json::Value::String(s) => s.trim().parse().ok(),
            _ => None,
        };
        match idx {
            Some(i) if i >= 1 && (i as usize) <= n => {
                let i = i as usize - 1;
                if !chosen.contains(&i) {
                    chosen.push(i);
                }
            }
            _ => warnings.push(format!("dropped out-of-range path index {item}")),
        }
    }
    chosen.truncate(k_path);
    chosen
}

/// Let the model pick up to `k_path` candidates by 1-based index. Provider
/// failure or a reply with no valid index falls back to the first `k_path`
/// candidates in (length, lexicographic) order.
pub fn prune_paths(
    candidates: &[ReasoningPath],
    disease_node: &str,
    kg: &KnowledgeGraph,
    gateway: &Gateway,
    template: &PromptTemplate,
    k_path: usize,
) -> Result<Pruned, PromptError> {
    if candidates.is_empty() {
        return Ok(Pruned {
            paths: Vec::new(),
            fallback: false,
            warnings: Vec::new(),
        });
    }
    let listing = candidates
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}", i + 1, render_path(kg, p)))
        .collect::<Vec<_>>()
        .join("\n");
    let vars: BTreeMap<&str, String> = [
        ("disease_name", node_name(kg, disease_node).to_string()),
        ("k_path", k_path.to_string()),
        ("paths", listing),
    ]
    .into_iter()
    .collect();
    let request = ChatRequest::new("path_select", template.render(&vars)?, 0.0);
    let mut warnings = Vec::new();
    let chosen = match gateway.chat(&request) {
        Ok(reply) => parse_index_reply(&reply.text, candidates.len(), k_path, &mut warnings),
        Err(e) => {
            warnings.push(format!("path selection failed: {e}"));
            Vec::new()
        }
    };
    if chosen.is_empty() {
        let mut sorted = candidates.to_vec();
        sorted.sort_by(path_order);
        sorted.truncate(k_path);
        return Ok(Pruned {
            paths: sorted,
            fallback: true,
            warnings,
        });
    }
    Ok(Pruned {
        paths: chosen.into_iter().map(|i| candidates[i].clone()).collect(),
        fallback: false,
        warnings,
    })
}

/// Relevance selection, candidate extraction, and pruning for one disease.
pub fn build_evidence(
    disease: &ResolvedDisease,
    mapping: &[MappingRecord],
    kg: &KnowledgeGraph,
    gateway: &Gateway,
    prompts: &PromptSet,
    config: &EvidenceConfig,
) -> Result<DiseaseEvidence, EvidenceError> {
    let mut flags = Vec::new();
    let mut features = feature_nodes(mapping, kg);
    if let Some(m) = config.prefilter_top_m {
        let before = features.len();
        features = prefilter_features(&disease.node_id, &features, kg, gateway, m).map_err(|source| {
            EvidenceError::Llm {
                disease_id: disease.disease_id.clone(),
                source,
            }
        })?;
        if features.len() < before {
            flags.push(format!("prefiltered:{before}->{}", features.len()));
        }
    }
    let selection = select_relevant_nodes(
        disease,
        &features,
        kg,
        gateway,
        prompts.get(TemplateName::NodeSelect),
        config.k_node,
    )?;
    for w in &selection.warnings {
        log::warn!("{}: {w}", disease.disease_id);
    }
    flags.extend(selection.warnings.iter().map(|w| format!("node_select: {w}")));
    let relevance = selection.chosen;

    let (candidates, unreachable) = extract_candidate_paths(&relevance, kg, &config.path_query())?;
    flags.extend(unreachable.iter().map(|m| format!("no_path:{m}")));
    if candidates.is_empty() {
        log::warn!("{}: no relevance member reaches {} within {} hops", disease.disease_id, disease.node_id, config.max_hops);
        flags.push("no_paths".into());
    }
    let pruned = prune_paths(
        &candidates,
        &disease.node_id,
        kg,
        gateway,
        prompts.get(TemplateName::PathSelect),
        config.k_path,
    )?;
    for w in &pruned.warnings {
        log::warn!("{}: {w}", disease.disease_id);
    }
    flags.extend(pruned.warnings.iter().map(|w| format!("path_select: {w}")));
    if pruned.fallback {
        flags.push("fallback".into());
    }
    let versions = prompts.versions();
    Ok(DiseaseEvidence {
        disease_id: disease.disease_id.clone(),
        disease_node: disease.node_id.clone(),
        relevance: relevance.members,
        paths: pruned.paths,
        flags,
        provenance: Provenance {
            provider: gateway.provider_id().to_string(),
            model: gateway.model().to_string(),
            templates: [TemplateName::NodeSelect, TemplateName::PathSelect]
                .iter()
                .map(|t| (t.file_stem().to_string(), versions[t.file_stem()].clone()))
                .collect(),
            k_node: config.k_node,
            k_path: config.k_path,
            max_hops: config.max_hops,
            max_paths: config.max_paths,
        },
    })
}

pub fn evidence_path(dir: &Path, disease_id: &str) -> PathBuf {
    dir.join(format!("{disease_id}.json"))
}

pub fn write_evidence(dir: &Path, evidence: &DiseaseEvidence) -> Result<PathBuf, EvidenceError> {
    let path = evidence_path(dir, &evidence.disease_id);
    let io = |source| EvidenceError::Io {
        path: path.clone(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut body = serde_json::to_string_pretty(evidence).expect("evidence serializes");
    body.push('\n');
    std::fs::write(&path, body).map_err(io)?;
    Ok(path)
}

pub fn read_evidence(dir: &Path, disease_id: &str) -> Result<DiseaseEvidence, EvidenceError> {
    let path = evidence_path(dir, disease_id);
    let bytes = std::fs::read(&path).map_err(|source| EvidenceError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| EvidenceError::Malformed {
        path,
        message: e.to_string(),
    })
}
