use std::collections::BTreeMap;

use serde::Deserialize;

use super::{Candidate, CandidateSet, ConceptEntry, MappingRecord, MappingStage};
use crate::kg::{KgNode, KnowledgeGraph};
use crate::llm::{cosine, fan_out, ChatRequest, Gateway, LlmError};
use crate::prompts::PromptTemplate;

/// Embedded node names for candidate ranking. Zero-norm node vectors are
/// dropped at build time and counted.
pub struct CandidateIndex<'g> {
    nodes: Vec<&'g KgNode>,
    vectors: Vec<Vec<f64>>,
    pub zero_norm_nodes: Vec<String>,
}

impl<'g> CandidateIndex<'g> {
    pub fn build(nodes: Vec<&'g KgNode>, gateway: &Gateway) -> Result<Self, LlmError> {
        let names: Vec<String> = nodes.iter().map(|n| n.node_name.clone()).collect();
        let vectors = if names.is_empty() {
            Vec::new()
        } else {
            gateway.embed(&names)?
        };
        let mut kept_nodes = Vec::with_capacity(nodes.len());
        let mut kept_vectors = Vec::with_capacity(nodes.len());
        let mut zero_norm_nodes = Vec::new();
        for (node, v) in nodes.into_iter().zip(vectors) {
            if v.iter().all(|x| *x == 0.0) {
                zero_norm_nodes.push(node.node_id.clone());
            } else {
                kept_nodes.push(node);
                kept_vectors.push(v);
            }
        }
        Ok(CandidateIndex {
            nodes: kept_nodes,
            vectors: kept_vectors,
            zero_norm_nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Top-`c` nodes by cosine to `query`, ties broken by ascending node id.
    pub fn rank(&self, query: &[f64], c: usize) -> Vec<Candidate> {
        let mut scored: Vec<Candidate> = self
            .nodes
            .iter()
            .zip(&self.vectors)
            .filter_map(|(node, v)| {
                cosine(query, v).map(|score| Candidate {
                    node_id: node.node_id.clone(),
                    score,
                })
            })
            .collect();
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.node_id.cmp(&b.node_id)));
        scored.truncate(c);
        scored
    }
}

/// Rank KG nodes against an entry description.
pub fn retrieve_candidates(
    entry: &ConceptEntry,
    index: &CandidateIndex<'_>,
    gateway: &Gateway,
    c: usize,
) -> Result<CandidateSet, LlmError> {
    let v = gateway.embed(std::slice::from_ref(&entry.description))?;
    Ok(candidates_for(entry, &v[0], index, c))
}

pub(super) fn candidates_for(entry: &ConceptEntry, vector: &[f64], index: &CandidateIndex<'_>, c: usize) -> CandidateSet {
    let zero = vector.iter().all(|x| *x == 0.0);
    if zero {
        log::warn!("entry {} has a zero-norm embedding; no candidates", entry.code);
    }
    CandidateSet {
        entry: entry.clone(),
        candidates: if zero { Vec::new() } else { index.rank(vector, c) },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactMatch {
    pub node_id: String,
    pub warning: Option<String>,
}

/// Normalized description equal to a normalized node label. Several nodes
/// sharing the label resolve to the lowest node id, with a warning.
pub fn stage1_exact(
    entry: &ConceptEntry,
    kg: &KnowledgeGraph,
    node_type: Option<&str>,
) -> Option<ExactMatch> {
    let hits: Vec<&KgNode> = kg
        .nodes_named(&entry.description)
        .into_iter()
        .filter(|n| node_type.is_none_or(|t| n.node_type == t))
        .collect();
    let first = hits.first()?;
    let warning = (hits.len() > 1).then(|| {
        format!(
            "{}: label {:?} shared by {}; chose {}",
            entry.code,
            entry.description,
            hits.iter().map(|n| n.node_id.as_str()).collect::<Vec<_>>().join(", "),
            first.node_id
        )
    });
    Some(ExactMatch {
        node_id: first.node_id.clone(),
        warning,
    })
}

/// Argmax candidate when its cosine strictly exceeds `tau`.
pub fn stage2_similarity(candidates: &CandidateSet, tau: f64) -> Option<&Candidate> {
    candidates.candidates.first().filter(|top| top.score > tau)
}

/// A similarity-stage mapping awaiting validation.
#[derive(Debug, Clone)]
pub struct Provisional {
    pub candidates: CandidateSet,
    pub node_id: String,
    pub score: f64,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
enum Verdict {
    Confirm,
    Revise { node_id: String },
    Reject {
        #[serde(default)]
        reason: Option<String>,
    },
}

/// Pull the first JSON value delimited by `open`/`close` out of a reply that
/// may carry code fences or prose around it.
pub(crate) fn extract_json(text: &str, open: char, close: char) -> Option<&str> {
    let start = text.find(open)?;
    let end = text.rfind(close)?;
    (end > start).then(|| &text[start..=end])
}

fn parse_verdict(text: &str) -> Option<Verdict> {
    serde_json::from_str(extract_json(text, '{', '}')?).ok()
}

fn describe(kg: &KnowledgeGraph, node_id: &str) -> (String, String) {
    kg.node(node_id)
        .map(|n| (n.node_name.clone(), n.node_type.clone()))
        .unwrap_or_default()
}

fn validation_prompt(
    p: &Provisional,
    kg: &KnowledgeGraph,
    template: &PromptTemplate,
) -> Result<Vec<crate::llm::ChatMessage>, crate::prompts::PromptError> {
    let (name, ty) = describe(kg, &p.node_id);
    let candidates = p
        .candidates
        .candidates
        .iter()
        .map(|c| {
            let (n, t) = describe(kg, &c.node_id);
            format!("{} | {} | {} | {:.4}", c.node_id, n, t, c.score)
        })
        .collect::<Vec<_>>()
        .join("\n");
    let vars: BTreeMap<&str, String> = [
        ("code", p.candidates.entry.code.clone()),
        ("description", p.candidates.entry.description.clone()),
        ("proposed_id", p.node_id.clone()),
        ("proposed_name", name),
        ("proposed_type", ty),
        ("score", format!("{:.4}", p.score)),
        ("candidates", candidates),
    ]
    .into_iter()
    .collect();
    template.render(&vars)
}

fn rejected(p: &Provisional, note: String) -> MappingRecord {
    MappingRecord {
        code: p.candidates.entry.code.clone(),
        node_id: None,
        stage: MappingStage::Rejected,
        score: p.score,
        note,
    }
}

/// Ask the validator to confirm, revise (within the candidate set), or reject
/// each provisional mapping. Failures reject the record with a note.
pub fn stage3_validate(
    provisional: &[Provisional],
    kg: &KnowledgeGraph,
    gateway: &Gateway,
    template: &PromptTemplate,
    temperature: f64,
) -> Result<Vec<MappingRecord>, crate::prompts::PromptError> {
    let prompts = provisional
        .iter()
        .map(|p| validation_prompt(p, kg, template))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(&Provisional, Vec<crate::llm::ChatMessage>)> = provisional.iter().zip(prompts).collect();
    Ok(fan_out(&jobs, gateway.max_in_flight(), |(p, messages)| {
        let request = ChatRequest::new("entity_select", messages.clone(), temperature);
        let reply = match gateway.chat(&request) {
            Ok(r) => r.text,
            Err(e) => return rejected(p, format!("provider failure: {e}")),
        };
        match parse_verdict(&reply) {
            Some(Verdict::Confirm) => MappingRecord {
                code: p.candidates.entry.code.clone(),
                node_id: Some(p.node_id.clone()),
                stage: MappingStage::LlmValidated,
                score: p.score,
                note: String::new(),
            },
            Some(Verdict::Revise { node_id }) => {
                match p.candidates.candidates.iter().find(|c| c.node_id == node_id) {
                    Some(c) if node_id == p.node_id => MappingRecord {
                        code: p.candidates.entry.code.clone(),
                        node_id: Some(node_id),
                        stage: MappingStage::LlmValidated,
                        score: c.score,
                        note: "revision named the proposed node".into(),
                    },
                    Some(c) => MappingRecord {
                        code: p.candidates.entry.code.clone(),
                        node_id: Some(node_id),
                        stage: MappingStage::LlmRevised,
                        score: c.score,
                        note: format!("revised from {}", p.node_id),
                    },
                    None => rejected(p, format!("out-of-candidate revision: {node_id}")),
                }
            }
            Some(Verdict::Reject { reason }) => rejected(
                p,
                format!("rejected by validator: {}", reason.unwrap_or_default()).trim_end_matches(": ").to_string(),
            ),
            None => rejected(p, "unparseable validator reply".into()),
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{KgEdge, KgNode};
    use crate::llm::{MockBackend, Scenario};

    fn kg() -> KnowledgeGraph {
        let node = |id: &str, ty: &str, name: &str| KgNode {
            node_id: id.into(),
            node_type: ty.into(),
            node_name: name.into(),
            source: "t".into(),
        };
        KnowledgeGraph::new(
            vec![
                node("K1", "disease", "Shock"),
                node("K2", "disease", "shock"),
                node("K3", "disease", "Essential Hypertension"),
                node("K12", "disease", "Coronary artery disease"),
            ],
            Vec::<KgEdge>::new(),
        )
        .unwrap()
        .0
    }

    fn entry(code: &str, d: &str) -> ConceptEntry {
        ConceptEntry {
            code: code.into(),
            description: d.into(),
        }
    }

    fn set(cands: &[(&str, f64)]) -> CandidateSet {
        CandidateSet {
            entry: entry("414.01", "Coronary atherosclerosis"),
            candidates: cands
                .iter()
                .map(|(id, s)| Candidate {
                    node_id: id.to_string(),
                    score: *s,
                })
                .collect(),
        }
    }

    #[test]
    fn exact_match_casefolds() {
        let m = stage1_exact(&entry("401.9", "essential hypertension"), &kg(), None).unwrap();
        assert_eq!(m.node_id, "K3");
        assert!(m.warning.is_none());
        assert!(stage1_exact(&entry("x", "nothing like it"), &kg(), None).is_none());
    }

    #[test]
    fn shared_label_picks_lowest_id_with_warning() {
        let m = stage1_exact(&entry("785.50", "SHOCK"), &kg(), None).unwrap();
        assert_eq!(m.node_id, "K1");
        assert!(m.warning.unwrap().contains("K1, K2"));
    }

    #[test]
    fn similarity_threshold_is_strict() {
        assert_eq!(stage2_similarity(&set(&[("K3", 0.86)]), 0.85).unwrap().node_id, "K3");
        assert!(stage2_similarity(&set(&[("K3", std::f64::consts::FRAC_1_SQRT_2)]), 0.85).is_none());
        assert!(stage2_similarity(&set(&[("K3", 0.85)]), 0.85).is_none());
        assert!(stage2_similarity(&set(&[]), 0.85).is_none());
    }

    #[test]
    fn ranking_breaks_ties_by_node_id() {
        let scenario = Scenario {
            embedding_dim: 2,
            seed: 0,
            rules: vec![],
            default_reply: None,
            embeddings: [
                ("shock".to_string(), vec![1.0, 0.0]),
                ("essential hypertension".to_string(), vec![0.0, 1.0]),
                ("coronary artery disease".to_string(), vec![1.0, 1.0]),
            ]
            .into_iter()
            .collect(),
        };
        let gw = Gateway::new(Box::new(MockBackend::new(scenario).unwrap()));
        let g = kg();
        let index = CandidateIndex::build(g.nodes().collect(), &gw).unwrap();
        let ranked = index.rank(&[2.0, 0.0], 10);
        let ids: Vec<_> = ranked.iter().map(|c| c.node_id.as_str()).collect();
        assert_eq!(ids, vec!["K1", "K2", "K12", "K3"]);
        assert_eq!(ranked[0].score, 1.0);
        assert!((ranked[2].score - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-5);
        assert_eq!(index.rank(&[2.0, 0.0], 2).len(), 2);
    }

    fn validate(reply: &str) -> MappingRecord {
        let scenario = Scenario {
            embedding_dim: 2,
            seed: 0,
            rules: vec![],
            default_reply: Some(reply.to_string()),
            embeddings: Default::default(),
        };
        let gw = Gateway::new(Box::new(MockBackend::new(scenario).unwrap()));
        let p = Provisional {
            candidates: set(&[("K3", 0.9), ("K12", 0.88)]),
            node_id: "K3".into(),
            score: 0.9,
        };
        let t = PromptTemplate::builtin(crate::prompts::TemplateName::Select);
        stage3_validate(&[p], &kg(), &gw, &t, 0.0).unwrap().remove(0)
    }

    #[test]
    fn confirm_keeps_node() {
        let r = validate(r#"{"verdict":"confirm"}"#);
        assert_eq!((r.stage, r.node_id.as_deref()), (MappingStage::LlmValidated, Some("K3")));
    }

    #[test]
    fn revise_within_candidates() {
        let r = validate("```json\n{\"verdict\":\"revise\",\"node_id\":\"K12\"}\n```");
        assert_eq!((r.stage, r.node_id.as_deref()), (MappingStage::LlmRevised, Some("K12")));
        assert_eq!(r.score, 0.88);
    }

    #[test]
    fn revise_outside_candidates_rejected() {
        let r = validate(r#"{"verdict":"revise","node_id":"K99"}"#);
        assert_eq!(r.stage, MappingStage::Rejected);
        assert!(r.node_id.is_none());
        assert!(r.note.contains("out-of-candidate revision"));
    }

    #[test]
    fn reject_and_garbage() {
        let r = validate(r#"{"verdict":"reject","reason":"too broad"}"#);
        assert_eq!(r.stage, MappingStage::Rejected);
        assert_eq!(r.note, "rejected by validator: too broad");
        let r = validate("I think it's fine");
        assert_eq!(r.stage, MappingStage::Rejected);
        assert_eq!(r.note, "unparseable validator reply");
    }
}
