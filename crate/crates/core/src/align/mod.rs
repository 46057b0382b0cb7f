//! Map clinical vocabulary entries and disease targets onto KG nodes.

mod stages;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::kg::KnowledgeGraph;
use crate::llm::{Gateway, LlmError};
use crate::prompts::{PromptError, PromptSet, TemplateName};

pub use stages::{
    retrieve_candidates, stage1_exact, stage2_similarity, stage3_validate, CandidateIndex, ExactMatch, Provisional,
};
pub(crate) use stages::extract_json;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("disease target {disease_id} ({label:?}) did not resolve to a KG node: {note}")]
    UnresolvedDisease {
        disease_id: String,
        label: String,
        note: String,
    },
    #[error("duplicate disease target {0}")]
    DuplicateTarget(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub code: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub node_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entry: ConceptEntry,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn contains(&self, node_id: &str) -> bool {
        self.candidates.iter().any(|c| c.node_id == node_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingStage {
    Exact,
    Similarity,
    LlmValidated,
    LlmRevised,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingRecord {
    pub code: String,
    pub node_id: Option<String>,
    pub stage: MappingStage,
    pub score: f64,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseTarget {
    pub disease_id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Cosine threshold; the top candidate must exceed it strictly.
    pub tau: f64,
    /// Candidate set size.
    pub candidates: usize,
    /// Route similarity matches through the validator.
    pub validate: bool,
    /// Node type disease targets are restricted to.
    pub disease_node_type: String,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            tau: 0.85,
            candidates: 20,
            validate: true,
            disease_node_type: "disease".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedDisease {
    pub disease_id: String,
    pub label: String,
    pub node_id: String,
    pub stage: MappingStage,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub total: usize,
    pub exact: usize,
    pub similarity: usize,
    pub llm_validated: usize,
    pub llm_revised: usize,
    pub rejected: usize,
}

impl StageCounts {
    pub fn of(records: &[MappingRecord]) -> Self {
        let mut c = StageCounts {
            total: records.len(),
            ..Default::default()
        };
        for r in records {
            *match r.stage {
                MappingStage::Exact => &mut c.exact,
                MappingStage::Similarity => &mut c.similarity,
                MappingStage::LlmValidated => &mut c.llm_validated,
                MappingStage::LlmRevised => &mut c.llm_revised,
                MappingStage::Rejected => &mut c.rejected,
            } += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub stages: StageCounts,
    pub diseases: Vec<ResolvedDisease>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub records: Vec<MappingRecord>,
    pub candidates: Vec<CandidateSet>,
    pub summary: AlignmentSummary,
}

impl Alignment {
    pub fn disease(&self, disease_id: &str) -> Option<&ResolvedDisease> {
        self.summary.diseases.iter().find(|d| d.disease_id == disease_id)
    }
}

/// Run the three stages over `entries`, in input order. Exact matches are
/// final; similarity matches go to the validator when enabled.
#[allow(clippy::too_many_arguments)]
fn align_entries(
    entries: &[ConceptEntry],
    kg: &KnowledgeGraph,
    index: &CandidateIndex<'_>,
    gateway: &Gateway,
    prompts: &PromptSet,
    config: &AlignConfig,
    node_type: Option<&str>,
    warnings: &mut Vec<String>,
) -> Result<(Vec<MappingRecord>, Vec<CandidateSet>), AlignError> {
    let descriptions: Vec<String> = entries.iter().map(|e| e.description.clone()).collect();
    let vectors = if entries.is_empty() {
        Vec::new()
    } else {
        gateway.embed(&descriptions)?
    };
    let sets: Vec<CandidateSet> = entries
        .iter()
        .zip(&vectors)
        .map(|(e, v)| stages::candidates_for(e, v, index, config.candidates))
        .collect();

    let mut records: Vec<Option<MappingRecord>> = vec![None; entries.len()];
    let mut pending = Vec::new();
    let mut pending_slots = Vec::new();
    for (i, (entry, set)) in entries.iter().zip(&sets).enumerate() {
        if let Some(m) = stage1_exact(entry, kg, node_type) {
            if let Some(w) = &m.warning {
                log::warn!("{w}");
                warnings.push(w.clone());
            }
            records[i] = Some(MappingRecord {
                code: entry.code.clone(),
                node_id: Some(m.node_id),
                stage: MappingStage::Exact,
                score: 1.0,
                note: m.warning.unwrap_or_default(),
            });
        } else if let Some(top) = stage2_similarity(set, config.tau) {
            let p = Provisional {
                candidates: set.clone(),
                node_id: top.node_id.clone(),
                score: top.score,
            };
            if config.validate {
                pending.push(p);
                pending_slots.push(i);
            } else {
                records[i] = Some(MappingRecord {
                    code: entry.code.clone(),
                    node_id: Some(p.node_id),
                    stage: MappingStage::Similarity,
                    score: p.score,
                    note: String::new(),
                });
            }
        } else {
            let top = set.candidates.first().map_or(0.0, |c| c.score);
            let note = if set.candidates.is_empty() {
                "no candidates".to_string()
            } else {
                format!("no exact match; top cosine {top:.5} not above {}", config.tau)
            };
            records[i] = Some(MappingRecord {
                code: entry.code.clone(),
                node_id: None,
                stage: MappingStage::Rejected,
                score: top,
                note,
            });
        }
    }
    let validated = stage3_validate(&pending, kg, gateway, prompts.get(TemplateName::Select), 0.0)?;
    for (slot, record) in pending_slots.into_iter().zip(validated) {
        records[slot] = Some(record);
    }
    Ok((records.into_iter().map(|r| r.expect("every entry decided")).collect(), sets))
}

/// Map every vocabulary entry over all KG nodes, then resolve each disease
/// target over disease-typed nodes. An unresolved target is an error.
pub fn run_alignment(
    entries: &[ConceptEntry],
    targets: &[DiseaseTarget],
    kg: &KnowledgeGraph,
    gateway: &Gateway,
    prompts: &PromptSet,
    config: &AlignConfig,
) -> Result<Alignment, AlignError> {
    let mut seen = std::collections::BTreeSet::new();
    for t in targets {
        if !seen.insert(t.disease_id.as_str()) {
            return Err(AlignError::DuplicateTarget(t.disease_id.clone()));
        }
    }
    let mut warnings = Vec::new();
    let index = CandidateIndex::build(kg.nodes().collect(), gateway)?;
    for id in &index.zero_norm_nodes {
        warnings.push(format!("node {id} has a zero-norm embedding; excluded from candidates"));
    }
    let (records, candidates) = align_entries(entries, kg, &index, gateway, prompts, config, None, &mut warnings)?;

    let disease_nodes = kg.nodes().filter(|n| n.node_type == config.disease_node_type).collect();
    let disease_index = CandidateIndex::build(disease_nodes, gateway)?;
    let target_entries: Vec<ConceptEntry> = targets
        .iter()
        .map(|t| ConceptEntry {
            code: t.disease_id.clone(),
            description: t.label.clone(),
        })
        .collect();
    let (resolved, _) = align_entries(
        &target_entries,
        kg,
        &disease_index,
        gateway,
        prompts,
        config,
        Some(&config.disease_node_type),
        &mut warnings,
    )?;
    let diseases = targets
        .iter()
        .zip(resolved)
        .map(|(t, r)| match r.node_id {
            Some(node_id) => Ok(ResolvedDisease {
                disease_id: t.disease_id.clone(),
                label: t.label.clone(),
                node_id,
                stage: r.stage,
                score: r.score,
            }),
            None => Err(AlignError::UnresolvedDisease {
                disease_id: t.disease_id.clone(),
                label: t.label.clone(),
                note: r.note,
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Alignment {
        summary: AlignmentSummary {
            stages: StageCounts::of(&records),
            diseases,
            warnings,
        },
        records,
        candidates,
    })
}

pub fn write_mapping(path: &Path, records: &[MappingRecord]) -> Result<(), AlignError> {
    let io = |source| AlignError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut out, r).expect("mapping record serializes");
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_mapping(path: &Path) -> Result<Vec<MappingRecord>, AlignError> {
    let io = |source| AlignError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AlignError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
