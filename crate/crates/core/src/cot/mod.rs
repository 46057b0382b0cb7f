//! Evidence-conditioned reasoning traces and the label-agreement filter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::align::MappingRecord;
use crate::cohort::{IndexCase, Vocabulary};
use crate::evidence::{render_path, DiseaseEvidence};
use crate::kg::KnowledgeGraph;
use crate::llm::{fan_out, ChatMessage, ChatRequest, Gateway, LlmError, Role};
use crate::prompts::{PromptError, PromptTemplate};

#[derive(Debug, thiserror::Error)]
pub enum CotError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no evidence for disease {0}")]
    MissingEvidence(String),
    #[error("case {case_id} has no label for disease {disease_id}")]
    MissingLabel { case_id: String, disease_id: String },
    #[error("generation failed for {sample_id}: {source}")]
    Provider {
        sample_id: String,
        #[source]
        source: LlmError,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CotConfig {
    pub temperature: f64,
    /// Emit the absent-relevance block in prompts.
    pub include_absent_relevance: bool,
    /// Abort on the first provider failure instead of recording it.
    pub fail_fast: bool,
    /// Character budget for the user message; diagnoses are trimmed first.
    pub prompt_char_budget: Option<usize>,
}

impl Default for CotConfig {
    fn default() -> Self {
        CotConfig {
            temperature: 0.7,
            include_absent_relevance: true,
            fail_fast: false,
            prompt_char_budget: Some(16_000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conclusion {
    Yes,
    No,
    Unparseable,
}

impl Conclusion {
    pub fn as_label(self) -> Option<u8> {
        match self {
            Conclusion::Yes => Some(1),
            Conclusion::No => Some(0),
            Conclusion::Unparseable => None,
        }
    }
}

fn anchored() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^[\s*_#>]*conclusion[\s*_]*:[\s*_]*(yes|no)[\s*_]*[.!]?[\s*_]*$").unwrap())
}

fn loose() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap())
}

fn verdict(word: &str) -> Conclusion {
    if word.eq_ignore_ascii_case("yes") {
        Conclusion::Yes
    } else {
        Conclusion::No
    }
}

/// `Conclusion: Yes|No` on the final non-empty line, else the last standalone
/// yes/no in the final 200 characters.
pub fn parse_conclusion(text: &str) -> Conclusion {
    if let Some(last) = text.lines().rev().find(|l| !l.trim().is_empty()) {
        if let Some(c) = anchored().captures(last.trim()) {
            return verdict(&c[1]);
        }
    }
    let tail_start = text
        .char_indices()
        .rev()
        .nth(199)
        .map_or(0, |(i, _)| i);
    loose()
        .captures_iter(&text[tail_start..])
        .last()
        .map_or(Conclusion::Unparseable, |c| verdict(&c[1]))
}

/// Members whose node some case code maps to, and the rest, in member order.
pub fn partition_relevance(
    case: &IndexCase,
    members: &[String],
    code_to_node: &HashMap<String, String>,
) -> (Vec<String>, Vec<String>) {
    let present: BTreeSet<&str> = case
        .codes_t
        .iter()
        .filter_map(|c| code_to_node.get(c).map(String::as_str))
        .collect();
    members.iter().cloned().partition(|m| present.contains(m.as_str()))
}

/// Accepted mapping records as code → node id.
pub fn code_index(mapping: &[MappingRecord]) -> HashMap<String, String> {
    mapping
        .iter()
        .filter_map(|r| r.node_id.as_ref().map(|n| (r.code.clone(), n.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotContext {
    pub case_id: String,
    pub disease_id: String,
    pub disease_name: String,
    /// Descriptions of in-vocabulary codes, relevance-mapped codes first.
    pub codes_present: Vec<String>,
    pub relevance_present: Vec<String>,
    pub relevance_absent: Vec<String>,
    pub paths: Vec<String>,
    pub ground_truth: u8,
}

pub fn build_context(
    case: &IndexCase,
    evidence: &DiseaseEvidence,
    code_to_node: &HashMap<String, String>,
    vocab: &Vocabulary,
    kg: &KnowledgeGraph,
) -> Result<CotContext, CotError> {
    let label = *case.labels.get(&evidence.disease_id).ok_or_else(|| CotError::MissingLabel {
        case_id: case.case_id.clone(),
        disease_id: evidence.disease_id.clone(),
    })?;
    let (plus, minus) = partition_relevance(case, &evidence.relevance, code_to_node);
    let members: BTreeSet<&str> = evidence.relevance.iter().map(String::as_str).collect();
    let (mut mapped, mut other) = (Vec::new(), Vec::new());
    for code in &case.codes_t {
        let Some(desc) = vocab.description(code) else { continue };
        if code_to_node.get(code).is_some_and(|n| members.contains(n.as_str())) {
            mapped.push(desc.to_string());
        } else {
            other.push(desc.to_string());
        }
    }
    mapped.append(&mut other);
    let name = |id: &String| kg.node(id).map_or(id.clone(), |n| n.node_name.clone());
    Ok(CotContext {
        case_id: case.case_id.clone(),
        disease_id: evidence.disease_id.clone(),
        disease_name: name(&evidence.disease_node),
        codes_present: mapped,
        relevance_present: plus.iter().map(name).collect(),
        relevance_absent: minus.iter().map(name).collect(),
        paths: evidence.paths.iter().map(|p| render_path(kg, p)).collect(),
        ground_truth: label,
    })
}

/// Marker line embedded only when generating with the label.
pub const LABEL_MARKER: &str = "Ground-truth outcome at the next visit:";

fn bullets(items: &[String]) -> String {
    if items.is_empty() {
        "(none)".to_string()
    } else {
        items.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")
    }
}

fn label_block(ctx: &CotContext) -> String {
    let (word, gloss) = if ctx.ground_truth == 1 {
        ("Yes", "the target disease is diagnosed")
    } else {
        ("No", "the target disease is not diagnosed")
    };
    format!(
        "\n{LABEL_MARKER} {word} ({gloss}).\nWrite the step-by-step reasoning from the evidence above that supports this outcome, without mentioning that it was given."
    )
}

fn vars_for(ctx: &CotContext, codes: String, include_label: bool, include_absent: bool) -> BTreeMap<&'static str, String> {
    [
        ("disease_name", ctx.disease_name.clone()),
        ("codes_present", codes),
        ("relevance_present", bullets(&ctx.relevance_present)),
        (
            "relevance_absent",
            if include_absent {
                bullets(&ctx.relevance_absent)
            } else {
                "(not provided)".to_string()
            },
        ),
        ("paths", bullets(&ctx.paths)),
        ("label_block", if include_label { label_block(ctx) } else { String::new() }),
    ]
    .into_iter()
    .collect()
}

/// Generation mode (`include_label`) appends the ground-truth block; packaging
/// mode renders no trace of the label. When the user message exceeds
/// `budget` characters, trailing diagnoses are dropped; paths never are.
pub fn render_prompt(
    ctx: &CotContext,
    template: &PromptTemplate,
    include_label: bool,
    include_absent: bool,
    budget: Option<usize>,
) -> Result<Vec<ChatMessage>, PromptError> {
    let mut keep = ctx.codes_present.len();
    loop {
        let mut codes = bullets(&ctx.codes_present[..keep]);
        if keep < ctx.codes_present.len() {
            let omitted = ctx.codes_present.len() - keep;
            codes = if keep == 0 {
                format!("- ({omitted} diagnoses omitted)")
            } else {
                format!("{codes}\n- ({omitted} more diagnoses omitted)")
            };
        }
        let messages = template.render(&vars_for(ctx, codes, include_label, include_absent))?;
        let user_len = messages.last().map_or(0, |m| m.content.chars().count());
        match budget {
            Some(b) if user_len > b && keep > 0 => keep -= 1,
            _ => return Ok(messages),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Kept,
    DroppedMismatch,
    DroppedUnparseable,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub sample_id: String,
    pub case_id: String,
    pub disease_id: String,
    pub messages: Vec<ChatMessage>,
    pub label: u8,
    pub conclusion: Conclusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub sample_id: String,
    pub case_id: String,
    pub disease_id: String,
    pub label: u8,
    pub outcome: Outcome,
    pub conclusion: Option<Conclusion>,
    pub text: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub generated: usize,
    pub kept: usize,
    pub dropped_mismatch: usize,
    pub dropped_unparseable: usize,
    pub failed: usize,
}

impl Counts {
    fn add(&mut self, outcome: Outcome) {
        self.generated += 1;
        match outcome {
            Outcome::Kept => self.kept += 1,
            Outcome::DroppedMismatch => self.dropped_mismatch += 1,
            Outcome::DroppedUnparseable => self.dropped_unparseable += 1,
            Outcome::Failed => self.failed += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotReport {
    #[serde(flatten)]
    pub totals: Counts,
    pub per_disease: BTreeMap<String, Counts>,
}

#[derive(Debug, Clone)]
pub struct CorpusRun {
    pub corpus: Vec<CorpusSample>,
    pub generations: Vec<Generation>,
    pub report: CotReport,
}

pub fn sample_id(case_id: &str, disease_id: &str) -> String {
    format!("{case_id}::{disease_id}")
}

/// Keep a trace iff its parsed conclusion equals the label.
pub fn filter_outcome(conclusion: Conclusion, label: u8) -> Outcome {
    match conclusion.as_label() {
        None => Outcome::DroppedUnparseable,
        Some(y) if y == label => Outcome::Kept,
        Some(_) => Outcome::DroppedMismatch,
    }
}

struct Unit<'a> {
    sample_id: String,
    ctx: CotContext,
    generate: Vec<ChatMessage>,
    package: Vec<ChatMessage>,
    case: &'a IndexCase,
}

pub struct CotInputs<'a> {
    pub cases: &'a [IndexCase],
    pub evidence: &'a [DiseaseEvidence],
    pub mapping: &'a [MappingRecord],
    pub vocab: &'a Vocabulary,
    pub kg: &'a KnowledgeGraph,
}

/// Generate one trace per (case, disease), keep those whose conclusion matches
/// the label, and package kept samples with label-free user messages. Output
/// is ordered by (case_id, disease_id).
pub fn generate_and_filter(
    inputs: &CotInputs<'_>,
    gateway: &Gateway,
    template: &PromptTemplate,
    config: &CotConfig,
) -> Result<CorpusRun, CotError> {
    let code_to_node = code_index(inputs.mapping);
    let mut evidence: Vec<&DiseaseEvidence> = inputs.evidence.iter().collect();
    evidence.sort_by(|a, b| a.disease_id.cmp(&b.disease_id));
    let mut cases: Vec<&IndexCase> = inputs.cases.iter().collect();
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let mut units = Vec::with_capacity(cases.len() * evidence.len());
    for case in &cases {
        for ev in &evidence {
            let ctx = build_context(case, ev, &code_to_node, inputs.vocab, inputs.kg)?;
            let generate = render_prompt(&ctx, template, true, config.include_absent_relevance, config.prompt_char_budget)?;
            let package = render_prompt(&ctx, template, false, config.include_absent_relevance, config.prompt_char_budget)?;
            units.push(Unit {
                sample_id: sample_id(&case.case_id, &ev.disease_id),
                ctx,
                generate,
                package,
                case,
            });
        }
    }

    let replies = fan_out(&units, gateway.max_in_flight(), |u| {
        gateway.chat(&ChatRequest::new("cot_gen", u.generate.clone(), config.temperature))
    });

    let mut run = CorpusRun {
        corpus: Vec::new(),
        generations: Vec::with_capacity(units.len()),
        report: CotReport::default(),
    };
    for (unit, reply) in units.into_iter().zip(replies) {
        let label = unit.ctx.ground_truth;
        let generation = match reply {
            Err(source) => {
                if config.fail_fast {
                    return Err(CotError::Provider {
                        sample_id: unit.sample_id,
                        source,
                    });
                }
                log::warn!("{}: generation failed: {source}", unit.sample_id);
                Generation {
                    sample_id: unit.sample_id.clone(),
                    case_id: unit.case.case_id.clone(),
                    disease_id: unit.ctx.disease_id.clone(),
                    label,
                    outcome: Outcome::Failed,
                    conclusion: None,
                    text: None,
                    error: Some(source.to_string()),
                }
            }
            Ok(resp) => {
                let conclusion = parse_conclusion(&resp.text);
                let outcome = filter_outcome(conclusion, label);
                if outcome == Outcome::Kept {
                    let mut messages = unit.package.clone();
                    messages.push(ChatMessage::assistant(resp.text.clone()));
                    run.corpus.push(CorpusSample {
                        sample_id: unit.sample_id.clone(),
                        case_id: unit.case.case_id.clone(),
                        disease_id: unit.ctx.disease_id.clone(),
                        messages,
                        label,
                        conclusion,
                    });
                }
                Generation {
                    sample_id: unit.sample_id.clone(),
                    case_id: unit.case.case_id.clone(),
                    disease_id: unit.ctx.disease_id.clone(),
                    label,
                    outcome,
                    conclusion: Some(conclusion),
                    text: Some(resp.text),
                    error: None,
                }
            }
        };
        run.report.totals.add(generation.outcome);
        run.report
            .per_disease
            .entry(generation.disease_id.clone())
            .or_default()
            .add(generation.outcome);
        run.generations.push(generation);
    }
    Ok(run)
}

/// True when no user message of the sample mentions the label marker.
pub fn is_label_free(sample: &CorpusSample) -> bool {
    sample
        .messages
        .iter()
        .filter(|m| m.role == Role::User)
        .all(|m| !m.content.contains(LABEL_MARKER))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CotError> {
    let io = |source| CotError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("row serializes");
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}
