//! Stage orchestration over an output directory.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::align::{self, AlignError, Alignment, AlignmentSummary, ConceptEntry, MappingRecord};
use crate::cohort::{self, CohortError, CohortSplits, IndexCase, Vocabulary};
use crate::config::{ConfigError, PipelineConfig};
use crate::cot::{self, CorpusRun, CotError, CotInputs};
use crate::eval::{self, EvalError, MetricReport, PredictionRecord};
use crate::evidence::{self, DiseaseEvidence, EvidenceError};
use crate::kg::{self, KgError, KnowledgeGraph};
use crate::llm::{fan_out, ChatRequest, Gateway, LlmError};
use crate::prompts::{PromptError, PromptSet, TemplateName};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Cot(#[from] CotError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("missing {path}; run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid artifact {path}: {message}")]
    Artifact { path: PathBuf, message: String },
}

fn is_provider(e: &LlmError) -> bool {
    !matches!(e, LlmError::Config(_) | LlmError::Cache { .. })
}

impl PipelineError {
    /// 2 for provider failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        let provider = match self {
            PipelineError::Llm(e) | PipelineError::Align(AlignError::Llm(e)) => is_provider(e),
            PipelineError::Evidence(EvidenceError::Llm { source, .. }) => is_provider(source),
            PipelineError::Cot(CotError::Provider { source, .. }) => is_provider(source),
            _ => false,
        };
        if provider {
            2
        } else {
            1
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut body = serde_json::to_string_pretty(value).expect("artifact serializes");
    body.push('\n');
    std::fs::write(path, body).map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<T, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        });
    }
    let bytes = std::fs::read(path).map_err(io(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, stage: &'static str) -> Result<Vec<T>, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        });
    }
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Artifact {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub visits: usize,
    pub cases: usize,
    pub splits: BTreeMap<String, usize>,
    pub positives: BTreeMap<String, usize>,
    pub vocabulary: usize,
    pub out_of_vocabulary_codes: usize,
}

#[derive(Debug, Clone)]
pub struct CohortArtifacts {
    pub cases: Vec<IndexCase>,
    pub splits: CohortSplits,
}

impl CohortArtifacts {
    pub fn split_cases(&self, name: &str) -> Result<Vec<IndexCase>, PipelineError> {
        let ids = self.splits.get(name).ok_or_else(|| {
            PipelineError::Config(ConfigError::Invalid(format!(
                "unknown split {name:?}; available: {}",
                self.splits.names().join(", ")
            )))
        })?;
        let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        Ok(self
            .cases
            .iter()
            .filter(|c| wanted.contains(c.case_id.as_str()))
            .cloned()
            .collect())
    }

    pub fn labels(&self) -> HashMap<(String, String), u8> {
        self.cases
            .iter()
            .flat_map(|c| c.labels.iter().map(|(d, y)| ((c.case_id.clone(), d.clone()), *y)))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub mapping: align::StageCounts,
    pub evidence_files: usize,
    pub cohort: CohortSummary,
    pub corpus: cot::CotReport,
    pub metrics: MetricReport,
}

pub struct Pipeline {
    config: PipelineConfig,
    prompts: PromptSet,
    gateway: OnceLock<Gateway>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let prompts = PromptSet::load(config.paths.prompts.as_deref())?;
        Ok(Pipeline {
            config,
            prompts,
            gateway: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn out(&self) -> &Path {
        &self.config.paths.out
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out().join(name)
    }

    /// Provider gateway, built on first use.
    pub fn gateway(&self) -> Result<&Gateway, PipelineError> {
        if let Some(g) = self.gateway.get() {
            return Ok(g);
        }
        let g = Gateway::from_config(&self.config.provider)?;
        Ok(self.gateway.get_or_init(|| g))
    }

    /// Echo every effective parameter and template version.
    pub fn write_resolved_config(&self) -> Result<PathBuf, PipelineError> {
        #[derive(Serialize)]
        struct Resolved<'a> {
            version: &'static str,
            #[serde(flatten)]
            config: &'a PipelineConfig,
            templates: BTreeMap<&'static str, String>,
        }
        let path = self.artifact("resolved-config.json");
        write_json(
            &path,
            &Resolved {
                version: env!("CARGO_PKG_VERSION"),
                config: &self.config,
                templates: self.prompts.versions(),
            },
        )?;
        Ok(path)
    }

    pub fn write_provider_stats(&self) -> Result<(), PipelineError> {
        if let Some(g) = self.gateway.get() {
            let s = g.stats();
            log::info!(
                "provider calls: {} chat ({} cached), {} embed ({} cached)",
                s.chat_calls,
                s.chat_cache_hits,
                s.embed_calls,
                s.embed_cache_hits
            );
            write_json(&self.artifact("provider-stats.json"), &s)?;
        }
        Ok(())
    }

    pub fn load_kg(&self) -> Result<KnowledgeGraph, PipelineError> {
        let p = &self.config.paths;
        let nodes = self.config.require("kg_nodes", &p.kg_nodes)?;
        let edges = self.config.require("kg_edges", &p.kg_edges)?;
        let (kg, report) = kg::load_graph(nodes, edges, p.kg_columns.as_ref())?;
        log::info!(
            "loaded KG: {} nodes, {} edges ({} duplicate edges dropped)",
            report.nodes,
            report.edges,
            report.duplicate_edges_dropped
        );
        Ok(kg)
    }

    pub fn load_vocab(&self) -> Result<Vocabulary, PipelineError> {
        Ok(cohort::load_vocab(self.config.require("vocab", &self.config.paths.vocab)?)?)
    }

    pub fn map_entities(&self, kg: &KnowledgeGraph) -> Result<Alignment, PipelineError> {
        let vocab = self.load_vocab()?;
        let entries: Vec<ConceptEntry> = vocab
            .entries()
            .iter()
            .map(|(code, description)| ConceptEntry {
                code: code.clone(),
                description: description.clone(),
            })
            .collect();
        let alignment = align::run_alignment(
            &entries,
            &self.config.diseases,
            kg,
            self.gateway()?,
            &self.prompts,
            &self.config.parameters.align(),
        )?;
        std::fs::create_dir_all(self.out()).map_err(io(self.out()))?;
        align::write_mapping(&self.artifact("mapping.jsonl"), &alignment.records)?;
        write_json(&self.artifact("alignment_summary.json"), &alignment.summary)?;
        let s = &alignment.summary.stages;
        log::info!(
            "mapped {} codes: {} exact, {} similarity, {} validated, {} revised, {} rejected",
            s.total,
            s.exact,
            s.similarity,
            s.llm_validated,
            s.llm_revised,
            s.rejected
        );
        Ok(alignment)
    }

    pub fn load_alignment(&self) -> Result<(Vec<MappingRecord>, AlignmentSummary), PipelineError> {
        let mapping_path = self.artifact("mapping.jsonl");
        if !mapping_path.exists() {
            return Err(PipelineError::MissingArtifact {
                path: mapping_path,
                stage: "map-entities",
            });
        }
        let mapping = align::read_mapping(&mapping_path)?;
        let summary = read_json(&self.artifact("alignment_summary.json"), "map-entities")?;
        Ok((mapping, summary))
    }

    /// Evidence for every target, mined concurrently, written one file per disease.
    pub fn mine_evidence(
        &self,
        kg: &KnowledgeGraph,
        mapping: &[MappingRecord],
        summary: &AlignmentSummary,
    ) -> Result<Vec<DiseaseEvidence>, PipelineError> {
        let gateway = self.gateway()?;
        let config = self.config.parameters.evidence();
        let results = fan_out(&summary.diseases, gateway.max_in_flight(), |d| {
            evidence::build_evidence(d, mapping, kg, gateway, &self.prompts, &config)
        });
        let dir = self.artifact("evidence");
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            let ev = r?;
            evidence::write_evidence(&dir, &ev)?;
            log::info!(
                "{}: {} relevance nodes, {} paths{}",
                ev.disease_id,
                ev.relevance.len(),
                ev.paths.len(),
                if ev.flags.is_empty() { String::new() } else { format!(", flags {:?}", ev.flags) }
            );
            out.push(ev);
        }
        Ok(out)
    }

    pub fn load_evidence(&self) -> Result<Vec<DiseaseEvidence>, PipelineError> {
        let dir = self.artifact("evidence");
        self.config
            .diseases
            .iter()
            .map(|d| {
                let path = evidence::evidence_path(&dir, &d.disease_id);
                if !path.exists() {
                    return Err(PipelineError::MissingArtifact {
                        path,
                        stage: "mine-evidence",
                    });
                }
                Ok(evidence::read_evidence(&dir, &d.disease_id)?)
            })
            .collect()
    }

    pub fn build_cohort(&self) -> Result<(CohortArtifacts, CohortSummary), PipelineError> {
        let p = &self.config.paths;
        let visits = cohort::load_cohort(self.config.require("cohort", &p.cohort)?)?;
        let label_map = cohort::load_label_map(self.config.require("label_map", &p.label_map)?)?;
        let vocab = self.load_vocab()?;
        let targets: Vec<String> = self.config.diseases.iter().map(|d| d.disease_id.clone()).collect();
        let cases = cohort::build_pairs(&visits, &label_map, &targets)?;
        let splits = cohort::make_splits(&cases, self.config.parameters.seed, &self.config.parameters.split())?;
        let out_of_vocabulary_codes = cases.iter().map(|c| cohort::vectorize(c, &vocab).1).sum();
        let summary = CohortSummary {
            patients: visits
                .iter()
                .map(|v| v.patient_id.as_str())
                .collect::<std::collections::BTreeSet<_>>()
                .len(),
            visits: visits.len(),
            cases: cases.len(),
            splits: splits
                .names()
                .into_iter()
                .map(|n| {
                    let len = splits.get(&n).map_or(0, <[String]>::len);
                    (n, len)
                })
                .collect(),
            positives: targets
                .iter()
                .map(|d| (d.clone(), cases.iter().filter(|c| c.labels.get(d) == Some(&1)).count()))
                .collect(),
            vocabulary: vocab.len(),
            out_of_vocabulary_codes,
        };
        let dir = self.artifact("cohort");
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        cot::write_jsonl(&dir.join("cases.jsonl"), &cases)?;
        write_json(&dir.join("splits.json"), &splits)?;
        write_json(&dir.join("summary.json"), &summary)?;
        log::info!("cohort: {} cases, splits {:?}", summary.cases, summary.splits);
        Ok((CohortArtifacts { cases, splits }, summary))
    }

    pub fn load_cohort(&self) -> Result<CohortArtifacts, PipelineError> {
        let dir = self.artifact("cohort");
        Ok(CohortArtifacts {
            cases: read_jsonl(&dir.join("cases.jsonl"), "build-cohort")?,
            splits: read_json(&dir.join("splits.json"), "build-cohort")?,
        })
    }

    fn cot_split(&self, cohort: &CohortArtifacts) -> Result<String, PipelineError> {
        match &self.config.parameters.cot_split {
            Some(s) => Ok(s.clone()),
            None => cohort.splits.largest_train().ok_or_else(|| {
                PipelineError::Config(ConfigError::Invalid("no training split to generate traces for".into()))
            }),
        }
    }

    pub fn gen_cot(
        &self,
        kg: &KnowledgeGraph,
        mapping: &[MappingRecord],
        evidence: &[DiseaseEvidence],
        cohort: &CohortArtifacts,
    ) -> Result<CorpusRun, PipelineError> {
        let split = self.cot_split(cohort)?;
        let cases = cohort.split_cases(&split)?;
        let vocab = self.load_vocab()?;
        let run = cot::generate_and_filter(
            &CotInputs {
                cases: &cases,
                evidence,
                mapping,
                vocab: &vocab,
                kg,
            },
            self.gateway()?,
            self.prompts.get(TemplateName::CotGen),
            &self.config.parameters.cot(),
        )?;
        cot::write_jsonl(&self.artifact("corpus.jsonl"), &run.corpus)?;
        // Nested training splits get their own corpus subsets.
        for name in cohort.splits.train.keys().map(|k| format!("train_{k}")) {
            if name == split {
                continue;
            }
            if let Some(ids) = cohort.splits.get(&name) {
                let ids: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
                let subset: Vec<_> = run.corpus.iter().filter(|s| ids.contains(s.case_id.as_str())).cloned().collect();
                cot::write_jsonl(&self.artifact(&format!("corpus_{name}.jsonl")), &subset)?;
            }
        }
        cot::write_jsonl(&self.artifact("generations.jsonl"), &run.generations)?;
        write_json(&self.artifact("report.json"), &run.report)?;
        let t = &run.report.totals;
        log::info!(
            "generated {} traces on {split}: {} kept, {} mismatched, {} unparseable, {} failed",
            t.generated,
            t.kept,
            t.dropped_mismatch,
            t.dropped_unparseable,
            t.failed
        );
        Ok(run)
    }

    /// Label-free prompts for `split` cases answered through the provider.
    pub fn predict(
        &self,
        kg: &KnowledgeGraph,
        mapping: &[MappingRecord],
        evidence: &[DiseaseEvidence],
        cohort: &CohortArtifacts,
        split: &str,
    ) -> Result<Vec<PredictionRecord>, PipelineError> {
        let gateway = self.gateway()?;
        let vocab = self.load_vocab()?;
        let code_to_node = cot::code_index(mapping);
        let params = self.config.parameters.cot();
        let template = self.prompts.get(TemplateName::CotGen);
        let mut cases = cohort.split_cases(split)?;
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let mut evidence: Vec<&DiseaseEvidence> = evidence.iter().collect();
        evidence.sort_by(|a, b| a.disease_id.cmp(&b.disease_id));
        let mut units = Vec::new();
        for case in &cases {
            for ev in &evidence {
                let ctx = cot::build_context(case, ev, &code_to_node, &vocab, kg)?;
                let messages = cot::render_prompt(&ctx, template, false, params.include_absent_relevance, params.prompt_char_budget)?;
                units.push((case.case_id.clone(), ev.disease_id.clone(), messages));
            }
        }
        let replies = fan_out(&units, gateway.max_in_flight(), |(_, _, messages)| {
            gateway.chat(&ChatRequest::new("predict", messages.clone(), 0.0))
        });
        let mut out = Vec::with_capacity(units.len());
        for ((case_id, disease_id, _), reply) in units.into_iter().zip(replies) {
            let reply = reply?;
            let (probability, verdict, method) = eval::derive_probability(&reply.text, reply.token_scores.as_deref());
            out.push(PredictionRecord {
                case_id,
                disease_id,
                probability,
                verdict,
                trace: Some(reply.text),
                method: Some(method),
            });
        }
        cot::write_jsonl(&self.artifact("predictions.jsonl"), &out)?;
        Ok(out)
    }

    pub fn evaluate(&self, predictions: &Path, cohort: &CohortArtifacts) -> Result<MetricReport, PipelineError> {
        let records = eval::read_predictions(predictions)?;
        let report = eval::classify_and_score(&records, &cohort.labels(), self.config.parameters.threshold)?;
        write_json(&self.artifact("metrics.json"), &report)?;
        eval::write_metrics_csv(&self.artifact("metrics.csv"), &report)?;
        let m = &report.macro_avg;
        log::info!(
            "macro: accuracy {:?}, AUROC {:?}, AUPR {:?}, F1 {:?}",
            m.accuracy,
            m.auroc,
            m.aupr,
            m.f1
        );
        Ok(report)
    }

    /// Every stage in order: mapping, evidence, cohort, traces, test-split
    /// predictions, metrics.
    pub fn run_all(&self) -> Result<RunSummary, PipelineError> {
        self.write_resolved_config()?;
        let kg = self.load_kg()?;
        let alignment = self.map_entities(&kg)?;
        let evidence = self.mine_evidence(&kg, &alignment.records, &alignment.summary)?;
        let (cohort, cohort_summary) = self.build_cohort()?;
        let run = self.gen_cot(&kg, &alignment.records, &evidence, &cohort)?;
        self.predict(&kg, &alignment.records, &evidence, &cohort, "test")?;
        let metrics = self.evaluate(&self.artifact("predictions.jsonl"), &cohort)?;
        self.write_provider_stats()?;
        Ok(RunSummary {
            mapping: alignment.summary.stages,
            evidence_files: evidence.len(),
            cohort: cohort_summary,
            corpus: run.report,
            metrics,
        })
    }
}
