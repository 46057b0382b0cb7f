//! Pipeline configuration file (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{AlignConfig, DiseaseTarget};
use crate::cohort::SplitConfig;
use crate::cot::CotConfig;
use crate::evidence::EvidenceConfig;
use crate::kg::ColumnMap;
use crate::llm::ProviderConfig;
use crate::study::StudyConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Input and output locations. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub kg_nodes: Option<PathBuf>,
    pub kg_edges: Option<PathBuf>,
    pub kg_columns: Option<ColumnMap>,
    pub vocab: Option<PathBuf>,
    pub cohort: Option<PathBuf>,
    pub label_map: Option<PathBuf>,
    /// Directory of template overrides.
    pub prompts: Option<PathBuf>,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Parameters {
    pub tau: f64,
    pub candidates: usize,
    pub validate_mappings: bool,
    pub disease_node_type: String,
    pub k_node: usize,
    pub k_path: usize,
    pub max_hops: usize,
    pub max_paths: usize,
    pub directed_paths: bool,
    pub prefilter_top_m: Option<usize>,
    pub test_frac: f64,
    pub train_sizes: Vec<usize>,
    /// Split whose cases receive generated traces; defaults to the largest train split.
    pub cot_split: Option<String>,
    pub cot_temperature: f64,
    pub include_absent_relevance: bool,
    pub fail_fast: bool,
    pub prompt_char_budget: Option<usize>,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for Parameters {
    fn default() -> Self {
        let align = AlignConfig::default();
        let evidence = EvidenceConfig::default();
        let split = SplitConfig::default();
        let cot = CotConfig::default();
        Parameters {
            tau: align.tau,
            candidates: align.candidates,
            validate_mappings: align.validate,
            disease_node_type: align.disease_node_type,
            k_node: evidence.k_node,
            k_path: evidence.k_path,
            max_hops: evidence.max_hops,
            max_paths: evidence.max_paths,
            directed_paths: evidence.directed,
            prefilter_top_m: evidence.prefilter_top_m,
            test_frac: split.test_frac,
            train_sizes: split.train_sizes,
            cot_split: None,
            cot_temperature: cot.temperature,
            include_absent_relevance: cot.include_absent_relevance,
            fail_fast: cot.fail_fast,
            prompt_char_budget: cot.prompt_char_budget,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl Parameters {
    pub fn align(&self) -> AlignConfig {
        AlignConfig {
            tau: self.tau,
            candidates: self.candidates,
            validate: self.validate_mappings,
            disease_node_type: self.disease_node_type.clone(),
        }
    }

    pub fn evidence(&self) -> EvidenceConfig {
        EvidenceConfig {
            k_node: self.k_node,
            k_path: self.k_path,
            max_hops: self.max_hops,
            max_paths: self.max_paths,
            directed: self.directed_paths,
            prefilter_top_m: self.prefilter_top_m,
        }
    }

    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            test_frac: self.test_frac,
            train_sizes: self.train_sizes.clone(),
        }
    }

    pub fn cot(&self) -> CotConfig {
        CotConfig {
            temperature: self.cot_temperature,
            include_absent_relevance: self.include_absent_relevance,
            fail_fast: self.fail_fast,
            prompt_char_budget: self.prompt_char_budget,
        }
    }
}

pub fn default_diseases() -> Vec<DiseaseTarget> {
    [
        ("AMI", "Acute myocardial infarction"),
        ("CKD", "Chronic kidney disease"),
        ("COPD", "Chronic obstructive pulmonary disease"),
        ("CONDUCTION", "Conduction disorders"),
        ("CAD", "Coronary atherosclerosis"),
        ("DM", "Diabetes mellitus (no complication)"),
        ("HTN", "Essential hypertension"),
        ("GIB", "Gastrointestinal hemorrhage"),
        ("PNA", "Pneumonia"),
        ("SHOCK", "Shock"),
    ]
    .into_iter()
    .map(|(id, label)| DiseaseTarget {
        disease_id: id.into(),
        label: label.into(),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub parameters: Parameters,
    pub provider: ProviderConfig,
    pub study: StudyConfig,
    pub diseases: Vec<DiseaseTarget>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths {
                out: PathBuf::from("out"),
                ..Default::default()
            },
            parameters: Parameters::default(),
            provider: ProviderConfig::default(),
            study: StudyConfig::default(),
            diseases: default_diseases(),
        }
    }
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    /// Parse `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: PipelineConfig = serde_json::from_slice(&bytes).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.rebase(base);
        Ok(config)
    }

    pub fn rebase(&mut self, base: &Path) {
        let p = &mut self.paths;
        for field in [
            &mut p.kg_nodes,
            &mut p.kg_edges,
            &mut p.vocab,
            &mut p.cohort,
            &mut p.label_map,
            &mut p.prompts,
            &mut p.cache,
            &mut self.provider.scenario,
            &mut self.provider.cache_dir,
        ] {
            rebase(base, field);
        }
        if p.out.is_relative() {
            p.out = base.join(&p.out);
        }
        if self.provider.cache_dir.is_none() {
            self.provider.cache_dir = p.cache.clone();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let q = &self.parameters;
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(q.tau > -1.0 && q.tau < 1.0) {
            return bad("tau must lie in (-1, 1)");
        }
        if q.candidates == 0 || q.k_node == 0 || q.k_path == 0 || q.max_hops == 0 || q.max_paths == 0 {
            return bad("candidates, k_node, k_path, max_hops and max_paths must be positive");
        }
        if !(0.0..1.0).contains(&q.test_frac) {
            return bad("test_frac must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&q.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        if self.diseases.is_empty() {
            return bad("at least one disease target is required");
        }
        Ok(())
    }

    pub fn require<'a>(&self, field: &'a str, value: &'a Option<PathBuf>) -> Result<&'a Path, ConfigError> {
        value
            .as_deref()
            .ok_or_else(|| ConfigError::Invalid(format!("paths.{field} is not set")))
    }
}
