//! Visit cohorts, adjacent-visit prediction cases, binary features, and seeded splits.

mod splits;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use splits::{make_splits, test_size, CohortSplits, SplitConfig};

#[derive(Debug, thiserror::Error)]
pub enum CohortError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: patient {patient_id:?} has duplicate visit seq {seq}")]
    DuplicateVisit {
        path: PathBuf,
        line: usize,
        patient_id: String,
        seq: u32,
    },
    #[error("target disease list is empty")]
    NoTargets,
    #[error("insufficient cases: {needed} needed ({test} test + {train} largest train set), {available} available")]
    InsufficientCases {
        needed: usize,
        test: usize,
        train: usize,
        available: usize,
    },
    #[error("invalid split configuration: {0}")]
    InvalidSplit(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub patient_id: String,
    pub seq: u32,
    pub codes: BTreeSet<String>,
}

/// One adjacent-visit pair: codes of the earlier visit and next-visit labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexCase {
    pub case_id: String,
    pub patient_id: String,
    pub index_seq: u32,
    pub codes_t: BTreeSet<String>,
    pub labels: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub dims: usize,
    pub on_bits: Vec<usize>,
}

impl FeatureVector {
    pub fn is_set(&self, index: usize) -> bool {
        self.on_bits.binary_search(&index).is_ok()
    }
}

#[derive(Deserialize)]
struct PatientLine {
    patient_id: String,
    visits: Vec<VisitLine>,
}

#[derive(Deserialize)]
struct VisitLine {
    seq: u32,
    codes: Vec<String>,
}

/// Read `cohort.jsonl` (one patient object per line). Visits come back grouped
/// by patient in first-appearance order, each patient's visits sorted by seq.
pub fn load_cohort(path: &Path) -> Result<Vec<Visit>, CohortError> {
    let io = |source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut order: Vec<String> = Vec::new();
    let mut by_patient: HashMap<String, BTreeMap<u32, BTreeSet<String>>> = HashMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientLine = serde_json::from_str(&line).map_err(|e| CohortError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.patient_id.is_empty() {
            return Err(CohortError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: "empty patient_id".into(),
            });
        }
        let visits = by_patient.entry(rec.patient_id.clone()).or_insert_with(|| {
            order.push(rec.patient_id.clone());
            BTreeMap::new()
        });
        for v in rec.visits {
            let codes: BTreeSet<String> = v
                .codes
                .iter()
                .map(|c| c.trim().to_string())
                .filter(|c| !c.is_empty())
                .collect();
            if visits.insert(v.seq, codes).is_some() {
                return Err(CohortError::DuplicateVisit {
                    path: path.to_path_buf(),
                    line: line_no,
                    patient_id: rec.patient_id,
                    seq: v.seq,
                });
            }
        }
    }
    let mut out = Vec::new();
    for patient_id in order {
        for (seq, codes) in by_patient.remove(&patient_id).unwrap_or_default() {
            out.push(Visit {
                patient_id: patient_id.clone(),
                seq,
                codes,
            });
        }
    }
    Ok(out)
}

pub fn case_id(patient_id: &str, index_seq: u32) -> String {
    format!("{patient_id}-v{index_seq}")
}

/// One case per consecutive visit pair (t, t+1) of every patient. `labels[d]`
/// is 1 iff some code of visit t+1 maps to disease `d` under `label_map`.
pub fn build_pairs(
    visits: &[Visit],
    label_map: &HashMap<String, String>,
    targets: &[String],
) -> Result<Vec<IndexCase>, CohortError> {
    if targets.is_empty() {
        return Err(CohortError::NoTargets);
    }
    let mut grouped: Vec<(&str, Vec<&Visit>)> = Vec::new();
    for v in visits {
        match grouped.last_mut() {
            Some((p, vs)) if *p == v.patient_id => vs.push(v),
            _ => grouped.push((&v.patient_id, vec![v])),
        }
    }
    let mut cases = Vec::new();
    for (patient_id, mut vs) in grouped {
        vs.sort_by_key(|v| v.seq);
        for pair in vs.windows(2) {
            let (now, next) = (pair[0], pair[1]);
            let present: HashSet<&str> = next
                .codes
                .iter()
                .filter_map(|c| label_map.get(c).map(String::as_str))
                .collect();
            let labels = targets
                .iter()
                .map(|d| (d.clone(), u8::from(present.contains(d.as_str()))))
                .collect();
            cases.push(IndexCase {
                case_id: case_id(patient_id, now.seq),
                patient_id: patient_id.to_string(),
                index_seq: now.seq,
                codes_t: now.codes.clone(),
                labels,
            });
        }
    }
    Ok(cases)
}

/// Ordered code vocabulary; position defines the feature index.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    entries: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(entries: Vec<(String, String)>) -> Self {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (code, _)) in entries.iter().enumerate() {
            index.entry(code.clone()).or_insert(i);
        }
        Vocabulary { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(|(c, _)| c.as_str())
    }

    pub fn description(&self, code: &str) -> Option<&str> {
        self.index_of(code).map(|i| self.entries[i].1.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

/// Binary feature vector of a case's codes over `vocab`; returns the vector and
/// the number of codes not found in the vocabulary.
pub fn vectorize(case: &IndexCase, vocab: &Vocabulary) -> (FeatureVector, usize) {
    let mut on_bits = Vec::with_capacity(case.codes_t.len());
    let mut unknown = 0;
    for code in &case.codes_t {
        match vocab.index_of(code) {
            Some(i) => on_bits.push(i),
            None => unknown += 1,
        }
    }
    on_bits.sort_unstable();
    on_bits.dedup();
    if unknown > 0 {
        log::debug!("case {}: {unknown} code(s) outside vocabulary", case.case_id);
    }
    (
        FeatureVector {
            dims: vocab.len(),
            on_bits,
        },
        unknown,
    )
}

fn read_two_column_tsv(path: &Path, expected: [&str; 2]) -> Result<Vec<(String, String)>, CohortError> {
    let text = std::fs::read_to_string(path).map_err(|source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let malformed = |line: usize, message: String| CohortError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    match lines.next() {
        Some((_, header)) => {
            let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
            if cols.len() < 2 || cols[0] != expected[0] || cols[1] != expected[1] {
                return Err(malformed(1, format!("expected header {}<TAB>{}", expected[0], expected[1])));
            }
        }
        None => return Err(malformed(1, "empty file".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.splitn(2, '\t');
        let a = cols.next().unwrap_or("").trim();
        let b = cols.next().map(str::trim).unwrap_or("");
        if a.is_empty() || b.is_empty() {
            return Err(malformed(i + 1, "expected two non-empty tab-separated columns".into()));
        }
        out.push((a.to_string(), b.to_string()));
    }
    Ok(out)
}

/// Read `vocab.tsv` (`code<TAB>description`).
pub fn load_vocab(path: &Path) -> Result<Vocabulary, CohortError> {
    read_two_column_tsv(path, ["code", "description"]).map(Vocabulary::new)
}

/// Read `label_map.tsv` (`code<TAB>disease_id`).
pub fn load_label_map(path: &Path) -> Result<HashMap<String, String>, CohortError> {
    Ok(read_two_column_tsv(path, ["code", "disease_id"])?.into_iter().collect())
}
