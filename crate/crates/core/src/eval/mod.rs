//! Discrimination metrics over prediction files.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cot::{parse_conclusion, Conclusion};
use crate::llm::TokenScore;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("duplicate prediction for {case_id}/{disease_id}")]
    Duplicate { case_id: String, disease_id: String },
    #[error("no label for {case_id}/{disease_id}")]
    MissingLabel { case_id: String, disease_id: String },
    #[error("{path} line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub disease_id: String,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
    /// How `probability` was obtained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<ProbabilityMethod>,
}

fn check_len(scores: &[f64], labels: &[u8]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Indices grouped by equal score, highest score first.
fn descending_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` when either class is empty.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>, EvalError> {
    check_len(scores, labels)?;
    let p = labels.iter().filter(|&&y| y == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Ok(None);
    }
    // Walk from the lowest score up, counting negatives already passed.
    let mut concordant = 0.0;
    let mut negatives_below = 0usize;
    for group in descending_groups(scores).into_iter().rev() {
        let pos = group.iter().filter(|&&i| labels[i] == 1).count();
        let neg = group.len() - pos;
        concordant += pos as f64 * negatives_below as f64 + 0.5 * (pos * neg) as f64;
        negatives_below += neg;
    }
    Ok(Some(concordant / (p as f64 * n as f64)))
}

/// Average precision: Σ (R_k − R_{k−1}) · P_k over descending unique
/// thresholds. `None` without positives.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Result<Option<f64>, EvalError> {
    check_len(scores, labels)?;
    let p = labels.iter().filter(|&&y| y == 1).count();
    if p == 0 {
        return Ok(None);
    }
    let (mut tp, mut seen, mut prev_recall, mut area) = (0usize, 0usize, 0.0, 0.0);
    for group in descending_groups(scores) {
        seen += group.len();
        tp += group.iter().filter(|&&i| labels[i] == 1).count();
        let recall = tp as f64 / p as f64;
        area += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(Some(area))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseMetrics {
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub f1: f64,
    pub support_pos: usize,
    pub support_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub accuracy: Option<f64>,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub f1: Option<f64>,
    /// Diseases left out of the AUROC mean (single-class labels).
    pub auroc_undefined: Vec<String>,
    /// Diseases left out of the AUPR mean (no positives).
    pub aupr_undefined: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub per_disease: BTreeMap<String, DiseaseMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn f1_score(predicted: &[bool], labels: &[u8]) -> f64 {
    let tp = predicted.iter().zip(labels).filter(|(p, y)| **p && **y == 1).count() as f64;
    let fp = predicted.iter().zip(labels).filter(|(p, y)| **p && **y == 0).count() as f64;
    let fn_ = predicted.iter().zip(labels).filter(|(p, y)| !**p && **y == 1).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-disease and macro metrics. Records are classified by their explicit
/// verdict when present, else by `probability >= threshold`.
pub fn classify_and_score(
    records: &[PredictionRecord],
    labels: &HashMap<(String, String), u8>,
    threshold: f64,
) -> Result<MetricReport, EvalError> {
    let mut by_disease: BTreeMap<&str, Vec<(&PredictionRecord, u8)>> = BTreeMap::new();
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert((r.case_id.as_str(), r.disease_id.as_str())) {
            return Err(EvalError::Duplicate {
                case_id: r.case_id.clone(),
                disease_id: r.disease_id.clone(),
            });
        }
        let y = *labels
            .get(&(r.case_id.clone(), r.disease_id.clone()))
            .ok_or_else(|| EvalError::MissingLabel {
                case_id: r.case_id.clone(),
                disease_id: r.disease_id.clone(),
            })?;
        by_disease.entry(&r.disease_id).or_default().push((r, y));
    }
    let mut per_disease = BTreeMap::new();
    for (disease, mut rows) in by_disease {
        // Metric values must not depend on record order.
        rows.sort_by(|a, b| a.0.case_id.cmp(&b.0.case_id));
        let scores: Vec<f64> = rows.iter().map(|(r, _)| r.probability).collect();
        let ys: Vec<u8> = rows.iter().map(|(_, y)| *y).collect();
        let predicted: Vec<bool> = rows
            .iter()
            .map(|(r, _)| match r.verdict {
                Some(v) => v == Verdict::Yes,
                None => r.probability >= threshold,
            })
            .collect();
        let correct = predicted.iter().zip(&ys).filter(|(p, y)| **p == (**y == 1)).count();
        let support_pos = ys.iter().filter(|&&y| y == 1).count();
        per_disease.insert(
            disease.to_string(),
            DiseaseMetrics {
                accuracy: correct as f64 / ys.len() as f64,
                auroc: auroc(&scores, &ys)?,
                aupr: aupr(&scores, &ys)?,
                f1: f1_score(&predicted, &ys),
                support_pos,
                support_neg: ys.len() - support_pos,
            },
        );
    }
    let undefined = |f: fn(&DiseaseMetrics) -> Option<f64>| {
        per_disease
            .iter()
            .filter(|(_, m)| f(m).is_none())
            .map(|(d, _)| d.clone())
            .collect::<Vec<_>>()
    };
    let macro_avg = MacroMetrics {
        accuracy: mean(per_disease.values().map(|m| m.accuracy)),
        auroc: mean(per_disease.values().filter_map(|m| m.auroc)),
        aupr: mean(per_disease.values().filter_map(|m| m.aupr)),
        f1: mean(per_disease.values().map(|m| m.f1)),
        auroc_undefined: undefined(|m| m.auroc),
        aupr_undefined: undefined(|m| m.aupr),
    };
    Ok(MetricReport {
        threshold,
        per_disease,
        macro_avg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityMethod {
    Logprob,
    Verdict,
    Unparseable,
}

fn clean_token(t: &str) -> String {
    t.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase()
}

/// Yes/no log-probabilities at the last position whose token is yes or no.
fn conclusion_logprobs(scores: &[TokenScore]) -> Option<(f64, f64)> {
    let pos = scores.iter().rposition(|s| matches!(clean_token(&s.token).as_str(), "yes" | "no"))?;
    let at = &scores[pos];
    let lookup = |word: &str| {
        let mut lp = f64::NEG_INFINITY;
        if clean_token(&at.token) == word {
            lp = at.logprob;
        }
        for alt in &at.top {
            if clean_token(&alt.token) == word {
                lp = lp.max(alt.logprob);
            }
        }
        lp
    };
    Some((lookup("yes"), lookup("no")))
}

/// Probability of "yes" from conclusion-token log-probabilities when the
/// provider exposes them, else 1 / 0 / 0.5 from the parsed conclusion.
pub fn derive_probability(text: &str, token_scores: Option<&[TokenScore]>) -> (f64, Option<Verdict>, ProbabilityMethod) {
    let verdict = match parse_conclusion(text) {
        Conclusion::Yes => Some(Verdict::Yes),
        Conclusion::No => Some(Verdict::No),
        Conclusion::Unparseable => None,
    };
    if let Some((yes, no)) = token_scores.and_then(conclusion_logprobs) {
        if yes.is_finite() || no.is_finite() {
            let p = if yes == f64::NEG_INFINITY {
                0.0
            } else {
                1.0 / (1.0 + (no - yes).exp())
            };
            return (p, verdict, ProbabilityMethod::Logprob);
        }
    }
    match verdict {
        Some(Verdict::Yes) => (1.0, verdict, ProbabilityMethod::Verdict),
        Some(Verdict::No) => (0.0, verdict, ProbabilityMethod::Verdict),
        None => (0.5, None, ProbabilityMethod::Unparseable),
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let malformed = |message: String| EvalError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| malformed(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if !(0.0..=1.0).contains(&r.probability) {
            return Err(malformed(format!("probability {} outside [0, 1]", r.probability)));
        }
        out.push(r);
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per disease plus a `macro` row; undefined values are empty cells.
pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<(), EvalError> {
    let io = |e: csv::Error| EvalError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["disease_id", "accuracy", "auroc", "aupr", "f1", "support_pos", "support_neg"])
        .map_err(io)?;
    for (d, m) in &report.per_disease {
        w.write_record([
            d.clone(),
            cell(Some(m.accuracy)),
            cell(m.auroc),
            cell(m.aupr),
            cell(Some(m.f1)),
            m.support_pos.to_string(),
            m.support_neg.to_string(),
        ])
        .map_err(io)?;
    }
    let m = &report.macro_avg;
    let (pos, neg) = report
        .per_disease
        .values()
        .fold((0, 0), |(p, n), d| (p + d.support_pos, n + d.support_neg));
    w.write_record([
        "macro".to_string(),
        cell(m.accuracy),
        cell(m.auroc),
        cell(m.aupr),
        cell(m.f1),
        pos.to_string(),
        neg.to_string(),
    ])
    .map_err(io)?;
    w.flush().map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
