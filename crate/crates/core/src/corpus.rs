//! Case ingestion, label spaces, splits and precedent grouping.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fol_rules::{Consequent, TargetKind};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("duplicate case_id {case_id} at line {line}")]
    DuplicateCaseId { case_id: String, line: usize },
    #[error("need at least 3 cases to split, got {0}")]
    TooFewCases(usize),
    #[error("split ratios must be non-negative and sum to 1 (got {0:?})")]
    BadRatios([f64; 3]),
    #[error("fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
}

/// Gold label triple.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Judgment {
    pub article: String,
    pub charge: String,
    pub prison_term: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegalCase {
    pub case_id: String,
    pub fact_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgment: Option<Judgment>,
    /// Character count of `fact_text`.
    pub fact_length: usize,
}

impl LegalCase {
    pub fn new(case_id: impl Into<String>, fact_text: impl Into<String>, judgment: Option<Judgment>) -> Self {
        let fact_text = fact_text.into();
        LegalCase { case_id: case_id.into(), fact_length: fact_text.chars().count(), fact_text, judgment }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub articles: Vec<String>,
    pub charges: Vec<String>,
    pub prison_terms: Vec<String>,
}

impl LabelSpace {
    pub fn contains(&self, judgment: &Judgment) -> bool {
        self.articles.contains(&judgment.article)
            && self.charges.contains(&judgment.charge)
            && self.prison_terms.contains(&judgment.prison_term)
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty() && self.charges.is_empty() && self.prison_terms.is_empty()
    }
}

/// Maps a prison-term value in months onto ordinal bucket labels `"0".."n"`.
/// `upper_bounds` are inclusive month limits; values above the last bound fall
/// into the final bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermBuckets {
    pub upper_bounds: Vec<f64>,
}

impl TermBuckets {
    pub fn bucket(&self, months: f64) -> String {
        let idx = self.upper_bounds.iter().position(|b| months <= *b).unwrap_or(self.upper_bounds.len());
        idx.to_string()
    }
}

/// Dotted JSON paths for each field of a record. Defaults follow CAIL2018 naming.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMapping {
    pub case_id: String,
    pub fact: String,
    pub article: String,
    pub charge: String,
    pub prison_term: String,
    /// Used only when the prison-term field is numeric.
    pub term_buckets: Option<TermBuckets>,
}

impl Default for FieldMapping {
    fn default() -> Self {
        FieldMapping {
            case_id: "case_id".into(),
            fact: "fact".into(),
            article: "meta.relevant_articles".into(),
            charge: "meta.accusation".into(),
            prison_term: "meta.term_of_imprisonment.imprisonment".into(),
            term_buckets: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub cases: Vec<LegalCase>,
    pub rejects: Vec<Reject>,
}

fn lookup<'a>(record: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(record, |v, key| v.get(key))
}

/// Scalars pass through; arrays contribute their first element (CAIL stores
/// articles and accusations as lists).
fn scalar_label(v: &Value) -> Option<Value> {
    match v {
        Value::Array(items) => items.first().and_then(scalar_label),
        Value::String(s) if s.trim().is_empty() => None,
        Value::String(_) | Value::Number(_) | Value::Bool(_) => Some(v.clone()),
        _ => None,
    }
}

fn label_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.trim().to_string(),
        other => other.to_string(),
    }
}

fn parse_record(line_no: usize, raw: &str, schema: &FieldMapping) -> Result<LegalCase, String> {
    let record: Value = serde_json::from_str(raw).map_err(|e| format!("malformed JSON: {e}"))?;
    if !record.is_object() {
        return Err("record is not a JSON object".into());
    }
    let fact = match lookup(&record, &schema.fact) {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::String(_)) => return Err("empty fact text".into()),
        Some(_) => return Err(format!("field {} is not a string", schema.fact)),
        None => return Err(format!("missing field {}", schema.fact)),
    };
    let case_id = match lookup(&record, &schema.case_id) {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(format!("field {} is not a usable id", schema.case_id)),
        None => format!("line-{line_no}"),
    };

    let article = lookup(&record, &schema.article).and_then(scalar_label);
    let charge = lookup(&record, &schema.charge).and_then(scalar_label);
    let term = lookup(&record, &schema.prison_term).and_then(scalar_label);
    let judgment = match (article, charge, term) {
        (None, None, None) => None,
        (Some(a), Some(c), Some(t)) => {
            let prison_term = match (&t, &schema.term_buckets) {
                (Value::Number(n), Some(buckets)) => buckets.bucket(n.as_f64().unwrap_or(0.0)),
                _ => label_text(&t),
            };
            Some(Judgment { article: label_text(&a), charge: label_text(&c), prison_term })
        }
        (a, c, t) => {
            let missing: Vec<&str> = [(a.is_none(), "article"), (c.is_none(), "charge"), (t.is_none(), "prison_term")]
                .into_iter()
                .filter_map(|(m, n)| m.then_some(n))
                .collect();
            return Err(format!("incomplete judgment: missing {}", missing.join(", ")));
        }
    };
    Ok(LegalCase::new(case_id, fact, judgment))
}

/// Parses line-delimited JSON from a string. Blank lines are ignored; a bad
/// line becomes a [`Reject`]; a repeated case id is fatal.
pub fn parse_cases(text: &str, schema: &FieldMapping) -> Result<LoadReport, CorpusError> {
    let mut report = LoadReport::default();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        match parse_record(line, raw, schema) {
            Ok(case) => {
                if !seen.insert(case.case_id.clone()) {
                    return Err(CorpusError::DuplicateCaseId { case_id: case.case_id, line });
                }
                report.cases.push(case);
            }
            Err(reason) => report.rejects.push(Reject { line, reason }),
        }
    }
    Ok(report)
}

pub fn load_cases(path: &Path, schema: &FieldMapping) -> Result<LoadReport, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    parse_cases(&text, schema)
}

/// One `{line, reason}` object per line.
pub fn write_rejects(path: &Path, rejects: &[Reject]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rejects {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LegalCase>,
    pub validation: Vec<LegalCase>,
    pub test: Vec<LegalCase>,
}

/// Floor allocation of validation and test sizes; train absorbs the remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    // Slack absorbs binary rounding such as 0.29 * 100 = 28.999...
    let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let validation = floor(ratios[1]);
    let test = floor(ratios[2]);
    (n - validation - test, validation, test)
}

/// Seeded shuffle, then floor-allocated partition. Within each part the
/// original input order is kept.
pub fn split_dataset(cases: &[LegalCase], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit, CorpusError> {
    if cases.len() < 3 {
        return Err(CorpusError::TooFewCases(cases.len()));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let (n_train, n_val, _) = split_sizes(cases.len(), ratios);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let part = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| cases[i].clone()).collect::<Vec<_>>()
    };
    let train = part(0..n_train);
    let validation = part(n_train..n_train + n_val);
    let test = part(n_train + n_val..cases.len());
    Ok(DatasetSplit { train, validation, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecedentMode {
    ArticleCharge,
    ArticlePrisonTerm,
}

impl PrecedentMode {
    pub fn target_kind(self) -> TargetKind {
        match self {
            PrecedentMode::ArticleCharge => TargetKind::ArticleCharge,
            PrecedentMode::ArticlePrisonTerm => TargetKind::ArticlePrisonTerm,
        }
    }
}

/// Groups cases by label combination, keeping the first `k` of each group in
/// input order. Cases without a judgment are ignored.
pub fn group_precedents(
    cases: &[LegalCase],
    mode: PrecedentMode,
    k: usize,
) -> BTreeMap<Consequent, Vec<LegalCase>> {
    let mut groups: BTreeMap<Consequent, Vec<LegalCase>> = BTreeMap::new();
    for case in cases {
        let Some(j) = &case.judgment else { continue };
        let members = groups.entry(Consequent::project(mode.target_kind(), j)).or_default();
        if members.len() < k {
            members.push(case.clone());
        }
    }
    groups.retain(|_, v| !v.is_empty());
    groups
}

/// The `ceil(fraction * n)` longest cases; equal lengths are ordered by case id.
pub fn long_subset(cases: &[LegalCase], fraction: f64) -> Result<Vec<LegalCase>, CorpusError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let take = ((fraction * cases.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut sorted: Vec<&LegalCase> = cases.iter().collect();
    sorted.sort_by(|a, b| b.fact_length.cmp(&a.fact_length).then_with(|| a.case_id.cmp(&b.case_id)));
    Ok(sorted.into_iter().take(take).cloned().collect())
}

/// Label lists in first-appearance order.
pub fn label_space(cases: &[LegalCase]) -> LabelSpace {
    let mut space = LabelSpace::default();
    for j in cases.iter().filter_map(|c| c.judgment.as_ref()) {
        for (list, value) in [
            (&mut space.articles, &j.article),
            (&mut space.charges, &j.charge),
            (&mut space.prison_terms, &j.prison_term),
        ] {
            if !list.contains(value) {
                list.push(value.clone());
            }
        }
    }
    space
}

/// Distinct label combinations of `kind`, sorted.
pub fn target_pool(cases: &[LegalCase], kind: TargetKind) -> Vec<Consequent> {
    let mut pool: Vec<Consequent> = cases
        .iter()
        .filter_map(|c| c.judgment.as_ref())
        .map(|j| Consequent::project(kind, j))
        .collect();
    pool.sort();
    pool.dedup();
    pool
}
