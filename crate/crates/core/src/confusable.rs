//! Confusable-case sets: positives for a target label plus their most similar
//! other-label cases, mined by cosine similarity over fact embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::LegalCase;
use crate::exec::Executor;
use crate::fol_rules::Consequent;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding failed for case {case_id}: {message}")]
    Provider { case_id: String, message: String },
    #[error("embedding matrix: {0}")]
    Shape(String),
    #[error("zero-norm embedding for case {0}")]
    ZeroRow(String),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("confusable set for {target}: {reason}")]
    BadInput { target: String, reason: String },
}

pub trait EmbeddingBackend: Send + Sync {
    fn identity(&self) -> String;
    fn embed(&self, case_id: &str, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Deterministic offline embedder: lower-cased character 1..=3-grams hashed
/// (FNV-1a) into `dim` count buckets, then L2-normalized.
#[derive(Clone, Debug)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: 256 }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character n-grams of `text` for `n` in `1..=max_n`, as byte-hashes.
pub(crate) fn char_ngram_hashes(text: &str, max_n: usize, mut sink: impl FnMut(u64)) {
    let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut buf = String::new();
    for n in 1..=max_n {
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window);
            // Mix n into the hash so "a" and "aa" land independently.
            let mut h = fnv1a(buf.as_bytes());
            h ^= n as u64;
            sink(h.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
    }
}

impl EmbeddingBackend for HashingEmbedder {
    fn identity(&self) -> String {
        format!("hashing-ngram-embedder:d={}", self.dim)
    }

    fn embed(&self, case_id: &str, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut v = vec![0.0; self.dim];
        char_ngram_hashes(text, 3, |h| v[(h % self.dim as u64) as usize] += 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::ZeroRow(case_id.to_string()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    case_ids: Vec<String>,
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn new(case_ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, EmbedError> {
        if case_ids.len() != rows.len() {
            return Err(EmbedError::Shape(format!("{} ids for {} rows", case_ids.len(), rows.len())));
        }
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || dim == 0 {
            return Err(EmbedError::Shape("matrix must have at least one row of positive dimension".into()));
        }
        for (id, row) in case_ids.iter().zip(&rows) {
            if row.len() != dim {
                return Err(EmbedError::DimensionMismatch(dim, row.len()));
            }
            if row.iter().all(|x| *x == 0.0) {
                return Err(EmbedError::ZeroRow(id.clone()));
            }
        }
        Ok(EmbeddingMatrix { case_ids, dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }
}

/// Row `i` embeds `cases[i].fact_text`.
pub fn embed_cases(
    cases: &[LegalCase],
    provider: &dyn EmbeddingBackend,
    exec: &Executor,
) -> Result<EmbeddingMatrix, EmbedError> {
    if cases.is_empty() {
        return Err(EmbedError::Shape("no cases to embed".into()));
    }
    let rows = exec.map(cases, |c| provider.embed(&c.case_id, &c.fact_text));
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    EmbeddingMatrix::new(cases.iter().map(|c| c.case_id.clone()).collect(), rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// `values[i][j] = cos(left_i, right_j)`, computed row-parallel.
pub fn cosine_similarity_matrix(
    left: &EmbeddingMatrix,
    right: &EmbeddingMatrix,
    exec: &Executor,
) -> Result<SimilarityMatrix, EmbedError> {
    if left.dim != right.dim {
        return Err(EmbedError::DimensionMismatch(left.dim, right.dim));
    }
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let right_norms: Vec<f64> = right.rows.iter().map(|r| norm(r)).collect();
    let values = exec.map(&left.rows, |a| {
        let na = norm(a);
        right
            .rows
            .iter()
            .zip(&right_norms)
            .map(|(b, nb)| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (dot / (na * nb)).clamp(-1.0, 1.0)
            })
            .collect()
    });
    Ok(SimilarityMatrix { row_ids: left.case_ids.clone(), col_ids: right.case_ids.clone(), values })
}

/// Per row, the best column (ties to the smaller column id); then deduplicated
/// by column keeping the highest similarity, ordered by similarity descending
/// with ties by id ascending, and cut at `num`. Returns `(column, similarity)`.
pub fn select_hard_negatives(sim: &SimilarityMatrix, num: usize) -> Vec<(usize, f64)> {
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for row in &sim.values {
        let top = row.iter().enumerate().fold(None::<(usize, f64)>, |acc, (j, &s)| match acc {
            None => Some((j, s)),
            Some((bj, bs)) if s > bs || (s == bs && sim.col_ids[j] < sim.col_ids[bj]) => Some((j, s)),
            keep => keep,
        });
        if let Some((j, s)) = top {
            let e = best.entry(j).or_insert(s);
            if s > *e {
                *e = s;
            }
        }
    }
    let mut picked: Vec<(usize, f64)> = best.into_iter().collect();
    picked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| sim.col_ids[a.0].cmp(&sim.col_ids[b.0])));
    picked.truncate(num);
    picked
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusableSet {
    pub target: Consequent,
    pub positives: Vec<LegalCase>,
    pub negatives: Vec<LegalCase>,
    /// Aligned with `negatives`.
    pub negative_similarity: Vec<f64>,
    pub requested_negatives: usize,
}

impl ConfusableSet {
    /// Members of the validation set: positives first, then negatives.
    pub fn members(&self) -> impl Iterator<Item = (&LegalCase, Option<f64>)> {
        self.positives
            .iter()
            .map(|c| (c, None))
            .chain(self.negatives.iter().zip(&self.negative_similarity).map(|(c, s)| (c, Some(*s))))
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_short(&self) -> bool {
        self.negatives.len() < self.requested_negatives
    }

    pub fn record(&self) -> ConfusableRecord {
        ConfusableRecord {
            target: self.target.clone(),
            positive_ids: self.positives.iter().map(|c| c.case_id.clone()).collect(),
            negative_ids: self.negatives.iter().map(|c| c.case_id.clone()).collect(),
            similarity_of_each_negative: self.negative_similarity.clone(),
        }
    }

    /// Rehydrates a persisted record against a case pool.
    pub fn from_record(record: &ConfusableRecord, pool: &[LegalCase]) -> Result<Self, EmbedError> {
        let by_id: BTreeMap<&str, &LegalCase> = pool.iter().map(|c| (c.case_id.as_str(), c)).collect();
        let fetch = |ids: &[String]| {
            ids.iter()
                .map(|id| {
                    by_id.get(id.as_str()).map(|c| (*c).clone()).ok_or_else(|| EmbedError::BadInput {
                        target: record.target.key(),
                        reason: format!("unknown case {id}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        };
        let negatives = fetch(&record.negative_ids)?;
        Ok(ConfusableSet {
            target: record.target.clone(),
            positives: fetch(&record.positive_ids)?,
            requested_negatives: negatives.len(),
            negatives,
            negative_similarity: record.similarity_of_each_negative.clone(),
        })
    }
}

/// Persisted form of a [`ConfusableSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusableRecord {
    pub target: Consequent,
    pub positive_ids: Vec<String>,
    pub negative_ids: Vec<String>,
    pub similarity_of_each_negative: Vec<f64>,
}

/// Mines hard negatives for `target` from `others`. Cases in `others` that carry
/// the target label are dropped first.
pub fn build_confusable_set(
    target: &Consequent,
    positives: &[LegalCase],
    others: &[LegalCase],
    num: usize,
    provider: &dyn EmbeddingBackend,
    exec: &Executor,
) -> Result<ConfusableSet, EmbedError> {
    let bad = |reason: &str| EmbedError::BadInput { target: target.key(), reason: reason.into() };
    if positives.is_empty() {
        return Err(bad("no positives"));
    }
    if num == 0 {
        return Err(bad("num must be at least 1"));
    }
    if positives.iter().any(|c| !c.judgment.as_ref().is_some_and(|j| target.matches(j))) {
        return Err(bad("a positive does not carry the target label"));
    }
    let others: Vec<LegalCase> = others
        .iter()
        .filter(|c| c.judgment.as_ref().is_some_and(|j| !target.matches(j)))
        .cloned()
        .collect();
    if others.is_empty() {
        return Err(bad("no other-label cases"));
    }
    let pos = embed_cases(positives, provider, exec)?;
    let oth = embed_cases(&others, provider, exec)?;
    let sim = cosine_similarity_matrix(&pos, &oth, exec)?;
    let picked = select_hard_negatives(&sim, num);
    if picked.len() < num {
        log::warn!(
            "confusable set for {}: requested {num} negatives, only {} distinct available",
            target.key(),
            picked.len()
        );
    }
    Ok(ConfusableSet {
        target: target.clone(),
        positives: positives.to_vec(),
        negatives: picked.iter().map(|(j, _)| others[*j].clone()).collect(),
        negative_similarity: picked.iter().map(|(_, s)| *s).collect(),
        requested_negatives: num,
    })
}
