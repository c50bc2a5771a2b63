//! Accuracy and macro-averaged precision, recall and F1 per subtask.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSpace, LegalCase};
use crate::examination::{Prediction, Subtask};

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("{predictions} predictions for {gold} gold cases")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("prediction for {0} has no gold case")]
    UnknownCase(String),
    #[error("case {0} appears twice")]
    Duplicate(String),
    #[error("gold case {0} is unlabelled")]
    Unlabelled(String),
}

/// Classes the macro average runs over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassUniverse {
    /// Classes present in gold or predictions.
    #[default]
    Observed,
    /// Every class of the label space.
    LabelSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtaskMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub cases: usize,
    pub classes: Vec<ClassMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub universe: ClassUniverse,
    pub article: SubtaskMetrics,
    pub charge: SubtaskMetrics,
    pub term: SubtaskMetrics,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics over `(gold, predicted)` pairs. `extra` adds classes to the
/// universe beyond those observed.
pub fn score_pairs<S: AsRef<str>>(pairs: &[(S, S)], extra: &[String]) -> SubtaskMetrics {
    let mut classes: BTreeSet<&str> = extra.iter().map(String::as_str).collect();
    let mut tp: BTreeMap<&str, usize> = BTreeMap::new();
    let mut support: BTreeMap<&str, usize> = BTreeMap::new();
    let mut predicted: BTreeMap<&str, usize> = BTreeMap::new();
    let mut correct = 0;
    for (g, p) in pairs {
        let (g, p) = (g.as_ref(), p.as_ref());
        classes.insert(g);
        classes.insert(p);
        *support.entry(g).or_default() += 1;
        *predicted.entry(p).or_default() += 1;
        if g == p {
            correct += 1;
            *tp.entry(g).or_default() += 1;
        }
    }
    let per_class: Vec<ClassMetrics> = classes
        .iter()
        .map(|c| {
            let t = tp.get(c).copied().unwrap_or(0);
            let s = support.get(c).copied().unwrap_or(0);
            let n = predicted.get(c).copied().unwrap_or(0);
            let precision = ratio(t, n);
            let recall = ratio(t, s);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { label: c.to_string(), precision, recall, f1, support: s, predicted: n }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    SubtaskMetrics {
        accuracy: ratio(correct, pairs.len()),
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        cases: pairs.len(),
        classes: per_class,
    }
}

/// Joins predictions to gold cases by id and scores each subtask.
pub fn compute_metrics(
    predictions: &[Prediction],
    gold: &[LegalCase],
    universe: ClassUniverse,
    labels: &LabelSpace,
) -> Result<MetricsReport, MetricsError> {
    if predictions.len() != gold.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), gold: gold.len() });
    }
    let mut by_id = BTreeMap::new();
    for c in gold {
        let j = c.judgment.as_ref().ok_or_else(|| MetricsError::Unlabelled(c.case_id.clone()))?;
        if by_id.insert(c.case_id.as_str(), j).is_some() {
            return Err(MetricsError::Duplicate(c.case_id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    let mut joined = Vec::with_capacity(predictions.len());
    for p in predictions {
        let j = by_id.get(p.case_id.as_str()).ok_or_else(|| MetricsError::UnknownCase(p.case_id.clone()))?;
        if !seen.insert(p.case_id.as_str()) {
            return Err(MetricsError::Duplicate(p.case_id.clone()));
        }
        joined.push((p, *j));
    }
    let subtask = |s: Subtask| {
        let pairs: Vec<(&str, &str)> = joined
            .iter()
            .map(|(p, j)| {
                let g = match s {
                    Subtask::Article => j.article.as_str(),
                    Subtask::Charge => j.charge.as_str(),
                    Subtask::PrisonTerm => j.prison_term.as_str(),
                };
                (g, p.label(s))
            })
            .collect();
        let extra = match universe {
            ClassUniverse::Observed => &[][..],
            ClassUniverse::LabelSpace => s.labels(labels),
        };
        score_pairs(&pairs, extra)
    };
    Ok(MetricsReport {
        universe,
        article: subtask(Subtask::Article),
        charge: subtask(Subtask::Charge),
        term: subtask(Subtask::PrisonTerm),
    })
}

impl MetricsReport {
    pub fn get(&self, subtask: Subtask) -> &SubtaskMetrics {
        match subtask {
            Subtask::Article => &self.article,
            Subtask::Charge => &self.charge,
            Subtask::PrisonTerm => &self.term,
        }
    }

    /// Aligned plain-text summary followed by per-class tables.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>7} {:>7} {:>6}", "subtask", "acc", "ma-p", "ma-r", "ma-f1", "cases");
        for s in Subtask::ALL {
            let m = self.get(s);
            let _ = writeln!(
                out,
                "{:<8} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>6}",
                s.name(),
                m.accuracy,
                m.macro_precision,
                m.macro_recall,
                m.macro_f1,
                m.cases
            );
        }
        for s in Subtask::ALL {
            let m = self.get(s);
            let width = m.classes.iter().map(|c| c.label.chars().count()).max().unwrap_or(5).max(5);
            let _ = writeln!(out, "\n[{}]", s.name());
            let _ = writeln!(out, "{:<width$} {:>7} {:>7} {:>7} {:>7} {:>7}", "class", "prec", "rec", "f1", "support", "pred");
            for c in &m.classes {
                let _ = writeln!(
                    out,
                    "{:<width$} {:>7.4} {:>7.4} {:>7.4} {:>7} {:>7}",
                    c.label, c.precision, c.recall, c.f1, c.support, c.predicted
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Judgment;
    use crate::examination::SubtaskFlags;

    #[test]
    fn two_class_toy() {
        let m = score_pairs(&[("A", "A"), ("A", "B"), ("B", "B")], &[]);
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-12);
        let a = &m.classes[0];
        let b = &m.classes[1];
        assert_eq!((a.precision, a.recall), (1.0, 0.5));
        assert!((a.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((b.precision, b.recall), (0.5, 1.0));
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_and_extra_classes() {
        let m = score_pairs(&[("A", "A"), ("B", "A")], &[]);
        assert_eq!(m.classes[1].label, "B");
        assert_eq!((m.classes[1].precision, m.classes[1].f1), (0.0, 0.0));
        let full = score_pairs(&[("A", "A")], &["A".into(), "Z".into()]);
        assert_eq!(full.classes.len(), 2);
        assert_eq!(full.macro_f1, 0.5);
    }

    fn case(id: &str, a: &str, c: &str, t: &str) -> LegalCase {
        LegalCase::new(id, "", Some(Judgment { article: a.into(), charge: c.into(), prison_term: t.into() }))
    }

    fn pred(id: &str, a: &str, c: &str, t: &str) -> Prediction {
        Prediction {
            case_id: id.into(),
            article: a.into(),
            charge: c.into(),
            term: t.into(),
            used_fallback: SubtaskFlags::default(),
            used_abstract: false,
            rationale: String::new(),
        }
    }

    #[test]
    fn perfect_and_misaligned() {
        let gold = vec![case("1", "264", "theft", "0"), case("2", "263", "robbery", "1")];
        let preds = vec![pred("2", "263", "robbery", "1"), pred("1", "264", "theft", "0")];
        let r = compute_metrics(&preds, &gold, ClassUniverse::Observed, &LabelSpace::default()).unwrap();
        for s in Subtask::ALL {
            let m = r.get(s);
            assert_eq!((m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1), (1.0, 1.0, 1.0, 1.0));
        }
        assert!(r.to_table().contains("charge"));
        let bad = vec![pred("1", "264", "theft", "0"), pred("3", "263", "robbery", "1")];
        assert_eq!(
            compute_metrics(&bad, &gold, ClassUniverse::Observed, &LabelSpace::default()),
            Err(MetricsError::UnknownCase("3".into()))
        );
        assert!(matches!(
            compute_metrics(&bad[..1], &gold, ClassUniverse::Observed, &LabelSpace::default()),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }
}
