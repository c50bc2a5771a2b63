use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{Consequent, FolRule, Formula, Term};
use crate::corpus::LabelSpace;

/// A reason a parsed rule cannot be used against a label space.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Violation {
    UnknownArticle(String),
    UnknownCharge(String),
    UnknownPrisonTerm(String),
    UnboundVariable(String),
    ArityConflict(String),
    ConnectiveArity(&'static str),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownArticle(a) => write!(f, "unknown article {a}"),
            Violation::UnknownCharge(c) => write!(f, "unknown charge {c}"),
            Violation::UnknownPrisonTerm(t) => write!(f, "unknown prison term {t}"),
            Violation::UnboundVariable(v) => write!(f, "unbound variable {v}"),
            Violation::ArityConflict(p) => write!(f, "arity conflict {p}"),
            Violation::ConnectiveArity(op) => write!(f, "{op} needs at least two operands"),
        }
    }
}

/// Checks consequent labels, variable binding, predicate arity consistency and
/// connective arity. The result is sorted and duplicate-free; empty means valid.
pub fn validate_rule(rule: &FolRule, labels: &LabelSpace) -> Vec<Violation> {
    let mut found = BTreeSet::new();
    check_consequent(&rule.target, labels, &mut found);

    let mut arities: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    let mut scope = Vec::new();
    walk(&rule.antecedent, &mut scope, &mut arities, &mut found);
    for (pred, set) in arities {
        if set.len() > 1 {
            found.insert(Violation::ArityConflict(pred.to_string()));
        }
    }
    found.into_iter().collect()
}

fn check_consequent(c: &Consequent, labels: &LabelSpace, found: &mut BTreeSet<Violation>) {
    if !labels.articles.iter().any(|a| a == c.article()) {
        found.insert(Violation::UnknownArticle(c.article().to_string()));
    }
    match c {
        Consequent::Article { .. } => {}
        Consequent::ArticleCharge { charge, .. } => {
            if !labels.charges.contains(charge) {
                found.insert(Violation::UnknownCharge(charge.clone()));
            }
        }
        Consequent::ArticlePrisonTerm { prison_term, .. } => {
            if !labels.prison_terms.contains(prison_term) {
                found.insert(Violation::UnknownPrisonTerm(prison_term.clone()));
            }
        }
    }
}

fn walk<'a>(
    f: &'a Formula,
    scope: &mut Vec<&'a str>,
    arities: &mut BTreeMap<&'a str, BTreeSet<usize>>,
    found: &mut BTreeSet<Violation>,
) {
    match f {
        Formula::Quantified { variable, body, .. } => {
            scope.push(variable);
            walk(body, scope, arities, found);
            scope.pop();
        }
        Formula::Not(inner) => walk(inner, scope, arities, found),
        Formula::And(cs) | Formula::Or(cs) => {
            if cs.len() < 2 {
                found.insert(Violation::ConnectiveArity(if matches!(f, Formula::And(_)) {
                    "AND"
                } else {
                    "OR"
                }));
            }
            cs.iter().for_each(|c| walk(c, scope, arities, found));
        }
        Formula::Atom(atom) => {
            arities.entry(&atom.predicate).or_default().insert(atom.args.len());
            for arg in &atom.args {
                if let Term::Var(v) = arg {
                    if !scope.contains(&v.as_str()) {
                        found.insert(Violation::UnboundVariable(v.clone()));
                    }
                }
            }
        }
    }
}
