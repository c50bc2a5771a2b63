//! The judgment-rule language `A -> C`.
//!
//! A rule pairs an antecedent (a quantified boolean combination of predicate
//! atoms) with a consequent naming one or two judgment labels. Rules are
//! exchanged with agents as ASCII text:
//!
//! ```text
//! rule       := expr "->" consequent
//! expr       := term ("OR" term)*
//! term       := factor ("AND" factor)*
//! factor     := ("FORALL" | "EXISTS") var factor | "NOT" factor | atom | "(" expr ")"
//! atom       := IDENT "(" arglist? ")"
//! consequent := "ARTICLE(" id ")" ("CHARGE(" id ")" | "TERM(" id ")")?
//! ```
//!
//! Quantifier prefixes such as `FORALL x EXISTS y (...)` are the common form;
//! the factor-level quantifier is what makes them compose. The Unicode symbols
//! `∀ ∃ ∧ ∨ ¬ →` are accepted as aliases and always rendered back as ASCII.

mod parser;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Judgment;

pub use parser::{parse_formula, parse_rule, parse_rule_parts, ParseError};
pub use validate::{validate_rule, Violation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantifier {
    ForAll,
    Exists,
}

impl Quantifier {
    pub fn keyword(self) -> &'static str {
        match self {
            Quantifier::ForAll => "FORALL",
            Quantifier::Exists => "EXISTS",
        }
    }
}

/// Argument of a predicate atom. Identifiers are variables; quoted strings and
/// integers are constants and need no binding.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Var(String),
    Str(String),
    Int(i64),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Atom {
    pub predicate: String,
    pub args: Vec<Term>,
}

impl Atom {
    pub fn new(predicate: impl Into<String>, args: Vec<Term>) -> Self {
        Atom { predicate: predicate.into(), args }
    }

    /// Unary atom over a single variable, the shape agents emit most often.
    pub fn unary(predicate: impl Into<String>, var: impl Into<String>) -> Self {
        Atom::new(predicate, vec![Term::Var(var.into())])
    }
}

/// Antecedent AST. `Not` has exactly one child; `And`/`Or` carry two or more.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Formula {
    Quantified {
        quantifier: Quantifier,
        variable: String,
        body: Box<Formula>,
    },
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Atom(Atom),
}

impl Formula {
    pub fn forall(variable: impl Into<String>, body: Formula) -> Self {
        Formula::Quantified { quantifier: Quantifier::ForAll, variable: variable.into(), body: Box::new(body) }
    }

    pub fn exists(variable: impl Into<String>, body: Formula) -> Self {
        Formula::Quantified { quantifier: Quantifier::Exists, variable: variable.into(), body: Box::new(body) }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(inner: Formula) -> Self {
        Formula::Not(Box::new(inner))
    }

    pub fn atom(predicate: impl Into<String>, args: Vec<Term>) -> Self {
        Formula::Atom(Atom::new(predicate, args))
    }

    /// Visits every atom in source order.
    pub fn atoms(&self) -> Vec<&Atom> {
        let mut out = Vec::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms<'a>(&'a self, out: &mut Vec<&'a Atom>) {
        match self {
            Formula::Quantified { body, .. } => body.collect_atoms(out),
            Formula::Not(inner) => inner.collect_atoms(out),
            Formula::And(children) | Formula::Or(children) => {
                children.iter().for_each(|c| c.collect_atoms(out))
            }
            Formula::Atom(atom) => out.push(atom),
        }
    }

    /// Strips the leading quantifier prefix, returning the bindings and the matrix.
    pub fn split_prefix(&self) -> (Vec<(Quantifier, &str)>, &Formula) {
        let mut prefix = Vec::new();
        let mut cur = self;
        while let Formula::Quantified { quantifier, variable, body } = cur {
            prefix.push((*quantifier, variable.as_str()));
            cur = body;
        }
        (prefix, cur)
    }

    /// Canonical, fully parenthesized rendering of the formula.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out);
        out
    }

    fn render_into(&self, out: &mut String) {
        match self {
            Formula::Quantified { quantifier, variable, body } => {
                out.push_str(quantifier.keyword());
                out.push(' ');
                out.push_str(variable);
                out.push(' ');
                if matches!(**body, Formula::Quantified { .. }) {
                    body.render_into(out);
                } else {
                    out.push('(');
                    body.render_into(out);
                    out.push(')');
                }
            }
            Formula::Not(inner) => {
                out.push_str("NOT (");
                inner.render_into(out);
                out.push(')');
            }
            Formula::And(children) => render_connective(children, " AND ", out),
            Formula::Or(children) => render_connective(children, " OR ", out),
            Formula::Atom(atom) => {
                out.push_str(&atom.predicate);
                out.push('(');
                for (i, arg) in atom.args.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    render_term(arg, out);
                }
                out.push(')');
            }
        }
    }
}

fn render_connective(children: &[Formula], op: &str, out: &mut String) {
    out.push('(');
    for (i, child) in children.iter().enumerate() {
        if i > 0 {
            out.push_str(op);
        }
        child.render_into(out);
    }
    out.push(')');
}

fn render_term(term: &Term, out: &mut String) {
    match term {
        Term::Var(v) => out.push_str(v),
        Term::Int(i) => out.push_str(&i.to_string()),
        Term::Str(s) => push_quoted(s, out),
    }
}

fn push_quoted(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
}

pub(crate) const KEYWORDS: &[&str] =
    &["FORALL", "EXISTS", "AND", "OR", "NOT", "ARTICLE", "CHARGE", "TERM"];

/// True when `s` lexes as a single non-keyword identifier.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_') && !KEYWORDS.contains(&s)
}

fn push_label_id(id: &str, out: &mut String) {
    let numeric = !id.is_empty() && id.chars().all(|c| c.is_ascii_digit());
    if numeric || is_identifier(id) {
        out.push_str(id);
    } else {
        push_quoted(id, out);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Article,
    ArticleCharge,
    ArticlePrisonTerm,
}

/// Label side of a rule: one or two judgment labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Consequent {
    Article { article: String },
    ArticleCharge { article: String, charge: String },
    ArticlePrisonTerm { article: String, prison_term: String },
}

impl Consequent {
    pub fn kind(&self) -> TargetKind {
        match self {
            Consequent::Article { .. } => TargetKind::Article,
            Consequent::ArticleCharge { .. } => TargetKind::ArticleCharge,
            Consequent::ArticlePrisonTerm { .. } => TargetKind::ArticlePrisonTerm,
        }
    }

    pub fn article(&self) -> &str {
        match self {
            Consequent::Article { article }
            | Consequent::ArticleCharge { article, .. }
            | Consequent::ArticlePrisonTerm { article, .. } => article,
        }
    }

    /// Projects a judgment onto the label combination of `kind`.
    pub fn project(kind: TargetKind, judgment: &Judgment) -> Consequent {
        let article = judgment.article.clone();
        match kind {
            TargetKind::Article => Consequent::Article { article },
            TargetKind::ArticleCharge => {
                Consequent::ArticleCharge { article, charge: judgment.charge.clone() }
            }
            TargetKind::ArticlePrisonTerm => {
                Consequent::ArticlePrisonTerm { article, prison_term: judgment.prison_term.clone() }
            }
        }
    }

    pub fn matches(&self, judgment: &Judgment) -> bool {
        Consequent::project(self.kind(), judgment) == *self
    }

    /// Compact key used in node ids, tags, and file names.
    pub fn key(&self) -> String {
        match self {
            Consequent::Article { article } => article.clone(),
            Consequent::ArticleCharge { article, charge } => format!("{article}+{charge}"),
            Consequent::ArticlePrisonTerm { article, prison_term } => {
                format!("{article}#{prison_term}")
            }
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::from("ARTICLE(");
        push_label_id(self.article(), &mut out);
        out.push(')');
        match self {
            Consequent::Article { .. } => {}
            Consequent::ArticleCharge { charge, .. } => {
                out.push_str(" CHARGE(");
                push_label_id(charge, &mut out);
                out.push(')');
            }
            Consequent::ArticlePrisonTerm { prison_term, .. } => {
                out.push_str(" TERM(");
                push_label_id(prison_term, &mut out);
                out.push(')');
            }
        }
        out
    }
}

impl fmt::Display for Consequent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parent", rename_all = "snake_case")]
pub enum Provenance {
    Initialized,
    OptimizedFrom(String),
}

/// A versioned judgment rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FolRule {
    pub rule_id: String,
    pub target: Consequent,
    pub antecedent: Formula,
    pub version: u32,
    pub provenance: Provenance,
}

impl FolRule {
    pub fn new(rule_id: impl Into<String>, target: Consequent, antecedent: Formula) -> Self {
        FolRule {
            rule_id: rule_id.into(),
            target,
            antecedent,
            version: 0,
            provenance: Provenance::Initialized,
        }
    }

    /// Antecedent and consequent agree; metadata is ignored.
    pub fn same_logic(&self, other: &FolRule) -> bool {
        self.target == other.target && self.antecedent == other.antecedent
    }

    pub fn text(&self) -> String {
        render_rule(self)
    }
}

/// Canonical text form; `parse_rule(&render_rule(r))` has the same logic as `r`.
pub fn render_rule(rule: &FolRule) -> String {
    format!("{} -> {}", rule.antecedent.render(), rule.target.render())
}

/// Variables bound anywhere in a formula, in binding order.
pub fn bound_variables(formula: &Formula) -> Vec<&str> {
    let mut out = Vec::new();
    fn walk<'a>(f: &'a Formula, out: &mut Vec<&'a str>) {
        match f {
            Formula::Quantified { variable, body, .. } => {
                out.push(variable);
                walk(body, out);
            }
            Formula::Not(inner) => walk(inner, out),
            Formula::And(cs) | Formula::Or(cs) => cs.iter().for_each(|c| walk(c, out)),
            Formula::Atom(_) => {}
        }
    }
    walk(formula, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theft_rule() -> FolRule {
        let body = Formula::And(vec![
            Formula::Atom(Atom::unary("Theft", "x")),
            Formula::Atom(Atom::unary("ValueLarge", "x")),
        ]);
        FolRule::new(
            "r",
            Consequent::Article { article: "264".into() },
            Formula::forall("x", body),
        )
    }

    #[test]
    fn canonical_parenthesization() {
        assert_eq!(
            render_rule(&theft_rule()),
            "FORALL x ((Theft(x) AND ValueLarge(x))) -> ARTICLE(264)"
        );
    }

    #[test]
    fn nested_not_is_preserved() {
        let f = Formula::not(Formula::not(Formula::Atom(Atom::unary("P", "x"))));
        assert_eq!(f.render(), "NOT (NOT (P(x)))");
    }

    #[test]
    fn quantifier_chain_renders_as_prefix() {
        let f = Formula::forall("x", Formula::exists("y", Formula::atom("R", vec![
            Term::Var("x".into()),
            Term::Var("y".into()),
        ])));
        assert_eq!(f.render(), "FORALL x EXISTS y (R(x, y))");
    }

    #[test]
    fn odd_label_ids_are_quoted() {
        let c = Consequent::ArticleCharge { article: "264".into(), charge: "drug trafficking".into() };
        assert_eq!(c.render(), "ARTICLE(264) CHARGE(\"drug trafficking\")");
        let c = Consequent::ArticleCharge { article: "264".into(), charge: "盗窃".into() };
        assert_eq!(c.render(), "ARTICLE(264) CHARGE(盗窃)");
        let c = Consequent::ArticlePrisonTerm { article: "264".into(), prison_term: "AND".into() };
        assert_eq!(c.render(), "ARTICLE(264) TERM(\"AND\")");
    }

    #[test]
    fn consequent_matching() {
        let j = Judgment { article: "264".into(), charge: "theft".into(), prison_term: "2".into() };
        assert!(Consequent::ArticleCharge { article: "264".into(), charge: "theft".into() }.matches(&j));
        assert!(!Consequent::ArticlePrisonTerm { article: "264".into(), prison_term: "3".into() }.matches(&j));
        assert!(Consequent::Article { article: "264".into() }.matches(&j));
    }
}
