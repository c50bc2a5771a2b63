//! Deterministic offline stand-in for a chat model.
//!
//! The jurist reads the prompts written by this crate and answers them by
//! phrase matching: a predicate such as `TookProperty` holds for a fact iff the
//! phrase "took property" occurs in it. Refinement excludes a phrase shared by
//! every false positive and absent from every true positive, or admits a
//! phrase shared by every false negative. Replies depend only on the request.

use crate::agents::{AgentError, ChatBackend, ChatRequest, ChatResponse};
use crate::fol_rules::{parse_rule, Formula, FolRule};
use crate::prompts::section;

#[derive(Clone, Debug)]
pub struct KeywordJurist {
    lexicon: Vec<String>,
}

impl Default for KeywordJurist {
    fn default() -> Self {
        KeywordJurist::new(crate::synthetic::LEXICON.iter().map(|s| s.to_string()).collect())
    }
}

/// `took property` → `TookProperty`.
pub fn predicate_name(phrase: &str) -> String {
    phrase
        .split_whitespace()
        .map(|w| {
            let mut c = w.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect::<String>()).unwrap_or_default()
        })
        .collect()
}

/// `TookProperty` → `took property`.
pub fn phrase_of(predicate: &str) -> String {
    let mut out = String::new();
    for (i, ch) in predicate.chars().enumerate() {
        if ch.is_uppercase() && i > 0 {
            out.push(' ');
        }
        out.extend(ch.to_lowercase());
    }
    out.replace('_', " ")
}

/// Truth of an antecedent for a fact under phrase matching.
pub fn holds(formula: &Formula, fact: &str) -> bool {
    let fact = fact.to_lowercase();
    eval(formula, &fact)
}

fn eval(f: &Formula, fact: &str) -> bool {
    match f {
        Formula::Quantified { body, .. } => eval(body, fact),
        Formula::Not(inner) => !eval(inner, fact),
        Formula::And(cs) => cs.iter().all(|c| eval(c, fact)),
        Formula::Or(cs) => cs.iter().any(|c| eval(c, fact)),
        Formula::Atom(a) => fact.contains(&phrase_of(&a.predicate)),
    }
}

struct Record {
    fact: String,
    positive: bool,
    correct: bool,
}

const CANNOT: &str = "I cannot determine this from the material given.";

impl KeywordJurist {
    pub fn new(lexicon: Vec<String>) -> Self {
        KeywordJurist { lexicon }
    }

    fn common<'a>(&'a self, texts: &[&str]) -> Vec<&'a str> {
        if texts.is_empty() {
            return Vec::new();
        }
        self.lexicon.iter().map(String::as_str).filter(|p| texts.iter().all(|t| t.to_lowercase().contains(p))).collect()
    }

    fn union<'a>(&'a self, texts: &[&str]) -> Vec<&'a str> {
        self.lexicon.iter().map(String::as_str).filter(|p| texts.iter().any(|t| t.to_lowercase().contains(p))).collect()
    }

    fn respond(&self, req: &ChatRequest) -> String {
        let tag = req.tag.as_str();
        let user = req.user_text.as_str();
        let reply = if tag.starts_with("quiz/") {
            self.quiz(user)
        } else if tag.starts_with("exam/") && tag.ends_with("/abstract") {
            self.abstract_fact(user)
        } else if tag.starts_with("exam/") {
            self.check(user)
        } else if tag.starts_with("init/") {
            if tag.contains("/summarize") {
                Some(self.summarize(user))
            } else if tag.contains("/symbols") {
                Some(self.symbols(user))
            } else {
                self.initial_rule(user)
            }
        } else if tag.starts_with("cacl/") {
            if tag.ends_with("/keep") {
                self.keep(user)
            } else if tag.ends_with("/improve") {
                self.improve(user)
            } else if tag.contains("/synthesize") {
                Some(self.synthesize(user))
            } else {
                self.rewrite(user)
            }
        } else {
            None
        };
        reply.unwrap_or_else(|| CANNOT.to_string())
    }

    fn rule_between(text: &str, start: &str, end: &str) -> Option<FolRule> {
        parse_rule(section(text, start, Some(end))?.trim()).ok()
    }

    fn quiz(&self, user: &str) -> Option<String> {
        let rule = Self::rule_between(user, "Judgment rule:\n", "\n\nCase facts:\n")?;
        let fact = section(user, "Case facts:\n", Some("\n\nOptions:\n"))?;
        let options = section(user, "Options:\n", Some("\n\nDecide"))?;
        let target = rule.target.render();
        let parsed: Vec<(char, &str)> = options
            .lines()
            .filter_map(|l| l.split_once(". ").and_then(|(k, v)| Some((k.chars().next()?, v.trim()))))
            .collect();
        let applies = holds(&rule.antecedent, fact);
        let letter = if applies {
            parsed.iter().find(|(_, l)| *l == target)?.0
        } else {
            parsed.iter().find(|(_, l)| *l != target)?.0
        };
        let why = if applies { "the facts satisfy the antecedent" } else { "the facts do not satisfy the antecedent" };
        Some(format!("Reasoning: Checking each predicate against the facts, {why}.\nAnswer: {letter}"))
    }

    fn check(&self, user: &str) -> Option<String> {
        let rule = Self::rule_between(user, "Judgment rule:\n", "\n\nCase facts:\n")?;
        let fact = section(user, "Case facts:\n", Some("\n\nThink step by step"))?;
        let verdict = if holds(&rule.antecedent, fact) { "YES" } else { "NO" };
        Some(format!("Reasoning: Each predicate was compared with the facts.\nVerdict: {verdict}"))
    }

    fn abstract_fact(&self, user: &str) -> Option<String> {
        let limit: usize = section(user, "at most ", Some(" characters"))?.trim().parse().ok()?;
        let fact = section(user, "Case facts:\n", Some("\n\nAbstract:"))?;
        Some(fact.chars().take(limit).collect())
    }

    /// Lexicon phrases by how many precedents mention them, then lexicon order.
    fn summarize(&self, user: &str) -> String {
        let body = section(user, "Precedents:\n", Some("\n\nSummarize")).unwrap_or_default();
        let precedents: Vec<&str> = body.split("\n\n").filter(|p| !p.trim().is_empty()).collect();
        let mut ranked: Vec<(usize, usize, &str)> = self
            .lexicon
            .iter()
            .enumerate()
            .map(|(i, p)| (precedents.iter().filter(|t| t.to_lowercase().contains(p.as_str())).count(), i, p.as_str()))
            .filter(|(n, _, _)| *n > 0)
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let behavior = if ranked.is_empty() {
            prompts_unspecified().to_string()
        } else {
            ranked.iter().map(|(_, _, p)| *p).collect::<Vec<_>>().join("; ")
        };
        format!(
            "Subject: the defendant\nVictim: {}\nTime and location: {}\nBehavior: {behavior}\nConsequences: {}\nMental state: intentional",
            prompts_unspecified(),
            prompts_unspecified(),
            prompts_unspecified()
        )
    }

    fn symbols(&self, user: &str) -> String {
        let factors = section(user, "Circumstance factors:\n", Some("\n\nDefine")).unwrap_or_default();
        let behavior = factors
            .lines()
            .find_map(|l| l.strip_prefix("Behavior:"))
            .map(str::trim)
            .unwrap_or_default();
        let mut lines: Vec<String> = behavior
            .split(';')
            .map(str::trim)
            .filter(|p| !p.is_empty() && *p != prompts_unspecified())
            .map(|p| format!("PRED {}/1: the defendant {p}", predicate_name(p)))
            .collect();
        if lines.is_empty() {
            lines.push("PRED ActedUnlawfully/1: the defendant acted unlawfully".into());
        }
        lines.push("VAR x: the defendant".into());
        lines.push("QUANT x: FORALL".into());
        lines.join("\n")
    }

    fn initial_rule(&self, user: &str) -> Option<String> {
        let target = user
            .lines()
            .find_map(|l| l.strip_prefix("Judgment: "))
            .or_else(|| section(user, "must be exactly ", Some(".\n")))?
            .trim();
        let symbols = section(user, "Symbols:\n", Some("\n\nConstruct")).unwrap_or_default();
        let predicate = symbols
            .lines()
            .find_map(|l| l.strip_prefix("PRED "))
            .and_then(|r| r.split('/').next())
            .unwrap_or("ActedUnlawfully");
        Some(format!("Rule: FORALL x ({predicate}(x)) -> {target}"))
    }

    fn records(user: &str, start: &str, target: &str) -> Vec<Record> {
        let body = section(user, start, Some("\n\nIdentify")).unwrap_or_default();
        body.split("[Question ")
            .filter(|c| !c.trim().is_empty())
            .filter_map(|chunk| {
                let line = |key: &str| chunk.lines().find_map(|l| l.strip_prefix(key)).map(str::trim);
                let fact = line("Facts: ")?.to_string();
                let correct = line("Correct option: ")?.chars().next()?;
                let predicted = line("Predicted option: ")?.chars().next();
                let label = chunk.lines().find_map(|l| l.strip_prefix(&format!("{correct}. ")))?.trim();
                Some(Record { fact, positive: label == target, correct: predicted == Some(correct) })
            })
            .collect()
    }

    fn listed(label: &str, phrases: &[&str]) -> String {
        if phrases.is_empty() {
            format!("{label}: -")
        } else {
            format!("{label}: {}", phrases.join("; "))
        }
    }

    fn keep(&self, user: &str) -> Option<String> {
        let rule = Self::rule_between(user, "Current judgment rule:\n", "\n\nThe rule led")?;
        let recs = Self::records(user, "CORRECT choices on these quiz questions:\n", &rule.target.render());
        let tp: Vec<&str> = recs.iter().filter(|r| r.positive).map(|r| r.fact.as_str()).collect();
        let tn: Vec<&str> = recs.iter().filter(|r| !r.positive).map(|r| r.fact.as_str()).collect();
        Some(format!(
            "The current predicates separate these cases correctly.\n{}\n{}",
            Self::listed("TRUE POSITIVE PHRASES", &self.union(&tp)),
            Self::listed("TRUE NEGATIVE PHRASES", &self.union(&tn)),
        ))
    }

    fn improve(&self, user: &str) -> Option<String> {
        let rule = Self::rule_between(user, "Current judgment rule:\n", "\n\nThe rule led")?;
        let recs = Self::records(user, "INCORRECT choices on these quiz questions:\n", &rule.target.render());
        let fp: Vec<&str> = recs.iter().filter(|r| !r.positive && !r.correct).map(|r| r.fact.as_str()).collect();
        let fn_: Vec<&str> = recs.iter().filter(|r| r.positive && !r.correct).map(|r| r.fact.as_str()).collect();
        Some(format!(
            "The rule fails to separate these cases.\n{}\n{}",
            Self::listed("FALSE POSITIVE PHRASES", &self.common(&fp)),
            Self::listed("FALSE NEGATIVE PHRASES", &self.common(&fn_)),
        ))
    }

    fn phrase_list<'t>(text: &'t str, label: &str) -> Vec<&'t str> {
        text.lines()
            .find_map(|l| l.strip_prefix(label))
            .map(|rest| rest.trim_start_matches(':').split(';').map(str::trim).filter(|p| !p.is_empty() && *p != "-").collect())
            .unwrap_or_default()
    }

    fn synthesize(&self, user: &str) -> String {
        let keep = section(user, "Analysis of effective logic:\n", Some("\n\nAnalysis of ineffective logic:")).unwrap_or_default();
        let improve = section(user, "Analysis of ineffective logic:\n", Some("\n\nCombine")).unwrap_or_default();
        let tp = Self::phrase_list(keep, "TRUE POSITIVE PHRASES");
        let tn = Self::phrase_list(keep, "TRUE NEGATIVE PHRASES");
        let fp = Self::phrase_list(improve, "FALSE POSITIVE PHRASES");
        let fn_ = Self::phrase_list(improve, "FALSE NEGATIVE PHRASES");
        let exclude = fp.iter().find(|p| !tp.contains(p));
        let include = fn_.iter().find(|p| !tn.contains(p) && !fp.contains(p));
        let mut changes = Vec::new();
        if let Some(p) = exclude {
            changes.push(format!("exclude {p}"));
        }
        if let Some(p) = include {
            changes.push(format!("include {p}"));
        }
        let improve = if changes.is_empty() { "no change found".to_string() } else { changes.join("; ") };
        format!("KEEP: the predicates that held for the correct cases\nIMPROVE: {improve}")
    }

    fn rewrite(&self, user: &str) -> Option<String> {
        let rule = Self::rule_between(user, "Current judgment rule:\n", "\n\nOptimization direction:")
            .or_else(|| Self::rule_between(user, "Your previous rule was:\n", "\n\nIt was rejected"))?;
        let improve = user.lines().find_map(|l| l.strip_prefix("IMPROVE: ")).unwrap_or_default();
        let (prefix, body) = rule.antecedent.split_prefix();
        let mut body = body.clone();
        let present: Vec<String> = rule.antecedent.atoms().iter().map(|a| a.predicate.clone()).collect();
        for change in improve.split(';').map(str::trim) {
            let atom = |p: &str| Formula::atom(predicate_name(p), vec![crate::fol_rules::Term::Var("x".into())]);
            if let Some(p) = change.strip_prefix("exclude ") {
                if !present.contains(&predicate_name(p)) {
                    body = Formula::And(vec![body, Formula::not(atom(p))]);
                }
            } else if let Some(p) = change.strip_prefix("include ") {
                if !present.contains(&predicate_name(p)) {
                    body = Formula::Or(vec![body, atom(p)]);
                }
            }
        }
        let mut antecedent = body;
        for (q, v) in prefix.into_iter().rev() {
            antecedent = Formula::Quantified { quantifier: q, variable: v.to_string(), body: Box::new(antecedent) };
        }
        if !matches!(antecedent, Formula::Quantified { .. }) {
            antecedent = Formula::forall("x", antecedent);
        }
        let child = FolRule::new(rule.rule_id.clone(), rule.target.clone(), antecedent);
        Some(format!("Rule: {}", child.text()))
    }
}

fn prompts_unspecified() -> &'static str {
    crate::rule_init::UNSPECIFIED
}

impl ChatBackend for KeywordJurist {
    fn identity(&self) -> String {
        format!("keyword-jurist:{}", self.lexicon.len())
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, AgentError> {
        let text = self.respond(request);
        Ok(ChatResponse {
            input_units: crate::agents::mock_units(&request.system_text) + crate::agents::mock_units(&request.user_text),
            output_units: crate::agents::mock_units(&text),
            text,
            latency_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        assert_eq!(predicate_name("took property"), "TookProperty");
        assert_eq!(phrase_of("TookProperty"), "took property");
        assert_eq!(phrase_of(&predicate_name("injured the victim")), "injured the victim");
    }

    #[test]
    fn phrase_truth() {
        let r = parse_rule("FORALL x ((TookProperty(x) AND NOT UsedViolence(x))) -> ARTICLE(264)").unwrap();
        assert!(holds(&r.antecedent, "He secretly took property."));
        assert!(!holds(&r.antecedent, "He used violence and took property."));
    }

    #[test]
    fn rewrite_adds_exclusion() {
        let j = KeywordJurist::default();
        let prompt = "Current judgment rule:\nFORALL x (TookProperty(x)) -> ARTICLE(264) CHARGE(theft)\n\nOptimization direction:\nKEEP: k\nIMPROVE: exclude used violence\n\nRewrite";
        let reply = j.rewrite(prompt).unwrap();
        assert_eq!(reply, "Rule: FORALL x ((TookProperty(x) AND NOT (UsedViolence(x)))) -> ARTICLE(264) CHARGE(theft)");
    }
}
