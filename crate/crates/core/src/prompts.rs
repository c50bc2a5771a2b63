//! Prompt templates and the response formats they request.
//!
//! Every template spells out the exact output format it expects; the parsers
//! in this module are the only place those formats are interpreted.

use std::sync::LazyLock;

use regex::Regex;

use crate::agents::{Agent, AgentError, ChatRequest, PromptTemplate};
use crate::corpus::LabelSpace;
use crate::fol_rules::{parse_rule, validate_rule, Consequent, FolRule};

pub const GRAMMAR_HELP: &str = "\
Write the rule on a single line using this ASCII syntax:
  <antecedent> -> ARTICLE(<id>) [CHARGE(<id>) | TERM(<id>)]
The antecedent combines predicate atoms such as Name(x) or Name(x, \"text\", 5) with
NOT, AND, OR and parentheses (NOT binds tightest, then AND, then OR).
Quantify every variable with a prefix: FORALL x (...) or EXISTS e (...).
Example: FORALL x ((TakesProperty(x) AND NOT UsesViolence(x))) -> ARTICLE(264) CHARGE(theft)";

fn template(name: &str, body: &str) -> PromptTemplate {
    PromptTemplate::new(name, body).expect("built-in templates are well-formed")
}

pub const JUDGE_SYSTEM: &str =
    "You are an experienced criminal judge. Reason strictly from the case facts and the judgment rule you are given.";

pub const RULE_AUTHOR_SYSTEM: &str =
    "You formalize legal reasoning as first-order-logic judgment rules. Follow the requested output format exactly.";

pub static SUMMARIZE: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "summarize-circumstances",
        "The following precedents were all decided with the judgment {{target}}.\n\n\
Precedents:\n{{precedents}}\n\n\
Summarize the circumstance factors that led to this judgment. Answer with exactly six lines:\n\
Subject: <category of the criminal subject>\n\
Victim: <category of the victim>\n\
Time and location: <time and place of the crime>\n\
Behavior: <the criminal behavior>\n\
Consequences: <objective consequences of the crime>\n\
Mental state: <the offender's subjective mental state>\n\
Write \"unspecified\" for any factor the precedents do not determine.",
    )
});

pub static DEFINE_SYMBOLS: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "define-symbols",
        "Judgment: {{target}}\n\nCircumstance factors:\n{{factors}}\n\n\
Define first-order-logic symbols that capture these factors.\n\
List one symbol per line, using only these forms:\n\
PRED <Name>/<arity>: <meaning>\n\
VAR <name>: <what it denotes>\n\
QUANT <name>: FORALL | EXISTS\n\
Names must be identifiers (letters, digits, underscore) and must be unique.",
    )
});

pub static CONSTRUCT_RULE: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "construct-rule",
        "Judgment: {{target}}\n\nCircumstance factors:\n{{factors}}\n\nSymbols:\n{{symbols}}\n\n\
Construct one judgment rule whose antecedent uses these symbols and whose consequent is exactly {{target}}.\n\
{{grammar}}\n\nRespond with a single line:\nRule: <rule>",
    )
});

pub static REPAIR_RULE: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "repair-rule",
        "Your previous rule was:\n{{previous}}\n\nIt was rejected: {{error}}\n\n\
The consequent must be exactly {{target}}.\n{{grammar}}\n\nRespond with a single line:\nRule: <rule>",
    )
});

pub static REPAIR_SYMBOLS: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "repair-symbols",
        "{{original}}\n\nYour previous symbol list was rejected: {{error}}\nProduce the full list again with unique names.",
    )
});

pub static QUIZ: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "quiz",
        "Judgment rule:\n{{rule}}\n\nCase facts:\n{{fact}}\n\nOptions:\n{{options}}\n\n\
Decide whether the facts satisfy the antecedent of the judgment rule. If they do, the rule's consequent is the judgment; \
otherwise choose the option that best fits the facts.\n\
Respond in exactly this format:\nReasoning: <step-by-step reasoning>\nAnswer: <option letter>",
    )
});

pub static KEEP_ANALYSIS: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "keep-analysis",
        "Current judgment rule:\n{{rule}}\n\n\
The rule led to CORRECT choices on these quiz questions:\n{{records}}\n\n\
Identify the parts of the rule's logic that were effective and must be kept. Answer in prose, citing predicates by name.",
    )
});

pub static IMPROVE_ANALYSIS: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "improve-analysis",
        "Current judgment rule:\n{{rule}}\n\n\
The rule led to INCORRECT choices on these quiz questions:\n{{records}}\n\n\
Identify the parts of the rule's logic that were ineffective or missing, and what distinguishes these cases. \
Answer in prose, citing predicates by name.",
    )
});

pub static SYNTHESIZE_DIRECTION: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "synthesize-direction",
        "Analysis of effective logic:\n{{keep}}\n\nAnalysis of ineffective logic:\n{{improve}}\n\n\
Combine these into an optimization direction for the rule. Respond with two headed sections:\n\
KEEP: <logic to keep unchanged>\nIMPROVE: <logic to change, add or remove>",
    )
});

pub static REWRITE_RULE: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "rewrite-rule",
        "Current judgment rule:\n{{rule}}\n\nOptimization direction:\nKEEP: {{keep}}\nIMPROVE: {{improve}}\n\n\
Rewrite the rule following the direction: keep the effective logic and improve the ineffective logic. \
The consequent must stay exactly {{target}}.\n{{grammar}}\n\nRespond with a single line:\nRule: <rule>",
    )
});

pub static CHECK_RULE: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "check-rule",
        "Judgment rule:\n{{rule}}\n\nCase facts:\n{{fact}}\n\n\
Think step by step: does the antecedent of this rule hold for the facts?\n\
Respond in exactly this format:\nReasoning: <step-by-step reasoning>\nVerdict: YES or NO",
    )
});

pub static ABSTRACT: LazyLock<PromptTemplate> = LazyLock::new(|| {
    template(
        "case-abstract",
        "Condense the following case facts into an abstract of at most {{limit}} characters. \
Keep every legally relevant feature (who acted, against whom, what was done, when and where, the consequences, \
and the offender's intent) and drop redundant detail.\n\nCase facts:\n{{fact}}\n\nAbstract:",
    )
});

static ANSWER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)answer\s*[:：]\s*\(?\s*([A-Za-z])\b").expect("valid regex"));
static VERDICT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)verdict\s*[:：]\s*(yes|no)\b").expect("valid regex"));

/// The letter from the last `Answer: X` line, upper-cased.
pub fn parse_answer_letter(text: &str) -> Option<char> {
    ANSWER_RE
        .captures_iter(text)
        .last()
        .and_then(|c| c[1].chars().next())
        .map(|c| c.to_ascii_uppercase())
}

/// Text following `Reasoning:` up to the answer/verdict line, or the whole reply.
pub fn parse_reasoning(text: &str) -> String {
    let lower = text.to_ascii_lowercase();
    let start = lower.find("reasoning:").map(|i| i + "reasoning:".len()).unwrap_or(0);
    let end = [lower.rfind("answer:"), lower.rfind("verdict:")]
        .into_iter()
        .flatten()
        .filter(|e| *e >= start)
        .min()
        .unwrap_or(text.len());
    text[start..end].trim().to_string()
}

/// `Some(true)` for YES, `Some(false)` for NO, from the last verdict line.
pub fn parse_verdict(text: &str) -> Option<bool> {
    VERDICT_RE.captures_iter(text).last().map(|c| c[1].eq_ignore_ascii_case("yes"))
}

/// The rule line of a reply: a `Rule:` line if present, else the first line
/// containing an arrow. Code fences and backticks are stripped.
pub fn extract_rule_text(text: &str) -> Option<String> {
    let lines: Vec<&str> = text
        .lines()
        .map(|l| l.trim().trim_matches('`').trim())
        .filter(|l| !l.is_empty() && !l.starts_with("```"))
        .collect();
    let strip = |l: &str| {
        let lower = l.to_ascii_lowercase();
        if lower.starts_with("rule:") {
            l[5..].trim().to_string()
        } else {
            l.to_string()
        }
    };
    lines
        .iter()
        .find(|l| l.to_ascii_lowercase().starts_with("rule:"))
        .or_else(|| lines.iter().find(|l| l.contains("->") || l.contains('→')))
        .map(|l| strip(l))
        .filter(|s| !s.is_empty())
}

/// Splits a `KEEP:` / `IMPROVE:` reply into its two sections.
pub fn parse_direction_sections(text: &str) -> Option<(String, String)> {
    let upper = text.to_ascii_uppercase();
    let k = upper.find("KEEP:")?;
    let i = upper.find("IMPROVE:")?;
    let (keep, improve) = if k < i {
        (&text[k + 5..i], &text[i + 8..])
    } else {
        (&text[k + 5..], &text[i + 8..k])
    };
    let (keep, improve) = (keep.trim(), improve.trim());
    (!keep.is_empty() && !improve.is_empty()).then(|| (keep.to_string(), improve.to_string()))
}

/// Returns the text between `start` and the next `end` marker (or the end).
pub fn section<'a>(text: &'a str, start: &str, end: Option<&str>) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let rest = &text[from..];
    let to = end.and_then(|e| rest.find(e)).unwrap_or(rest.len());
    Some(rest[..to].trim_matches('\n'))
}

/// Truncates to `limit` characters, appending an ellipsis marker when cut.
pub fn truncate_chars(text: &str, limit: usize) -> (String, bool) {
    match text.char_indices().nth(limit) {
        Some((idx, _)) => (format!("{}…", &text[..idx]), true),
        None => (text.to_string(), false),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuthorError {
    #[error(transparent)]
    Agent(AgentError),
    #[error("no usable rule after {attempts} attempts: {last}")]
    Unusable { attempts: u32, last: String },
}

/// Checks a reply as a rule for `target`, returning the reason it is unusable.
pub fn accept_rule(reply: &str, target: &Consequent, labels: &LabelSpace) -> Result<FolRule, String> {
    let text = extract_rule_text(reply).ok_or_else(|| "no rule line found in the reply".to_string())?;
    let rule = parse_rule(&text).map_err(|e| e.to_string())?;
    if rule.target != *target {
        return Err(format!("consequent changed to {}; it must stay exactly {target}", rule.target));
    }
    let violations = validate_rule(&rule, labels);
    if !violations.is_empty() {
        let listed: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(format!("invalid rule: {}", listed.join("; ")));
    }
    Ok(rule)
}

/// Sends `user`, then up to `repairs` repair prompts quoting the previous reply
/// and its error. Repair calls are tagged `<tag>/repair<n>`.
pub fn author_rule(
    agent: &Agent,
    tag: &str,
    user: String,
    temperature: f64,
    target: &Consequent,
    labels: &LabelSpace,
    repairs: u32,
) -> Result<FolRule, AuthorError> {
    let mut request = ChatRequest::new(tag, RULE_AUTHOR_SYSTEM, user).temperature(temperature);
    let mut attempt = 0;
    loop {
        let reply = agent.complete(&request).map_err(AuthorError::Agent)?.text;
        let error = match accept_rule(&reply, target, labels) {
            Ok(rule) => return Ok(rule),
            Err(e) => e,
        };
        attempt += 1;
        log::info!("[{tag}] rule rejected ({error})");
        if attempt > repairs {
            return Err(AuthorError::Unusable { attempts: attempt, last: error });
        }
        let target_text = target.render();
        let body = REPAIR_RULE
            .fill(&[
                ("previous", reply.trim()),
                ("error", &error),
                ("target", &target_text),
                ("grammar", GRAMMAR_HELP),
            ])
            .expect("repair slots bound");
        request = ChatRequest::new(format!("{tag}/repair{attempt}"), RULE_AUTHOR_SYSTEM, body).temperature(temperature);
    }
}
