//! Contrastive refinement of a rule from its quiz experience.
//!
//! Correct and incorrect reasoning records are analysed separately, merged into
//! a keep/improve direction, and the rule is rewritten along that direction
//! with its consequent held fixed.

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentError, ChatRequest, CREATIVE_TEMPERATURE, DETERMINISTIC_TEMPERATURE};
use crate::corpus::LabelSpace;
use crate::fol_rules::{FolRule, Provenance};
use crate::prompts::{self, AuthorError};
use crate::quiz::{QuizResult, ReasoningRecord};

pub const NONE_IDENTIFIED: &str = "none identified";

#[derive(Debug, thiserror::Error)]
pub enum CaclError {
    #[error("no quiz records to contrast")]
    NothingToContrast,
    #[error("{stage} call failed: {source}")]
    Agent { stage: &'static str, source: AgentError },
    #[error("synthesis reply lacked KEEP:/IMPROVE: sections after a re-ask")]
    UnreadableDirection,
    #[error("rewrite failed: {0}")]
    Rewrite(AuthorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaclConfig {
    pub max_records_per_side: usize,
    pub fact_limit: usize,
    pub repair_attempts: u32,
}

impl Default for CaclConfig {
    fn default() -> Self {
        CaclConfig { max_records_per_side: 20, fact_limit: 1200, repair_attempts: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastTriplet {
    pub anchor: FolRule,
    pub positives: Vec<ReasoningRecord>,
    pub negatives: Vec<ReasoningRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizationDirection {
    pub keep: String,
    pub improve: String,
}

/// Splits records into correct and incorrect sides, preserving order.
pub fn build_triplet(rule: &FolRule, result: &QuizResult) -> ContrastTriplet {
    let (positives, negatives) = result.records.iter().cloned().partition(|r| r.outcome.is_correct());
    ContrastTriplet { anchor: rule.clone(), positives, negatives }
}

fn render_records(records: &[&ReasoningRecord], fact_limit: usize) -> String {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let (fact, cut) = prompts::truncate_chars(&r.question.fact_text, fact_limit);
        if cut {
            log::debug!("fact of {} truncated to {fact_limit} characters", r.question.case_id);
        }
        let predicted = r.predicted_letter.map(String::from).unwrap_or_else(|| "none".into());
        out.push_str(&format!(
            "[Question {}] case {}\nFacts: {}\nOptions:\n{}\nCorrect option: {}\nPredicted option: {}\nReasoning: {}\n\n",
            i + 1,
            r.question.case_id,
            fact,
            r.question.render_options(),
            r.correct_letter,
            predicted,
            r.reasoning_text,
        ));
    }
    out.trim_end().to_string()
}

/// The first `max` correct records, in order.
fn pick_positives(records: &[ReasoningRecord], max: usize) -> Vec<&ReasoningRecord> {
    records.iter().take(max).collect()
}

/// The `max` incorrect records, hardest negatives (highest similarity) first.
fn pick_negatives(records: &[ReasoningRecord], max: usize) -> Vec<&ReasoningRecord> {
    let mut picked: Vec<&ReasoningRecord> = records.iter().collect();
    picked.sort_by(|a, b| match (a.question.similarity, b.question.similarity) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    picked.truncate(max);
    picked
}

fn call(agent: &Agent, stage: &'static str, tag: String, user: String) -> Result<String, CaclError> {
    let req = ChatRequest::new(tag, prompts::RULE_AUTHOR_SYSTEM, user).temperature(DETERMINISTIC_TEMPERATURE);
    agent.complete(&req).map(|r| r.text).map_err(|source| CaclError::Agent { stage, source })
}

/// Tag prefix for every CACL call on `rule`.
pub fn cacl_tag(rule: &FolRule) -> String {
    format!("cacl/{}", rule.rule_id)
}

/// Keep analysis, improve analysis and synthesis; an empty side skips its call.
pub fn derive_direction(
    triplet: &ContrastTriplet,
    agent: &Agent,
    config: &CaclConfig,
) -> Result<OptimizationDirection, CaclError> {
    if triplet.positives.is_empty() && triplet.negatives.is_empty() {
        return Err(CaclError::NothingToContrast);
    }
    let base = cacl_tag(&triplet.anchor);
    let rule_text = triplet.anchor.text();
    let limit = config.fact_limit;

    let keep = if triplet.positives.is_empty() {
        NONE_IDENTIFIED.to_string()
    } else {
        let records = render_records(&pick_positives(&triplet.positives, config.max_records_per_side), limit);
        let user = prompts::KEEP_ANALYSIS.fill(&[("rule", &rule_text), ("records", &records)]).expect("slots bound");
        call(agent, "keep-analysis", format!("{base}/keep"), user)?
    };
    let improve = if triplet.negatives.is_empty() {
        NONE_IDENTIFIED.to_string()
    } else {
        let records = render_records(&pick_negatives(&triplet.negatives, config.max_records_per_side), limit);
        let user = prompts::IMPROVE_ANALYSIS.fill(&[("rule", &rule_text), ("records", &records)]).expect("slots bound");
        call(agent, "improve-analysis", format!("{base}/improve"), user)?
    };

    let user = prompts::SYNTHESIZE_DIRECTION.fill(&[("keep", &keep), ("improve", &improve)]).expect("slots bound");
    let reply = call(agent, "synthesis", format!("{base}/synthesize"), user.clone())?;
    let (k, i) = match prompts::parse_direction_sections(&reply) {
        Some(parts) => parts,
        None => {
            let reask = format!("{user}\n\nYour previous reply lacked the two sections. Start one line with KEEP: and another with IMPROVE:.");
            let reply = call(agent, "synthesis", format!("{base}/synthesize/reask"), reask)?;
            prompts::parse_direction_sections(&reply).ok_or(CaclError::UnreadableDirection)?
        }
    };
    Ok(OptimizationDirection {
        keep: if triplet.positives.is_empty() { NONE_IDENTIFIED.into() } else { k },
        improve: if triplet.negatives.is_empty() { NONE_IDENTIFIED.into() } else { i },
    })
}

/// Rewrites `rule` along `direction`. The child keeps the parent's consequent,
/// gets version `parent + 1` and records its parent.
pub fn apply_direction(
    rule: &FolRule,
    direction: &OptimizationDirection,
    agent: &Agent,
    labels: &LabelSpace,
    config: &CaclConfig,
) -> Result<FolRule, CaclError> {
    let target = rule.target.render();
    let user = prompts::REWRITE_RULE
        .fill(&[
            ("rule", &rule.text()),
            ("keep", &direction.keep),
            ("improve", &direction.improve),
            ("target", &target),
            ("grammar", prompts::GRAMMAR_HELP),
        ])
        .expect("slots bound");
    let tag = format!("{}/rewrite", cacl_tag(rule));
    let mut child =
        prompts::author_rule(agent, &tag, user, CREATIVE_TEMPERATURE, &rule.target, labels, config.repair_attempts)
            .map_err(CaclError::Rewrite)?;
    child.version = rule.version + 1;
    child.rule_id = format!("{}/{}", rule.target.key(), child.version);
    child.provenance = Provenance::OptimizedFrom(rule.rule_id.clone());
    Ok(child)
}

/// Triplet, direction and rewrite in one step.
pub fn refine(
    rule: &FolRule,
    result: &QuizResult,
    agent: &Agent,
    labels: &LabelSpace,
    config: &CaclConfig,
) -> Result<FolRule, CaclError> {
    let triplet = build_triplet(rule, result);
    let direction = derive_direction(&triplet, agent, config)?;
    apply_direction(rule, &direction, agent, labels, config)
}
