//! First rule per target label, authored from grouped precedents in three
//! agent steps: summarize circumstances, define symbols, construct the rule.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentError, ChatRequest, CREATIVE_TEMPERATURE, DETERMINISTIC_TEMPERATURE};
use crate::corpus::{LabelSpace, LegalCase};
use crate::fol_rules::{is_identifier, parse_rule, Consequent, FolRule, ParseError, Provenance, Quantifier};
use crate::prompts::{self, AuthorError};
use crate::Executor;

pub const UNSPECIFIED: &str = "unspecified";

#[derive(Debug, thiserror::Error)]
pub enum InitError {
    #[error("target {0} has no precedents")]
    NoPrecedents(String),
    #[error("{stage} call failed: {source}")]
    Agent { stage: &'static str, source: AgentError },
    #[error("symbol table unusable after repairs: {0}")]
    Symbols(String),
    #[error("rule construction failed: {0}")]
    Rule(AuthorError),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircumstanceFactors {
    pub subject_category: String,
    pub victim_category: String,
    pub time_location: String,
    pub behavior: String,
    pub consequences: String,
    pub mental_state: String,
}

const FACTOR_LABELS: [&str; 6] = ["subject", "victim", "time and location", "behavior", "consequences", "mental state"];

impl CircumstanceFactors {
    /// Reads the six labelled lines; a missing or empty line becomes `unspecified`.
    pub fn parse(text: &str) -> Self {
        let mut values: [Option<String>; 6] = Default::default();
        for line in text.lines() {
            let line = line.trim().trim_start_matches(['-', '*', ' ']);
            let Some((label, value)) = line.split_once(':') else { continue };
            let label = label.trim().trim_matches('*').to_ascii_lowercase();
            let value = value.trim();
            if let Some(i) = FACTOR_LABELS.iter().position(|l| label.starts_with(l)) {
                if !value.is_empty() && values[i].is_none() {
                    values[i] = Some(value.to_string());
                }
            }
        }
        let [s, v, t, b, c, m] = values.map(|v| v.unwrap_or_else(|| UNSPECIFIED.to_string()));
        for (label, missing) in FACTOR_LABELS.iter().zip([&s, &v, &t, &b, &c, &m]) {
            if missing == UNSPECIFIED {
                log::debug!("circumstance factor {label:?} unspecified");
            }
        }
        CircumstanceFactors { subject_category: s, victim_category: v, time_location: t, behavior: b, consequences: c, mental_state: m }
    }

    pub fn render(&self) -> String {
        format!(
            "Subject: {}\nVictim: {}\nTime and location: {}\nBehavior: {}\nConsequences: {}\nMental state: {}",
            self.subject_category, self.victim_category, self.time_location, self.behavior, self.consequences, self.mental_state
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateSymbol {
    pub name: String,
    pub arity: usize,
    pub meaning: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSymbol {
    pub name: String,
    pub denotes: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolTable {
    pub variables: Vec<VariableSymbol>,
    pub predicates: Vec<PredicateSymbol>,
    pub quantifiers: BTreeMap<String, Quantifier>,
}

impl SymbolTable {
    /// Parses `PRED`, `VAR` and `QUANT` lines; other lines are ignored.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut table = SymbolTable::default();
        for raw in text.lines() {
            let line = raw.trim().trim_start_matches(['-', '*', ' ']);
            let Some((head, rest)) = line.split_once(char::is_whitespace) else { continue };
            let Some((name, desc)) = rest.split_once(':') else { continue };
            let (name, desc) = (name.trim(), desc.trim().to_string());
            match head.to_ascii_uppercase().as_str() {
                "PRED" => {
                    let (n, a) = name.split_once('/').ok_or_else(|| format!("predicate {name} lacks /arity"))?;
                    let arity = a.trim().parse().map_err(|_| format!("predicate {n} has a bad arity {a:?}"))?;
                    table.predicates.push(PredicateSymbol { name: n.trim().to_string(), arity, meaning: desc });
                }
                "VAR" => table.variables.push(VariableSymbol { name: name.to_string(), denotes: desc }),
                "QUANT" => {
                    let q = match desc.to_ascii_uppercase().as_str() {
                        "FORALL" => Quantifier::ForAll,
                        "EXISTS" => Quantifier::Exists,
                        other => return Err(format!("quantifier for {name} must be FORALL or EXISTS, got {other:?}")),
                    };
                    if table.quantifiers.insert(name.to_string(), q).is_some() {
                        return Err(format!("duplicate quantifier for {name}"));
                    }
                }
                _ => {}
            }
        }
        if table.predicates.is_empty() {
            return Err("no PRED lines found".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in table.predicates.iter().map(|p| &p.name).chain(table.variables.iter().map(|v| &v.name)) {
            if !is_identifier(name) {
                return Err(format!("{name:?} is not an identifier"));
            }
            if !seen.insert(name.as_str()) {
                return Err(format!("duplicate name {name}"));
            }
        }
        Ok(table)
    }

    pub fn render(&self) -> String {
        let mut lines: Vec<String> =
            self.predicates.iter().map(|p| format!("PRED {}/{}: {}", p.name, p.arity, p.meaning)).collect();
        lines.extend(self.variables.iter().map(|v| format!("VAR {}: {}", v.name, v.denotes)));
        lines.extend(self.quantifiers.iter().map(|(v, q)| format!("QUANT {v}: {}", q.keyword())));
        lines.join("\n")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub precedents_per_target: usize,
    pub precedent_chars: usize,
    pub repair_attempts: u32,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { precedents_per_target: 3, precedent_chars: 1200, repair_attempts: 2 }
    }
}

fn call(agent: &Agent, stage: &'static str, req: ChatRequest) -> Result<String, InitError> {
    agent.complete(&req).map(|r| r.text).map_err(|source| InitError::Agent { stage, source })
}

pub fn init_tag(target: &Consequent, step: &str) -> String {
    format!("init/{}/{step}", target.key())
}

pub fn summarize_circumstances(
    target: &Consequent,
    precedents: &[LegalCase],
    agent: &Agent,
    config: &InitConfig,
) -> Result<CircumstanceFactors, InitError> {
    if precedents.is_empty() {
        return Err(InitError::NoPrecedents(target.key()));
    }
    let listed: Vec<String> = precedents
        .iter()
        .enumerate()
        .map(|(i, c)| format!("[{}] {}", i + 1, prompts::truncate_chars(&c.fact_text, config.precedent_chars).0))
        .collect();
    let user = prompts::SUMMARIZE
        .fill(&[("target", &target.render()), ("precedents", &listed.join("\n\n"))])
        .expect("slots bound");
    let req = ChatRequest::new(init_tag(target, "summarize"), prompts::RULE_AUTHOR_SYSTEM, user)
        .temperature(DETERMINISTIC_TEMPERATURE);
    Ok(CircumstanceFactors::parse(&call(agent, "summarize", req)?))
}

pub fn define_symbols(
    target: &Consequent,
    factors: &CircumstanceFactors,
    agent: &Agent,
    config: &InitConfig,
) -> Result<SymbolTable, InitError> {
    let original = prompts::DEFINE_SYMBOLS
        .fill(&[("target", &target.render()), ("factors", &factors.render())])
        .expect("slots bound");
    let tag = init_tag(target, "symbols");
    let mut req = ChatRequest::new(tag.clone(), prompts::RULE_AUTHOR_SYSTEM, original.clone())
        .temperature(DETERMINISTIC_TEMPERATURE);
    let mut attempt = 0;
    loop {
        let text = call(agent, "define-symbols", req)?;
        let error = match SymbolTable::parse(&text) {
            Ok(t) => return Ok(t),
            Err(e) => e,
        };
        attempt += 1;
        if attempt > config.repair_attempts {
            return Err(InitError::Symbols(error));
        }
        log::info!("[{tag}] symbols rejected ({error})");
        let user = prompts::REPAIR_SYMBOLS.fill(&[("original", &original), ("error", &error)]).expect("slots bound");
        req = ChatRequest::new(format!("{tag}/repair{attempt}"), prompts::RULE_AUTHOR_SYSTEM, user)
            .temperature(DETERMINISTIC_TEMPERATURE);
    }
}

/// Runs the three steps for one target. The rule has version 0.
pub fn init_rule_for_target(
    target: &Consequent,
    precedents: &[LegalCase],
    agent: &Agent,
    labels: &LabelSpace,
    config: &InitConfig,
) -> Result<FolRule, InitError> {
    let factors = summarize_circumstances(target, precedents, agent, config)?;
    let symbols = define_symbols(target, &factors, agent, config)?;
    let t = target.render();
    let user = prompts::CONSTRUCT_RULE
        .fill(&[
            ("target", &t),
            ("factors", &factors.render()),
            ("symbols", &symbols.render()),
            ("grammar", prompts::GRAMMAR_HELP),
        ])
        .expect("slots bound");
    let mut rule = prompts::author_rule(
        agent,
        &init_tag(target, "rule"),
        user,
        CREATIVE_TEMPERATURE,
        target,
        labels,
        config.repair_attempts,
    )
    .map_err(InitError::Rule)?;
    rule.rule_id = format!("{}/0", target.key());
    rule.version = 0;
    rule.provenance = Provenance::Initialized;
    Ok(rule)
}

#[derive(Debug)]
pub struct InitFailure {
    pub target: Consequent,
    pub error: InitError,
}

#[derive(Debug, Default)]
pub struct InitReport {
    pub rules: RuleSet,
    pub failures: Vec<InitFailure>,
}

/// Initializes every target independently; failures do not stop the others.
pub fn init_all_rules(
    targets: &[Consequent],
    groups: &BTreeMap<Consequent, Vec<LegalCase>>,
    agent: &Agent,
    labels: &LabelSpace,
    config: &InitConfig,
    exec: &Executor,
) -> InitReport {
    let results = exec.map(targets, |t| {
        let precedents = groups.get(t).map(Vec::as_slice).unwrap_or_default();
        let k = config.precedents_per_target.max(1).min(precedents.len());
        init_rule_for_target(t, &precedents[..k], agent, labels, config)
    });
    let mut report = InitReport::default();
    for (target, result) in targets.iter().zip(results) {
        match result {
            Ok(rule) => {
                report.rules.insert(rule);
            }
            Err(error) => {
                log::warn!("initialization failed for {}: {error}", target.key());
                report.failures.push(InitFailure { target: target.clone(), error });
            }
        }
    }
    report
}

/// One rule per target, ordered by target.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RuleSet {
    rules: BTreeMap<Consequent, FolRule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredRule {
    pub target: Consequent,
    pub rule_text: String,
    pub version: u32,
    pub provenance: Provenance,
    pub created_at: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RuleSetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("rule set {path}: {message}")]
    Format { path: String, message: String },
    #[error("stored rule for {target}: {source}")]
    Rule { target: String, source: ParseError },
}

impl RuleSet {
    pub fn insert(&mut self, rule: FolRule) -> Option<FolRule> {
        self.rules.insert(rule.target.clone(), rule)
    }

    pub fn get(&self, target: &Consequent) -> Option<&FolRule> {
        self.rules.get(target)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FolRule> {
        self.rules.values()
    }

    pub fn targets(&self) -> impl Iterator<Item = &Consequent> {
        self.rules.keys()
    }

    /// `created_at` is supplied by the caller so output stays reproducible.
    pub fn to_stored(&self, created_at: &str) -> Vec<StoredRule> {
        self.rules
            .values()
            .map(|r| StoredRule {
                target: r.target.clone(),
                rule_text: r.text(),
                version: r.version,
                provenance: r.provenance.clone(),
                created_at: created_at.to_string(),
            })
            .collect()
    }

    pub fn from_stored(stored: Vec<StoredRule>) -> Result<Self, RuleSetError> {
        let mut set = RuleSet::default();
        for s in stored {
            let mut rule =
                parse_rule(&s.rule_text).map_err(|source| RuleSetError::Rule { target: s.target.key(), source })?;
            rule.version = s.version;
            rule.provenance = s.provenance;
            rule.rule_id = format!("{}/{}", rule.target.key(), rule.version);
            set.insert(rule);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path, created_at: &str) -> Result<(), RuleSetError> {
        let text = serde_json::to_string_pretty(&self.to_stored(created_at)).expect("rules serialize");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RuleSetError> {
        let text = std::fs::read_to_string(path)?;
        let stored: Vec<StoredRule> = serde_json::from_str(&text)
            .map_err(|e| RuleSetError::Format { path: path.display().to_string(), message: e.to_string() })?;
        RuleSet::from_stored(stored)
    }
}

impl FromIterator<FolRule> for RuleSet {
    fn from_iter<I: IntoIterator<Item = FolRule>>(iter: I) -> Self {
        let mut set = RuleSet::default();
        for r in iter {
            set.insert(r);
        }
        set
    }
}
