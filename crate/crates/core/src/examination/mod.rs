//! Final prediction: candidate prescreening, optional abstraction of long
//! facts, and rule checks over candidates with a randomized fallback.

mod perceptron;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, ChatRequest, DETERMINISTIC_TEMPERATURE};
use crate::confusable::fnv1a;
use crate::corpus::{LabelSpace, LegalCase};
use crate::fol_rules::{Consequent, FolRule};
use crate::prompts;
use crate::rule_init::RuleSet;
use crate::Executor;

pub use perceptron::{NgramPerceptron, PerceptronConfig};

pub const NO_RULE_SATISFIED: &str = "no rule satisfied";

#[derive(Debug, thiserror::Error)]
pub enum ExamError {
    #[error("candidate provider has no labels for {0:?}")]
    Untrained(Subtask),
    #[error("no candidates for {0:?}")]
    NoCandidates(Subtask),
    #[error("case {0} has no gold judgment")]
    Unlabelled(String),
    #[error("candidate model: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    Article,
    Charge,
    PrisonTerm,
}

impl Subtask {
    pub const ALL: [Subtask; 3] = [Subtask::Article, Subtask::Charge, Subtask::PrisonTerm];

    pub fn name(self) -> &'static str {
        match self {
            Subtask::Article => "article",
            Subtask::Charge => "charge",
            Subtask::PrisonTerm => "term",
        }
    }

    pub fn gold(self, case: &LegalCase) -> Option<&str> {
        case.judgment.as_ref().map(|j| match self {
            Subtask::Article => j.article.as_str(),
            Subtask::Charge => j.charge.as_str(),
            Subtask::PrisonTerm => j.prison_term.as_str(),
        })
    }

    pub fn labels(self, space: &LabelSpace) -> &[String] {
        match self {
            Subtask::Article => &space.articles,
            Subtask::Charge => &space.charges,
            Subtask::PrisonTerm => &space.prison_terms,
        }
    }
}

/// Scores every label of a subtask for a fact.
pub trait CandidateProvider: Send + Sync {
    fn labels(&self, subtask: Subtask) -> &[String];
    fn scores(&self, fact: &str, subtask: Subtask) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub subtask: Subtask,
    pub entries: Vec<(String, f64)>,
}

impl CandidateList {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(l, _)| l.as_str())
    }
}

/// Top `k` labels by score; ties keep the provider's label order.
pub fn candidate_labels(
    fact: &str,
    subtask: Subtask,
    provider: &dyn CandidateProvider,
    k: usize,
) -> Result<CandidateList, ExamError> {
    let labels = provider.labels(subtask);
    if labels.is_empty() {
        return Err(ExamError::Untrained(subtask));
    }
    let mut entries: Vec<(String, f64)> = labels.iter().cloned().zip(provider.scores(fact, subtask)).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1));
    entries.truncate(k);
    Ok(CandidateList { subtask, entries })
}

/// Default provider: one perceptron per subtask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateModel {
    pub article: NgramPerceptron,
    pub charge: NgramPerceptron,
    pub prison_term: NgramPerceptron,
}

impl CandidateModel {
    pub fn train(cases: &[LegalCase], config: &PerceptronConfig, exec: &Executor) -> Result<Self, ExamError> {
        let model = |subtask: Subtask| -> Result<NgramPerceptron, ExamError> {
            let docs = cases
                .iter()
                .map(|c| Ok((c.fact_text.as_str(), subtask.gold(c).ok_or_else(|| ExamError::Unlabelled(c.case_id.clone()))?)))
                .collect::<Result<Vec<_>, ExamError>>()?;
            Ok(NgramPerceptron::train(&docs, config, exec))
        };
        Ok(CandidateModel { article: model(Subtask::Article)?, charge: model(Subtask::Charge)?, prison_term: model(Subtask::PrisonTerm)? })
    }

    fn model(&self, subtask: Subtask) -> &NgramPerceptron {
        match subtask {
            Subtask::Article => &self.article,
            Subtask::Charge => &self.charge,
            Subtask::PrisonTerm => &self.prison_term,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ExamError> {
        let text = serde_json::to_string(self).map_err(|e| ExamError::Model(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ExamError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ExamError::Model(format!("{}: {e}", path.display())))
    }
}

impl CandidateProvider for CandidateModel {
    fn labels(&self, subtask: Subtask) -> &[String] {
        &self.model(subtask).labels
    }

    fn scores(&self, fact: &str, subtask: Subtask) -> Vec<f64> {
        self.model(subtask).scores(fact)
    }
}

/// Returns the fact unchanged when short enough, otherwise the agent's abstract
/// capped at `threshold` characters. The flag is true when an abstract is used.
pub fn maybe_abstract(case_id: &str, fact: &str, threshold: usize, agent: &Agent) -> (String, bool) {
    let hard_cut = |t: &str| t.chars().take(threshold).collect::<String>();
    if fact.chars().count() <= threshold {
        return (fact.to_string(), false);
    }
    let user = prompts::ABSTRACT.fill(&[("limit", &threshold.to_string()), ("fact", fact)]).expect("slots bound");
    let req = ChatRequest::new(format!("exam/{case_id}/abstract"), prompts::JUDGE_SYSTEM, user)
        .temperature(DETERMINISTIC_TEMPERATURE);
    match agent.complete(&req) {
        Ok(r) if !r.text.trim().is_empty() => {
            let text = r.text.trim();
            if text.chars().count() > threshold {
                log::warn!("abstract of {case_id} exceeds {threshold} characters; truncating");
            }
            (hard_cut(text), true)
        }
        Ok(_) => {
            log::warn!("empty abstract for {case_id}; truncating the fact");
            (hard_cut(fact), false)
        }
        Err(e) => {
            log::warn!("abstract for {case_id} failed ({e}); truncating the fact");
            (hard_cut(fact), false)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskFlags {
    pub article: bool,
    pub charge: bool,
    pub term: bool,
}

impl SubtaskFlags {
    fn set(&mut self, subtask: Subtask, value: bool) {
        match subtask {
            Subtask::Article => self.article = value,
            Subtask::Charge => self.charge = value,
            Subtask::PrisonTerm => self.term = value,
        }
    }
}

/// One line of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: String,
    pub article: String,
    pub charge: String,
    pub term: String,
    pub used_fallback: SubtaskFlags,
    pub used_abstract: bool,
    pub rationale: String,
}

impl Prediction {
    pub fn label(&self, subtask: Subtask) -> &str {
        match subtask {
            Subtask::Article => &self.article,
            Subtask::Charge => &self.charge,
            Subtask::PrisonTerm => &self.term,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExamConfig {
    pub top_k: usize,
    pub abstract_threshold: usize,
    pub seed: u64,
}

impl Default for ExamConfig {
    fn default() -> Self {
        ExamConfig { top_k: 10, abstract_threshold: 4000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub article: CandidateList,
    pub charge: CandidateList,
    pub prison_term: CandidateList,
}

impl Candidates {
    pub fn compute(fact: &str, provider: &dyn CandidateProvider, k: usize) -> Result<Self, ExamError> {
        Ok(Candidates {
            article: candidate_labels(fact, Subtask::Article, provider, k)?,
            charge: candidate_labels(fact, Subtask::Charge, provider, k)?,
            prison_term: candidate_labels(fact, Subtask::PrisonTerm, provider, k)?,
        })
    }

    fn get(&self, subtask: Subtask) -> &CandidateList {
        match subtask {
            Subtask::Article => &self.article,
            Subtask::Charge => &self.charge,
            Subtask::PrisonTerm => &self.prison_term,
        }
    }
}

/// The rule that decides `label` for `subtask`. Article labels use an article
/// rule when present, else the first charge rule, else the first term rule for
/// that article. Charge and term labels use the rule anchored on `article`.
pub fn rule_for<'a>(rules: &'a RuleSet, subtask: Subtask, label: &str, article: &str) -> Option<&'a FolRule> {
    match subtask {
        Subtask::Article => rules.get(&Consequent::Article { article: label.into() }).or_else(|| {
            let anchored = |c: &Consequent| c.article() == label;
            rules
                .iter()
                .find(|r| matches!(r.target, Consequent::ArticleCharge { .. }) && anchored(&r.target))
                .or_else(|| rules.iter().find(|r| anchored(&r.target)))
        }),
        Subtask::Charge => rules.get(&Consequent::ArticleCharge { article: article.into(), charge: label.into() }),
        Subtask::PrisonTerm => {
            rules.get(&Consequent::ArticlePrisonTerm { article: article.into(), prison_term: label.into() })
        }
    }
}

pub fn check_tag(case_id: &str, subtask: Subtask, rule: &FolRule) -> String {
    format!("exam/{case_id}/{}/{}", subtask.name(), rule.target.key())
}

struct Decision {
    label: String,
    fallback: bool,
    rationale: String,
}

fn check(case_id: &str, fact: &str, subtask: Subtask, rule: &FolRule, agent: &Agent) -> Option<String> {
    let user = prompts::CHECK_RULE.fill(&[("rule", &rule.text()), ("fact", fact)]).expect("slots bound");
    let req = ChatRequest::new(check_tag(case_id, subtask, rule), prompts::JUDGE_SYSTEM, user)
        .temperature(DETERMINISTIC_TEMPERATURE);
    match agent.complete(&req) {
        Ok(r) => match prompts::parse_verdict(&r.text) {
            Some(true) => Some(prompts::parse_reasoning(&r.text)),
            Some(false) => None,
            None => {
                log::warn!("[{}] no verdict in reply; treating as NO", req.tag);
                None
            }
        },
        Err(e) => {
            log::warn!("[{}] check failed ({e}); treating as NO", req.tag);
            None
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn decide(
    case_id: &str,
    fact: &str,
    subtask: Subtask,
    candidates: &CandidateList,
    universe: &[String],
    article: &str,
    rules: &RuleSet,
    agent: &Agent,
    seed: u64,
) -> Result<Decision, ExamError> {
    for label in candidates.labels() {
        if let Some(rule) = rule_for(rules, subtask, label, article) {
            if let Some(reason) = check(case_id, fact, subtask, rule, agent) {
                return Ok(Decision { label: label.to_string(), fallback: false, rationale: reason });
            }
        }
    }
    let mut remaining: Vec<&String> = universe
        .iter()
        .filter(|l| !candidates.labels().any(|c| c == l.as_str()))
        .filter(|l| rule_for(rules, subtask, l, article).is_some())
        .collect();
    let mix = fnv1a(format!("{case_id}/{}", subtask.name()).as_bytes());
    remaining.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ mix));
    for label in remaining {
        let rule = rule_for(rules, subtask, label, article).expect("filtered on rule presence");
        if let Some(reason) = check(case_id, fact, subtask, rule, agent) {
            return Ok(Decision { label: label.clone(), fallback: true, rationale: reason });
        }
    }
    let top = candidates.labels().next().ok_or(ExamError::NoCandidates(subtask))?;
    Ok(Decision { label: top.to_string(), fallback: true, rationale: NO_RULE_SATISFIED.into() })
}

/// Predicts article, then charge and term anchored on the predicted article.
pub fn predict_case(
    case_id: &str,
    fact: &str,
    rules: &RuleSet,
    candidates: &Candidates,
    labels: &LabelSpace,
    agent: &Agent,
    seed: u64,
) -> Result<Prediction, ExamError> {
    let mut flags = SubtaskFlags::default();
    let mut chosen = Vec::with_capacity(3);
    let mut rationale = Vec::with_capacity(3);
    let mut article = String::new();
    for subtask in Subtask::ALL {
        let d = decide(case_id, fact, subtask, candidates.get(subtask), subtask.labels(labels), &article, rules, agent, seed)?;
        if subtask == Subtask::Article {
            article = d.label.clone();
        }
        flags.set(subtask, d.fallback);
        rationale.push(format!("{}: {}", subtask.name(), d.rationale));
        chosen.push(d.label);
    }
    let mut it = chosen.into_iter();
    Ok(Prediction {
        case_id: case_id.to_string(),
        article: it.next().unwrap_or_default(),
        charge: it.next().unwrap_or_default(),
        term: it.next().unwrap_or_default(),
        used_fallback: flags,
        used_abstract: false,
        rationale: rationale.join("\n"),
    })
}

/// Abstracts, prescreens and predicts every case; output keeps case order.
pub fn examine_cases(
    cases: &[LegalCase],
    rules: &RuleSet,
    provider: &dyn CandidateProvider,
    labels: &LabelSpace,
    agent: &Agent,
    config: &ExamConfig,
    exec: &Executor,
) -> Result<Vec<Prediction>, ExamError> {
    exec.map(cases, |case| {
        let (fact, used_abstract) = maybe_abstract(&case.case_id, &case.fact_text, config.abstract_threshold, agent);
        let candidates = Candidates::compute(&fact, provider, config.top_k)?;
        let mut p = predict_case(&case.case_id, &fact, rules, &candidates, labels, agent, config.seed)?;
        p.used_abstract = used_abstract;
        Ok(p)
    })
    .into_iter()
    .collect()
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> std::io::Result<()> {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p).expect("predictions serialize"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, ExamError> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ExamError::Model(format!("{}: {e}", path.display()))))
        .collect()
}
