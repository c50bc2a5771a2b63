//! Single-choice quizzes over a confusable set, and the accuracy weight they yield.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentError, ChatRequest, DETERMINISTIC_TEMPERATURE};
use crate::confusable::ConfusableSet;
use crate::fol_rules::{Consequent, FolRule};
use crate::prompts;
use crate::Executor;

#[derive(Debug, thiserror::Error)]
pub enum QuizError {
    #[error("num_options must be at least 2, got {0}")]
    TooFewOptions(usize),
    #[error("case {case_id}: need {needed} distractor labels, only {available} available")]
    InsufficientLabels { case_id: String, needed: usize, available: usize },
    #[error("case {0} has no gold judgment")]
    Unlabelled(String),
    #[error("no quiz records to score")]
    Empty,
    #[error("quiz agent call failed for case {case_id}: {source}")]
    Agent { case_id: String, source: AgentError },
}

/// Where distractor labels come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorSource {
    /// Uniform over the label pool.
    #[default]
    Uniform,
    /// Labels of the set's hard negatives first, then uniform.
    Confusable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuizOption {
    pub letter: char,
    pub label: Consequent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuizQuestion {
    pub case_id: String,
    pub fact_text: String,
    pub target: Consequent,
    pub gold: Consequent,
    pub options: Vec<QuizOption>,
    pub correct_letter: char,
    pub is_positive: bool,
    /// Similarity to its positive, for hard negatives.
    pub similarity: Option<f64>,
}

impl QuizQuestion {
    pub fn label_of(&self, letter: char) -> Option<&Consequent> {
        self.options.iter().find(|o| o.letter == letter).map(|o| &o.label)
    }

    pub fn letters(&self) -> Vec<char> {
        self.options.iter().map(|o| o.letter).collect()
    }

    pub fn render_options(&self) -> String {
        self.options.iter().map(|o| format!("{}. {}", o.letter, o.label)).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    TN,
    FP,
    FN,
}

impl Outcome {
    pub fn is_correct(self) -> bool {
        matches!(self, Outcome::TP | Outcome::TN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningRecord {
    pub question: QuizQuestion,
    pub reasoning_text: String,
    pub correct_letter: char,
    pub predicted_letter: Option<char>,
    pub outcome: Outcome,
    pub malformed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuizResult {
    pub records: Vec<ReasoningRecord>,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub score: f64,
}

impl QuizResult {
    pub fn from_records(records: Vec<ReasoningRecord>) -> Result<Self, QuizError> {
        let score = score(&records)?;
        let count = |o: Outcome| records.iter().filter(|r| r.outcome == o).count();
        Ok(QuizResult {
            tp: count(Outcome::TP),
            tn: count(Outcome::TN),
            fp: count(Outcome::FP),
            fn_: count(Outcome::FN),
            score,
            records,
        })
    }
}

/// Fraction of correct records: `(TP + TN) / total`.
pub fn score(records: &[ReasoningRecord]) -> Result<f64, QuizError> {
    if records.is_empty() {
        return Err(QuizError::Empty);
    }
    let correct = records.iter().filter(|r| r.outcome.is_correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Outcome of choosing `predicted`. An unknown or missing letter counts as not
/// choosing the target.
pub fn classify_outcome(question: &QuizQuestion, predicted: Option<char>) -> Outcome {
    let chose_target = predicted.and_then(|l| question.label_of(l)) == Some(&question.target);
    match (chose_target, question.is_positive) {
        (true, true) => Outcome::TP,
        (true, false) => Outcome::FP,
        (false, true) => Outcome::FN,
        (false, false) => Outcome::TN,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuizConfig {
    pub num_options: usize,
    pub seed: u64,
    pub distractors: DistractorSource,
}

impl Default for QuizConfig {
    fn default() -> Self {
        QuizConfig { num_options: 4, seed: 0, distractors: DistractorSource::Uniform }
    }
}

/// One question per member of the set, positives first. `pool` is the label
/// universe of the target's kind.
pub fn make_quiz(set: &ConfusableSet, pool: &[Consequent], config: &QuizConfig) -> Result<Vec<QuizQuestion>, QuizError> {
    if config.num_options < 2 {
        return Err(QuizError::TooFewOptions(config.num_options));
    }
    let kind = set.target.kind();
    let mut pool: Vec<Consequent> = pool.iter().filter(|c| c.kind() == kind).cloned().collect();
    pool.sort();
    pool.dedup();
    let mut hard: Vec<Consequent> = set
        .negatives
        .iter()
        .filter_map(|c| c.judgment.as_ref().map(|j| Consequent::project(kind, j)))
        .collect();
    hard.sort();
    hard.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(set.len());
    for (case, similarity) in set.members() {
        let judgment = case.judgment.as_ref().ok_or_else(|| QuizError::Unlabelled(case.case_id.clone()))?;
        let gold = Consequent::project(kind, judgment);
        let is_positive = gold == set.target;
        let mut labels = vec![set.target.clone()];
        if !is_positive {
            labels.push(gold.clone());
        }
        let needed = config.num_options.saturating_sub(labels.len());
        let fresh = |c: &&Consequent| !labels.contains(c);
        let mut chosen: Vec<Consequent> = Vec::with_capacity(needed);
        if config.distractors == DistractorSource::Confusable {
            let candidates: Vec<&Consequent> = hard.iter().filter(fresh).collect();
            chosen.extend(candidates.choose_multiple(&mut rng, needed).map(|c| (*c).clone()));
        }
        let rest: Vec<&Consequent> = pool.iter().filter(fresh).filter(|c| !chosen.contains(c)).collect();
        let short = needed - chosen.len();
        if rest.len() < short {
            return Err(QuizError::InsufficientLabels {
                case_id: case.case_id.clone(),
                needed,
                available: chosen.len() + rest.len(),
            });
        }
        chosen.extend(rest.choose_multiple(&mut rng, short).map(|c| (*c).clone()));
        labels.extend(chosen);
        labels.shuffle(&mut rng);

        let options: Vec<QuizOption> = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| QuizOption { letter: (b'A' + i as u8) as char, label })
            .collect();
        let correct_letter = options.iter().find(|o| o.label == gold).map(|o| o.letter).expect("gold is an option");
        out.push(QuizQuestion {
            case_id: case.case_id.clone(),
            fact_text: case.fact_text.clone(),
            target: set.target.clone(),
            gold,
            options,
            correct_letter,
            is_positive,
            similarity,
        });
    }
    Ok(out)
}

/// Tag of the quiz call for one question; the re-ask appends `/reask`.
pub fn quiz_tag(rule: &FolRule, question: &QuizQuestion) -> String {
    format!("quiz/{}/{}", rule.rule_id, question.case_id)
}

fn ask(rule: &FolRule, question: &QuizQuestion, agent: &Agent) -> Result<ReasoningRecord, QuizError> {
    let agent_err = |source| QuizError::Agent { case_id: question.case_id.clone(), source };
    let user = prompts::QUIZ
        .fill(&[("rule", &rule.text()), ("fact", &question.fact_text), ("options", &question.render_options())])
        .expect("quiz slots bound");
    let tag = quiz_tag(rule, question);
    let request =
        ChatRequest::new(tag.clone(), prompts::JUDGE_SYSTEM, user.clone()).temperature(DETERMINISTIC_TEMPERATURE);
    let letters = question.letters();
    let valid = |text: &str| prompts::parse_answer_letter(text).filter(|l| letters.contains(l));

    let first = agent.complete(&request).map_err(agent_err)?.text;
    let (text, predicted) = match valid(&first) {
        Some(l) => (first, Some(l)),
        None => {
            let listed: Vec<String> = letters.iter().map(char::to_string).collect();
            let reask = format!(
                "{user}\n\nYour previous reply could not be read. End your reply with a line \"Answer: <letter>\" using one of: {}.",
                listed.join(", ")
            );
            let req = ChatRequest::new(format!("{tag}/reask"), prompts::JUDGE_SYSTEM, reask)
                .temperature(DETERMINISTIC_TEMPERATURE);
            let second = agent.complete(&req).map_err(agent_err)?.text;
            let p = valid(&second);
            if p.is_none() {
                log::warn!("quiz answer for {} unreadable after re-ask", question.case_id);
            }
            (second, p)
        }
    };
    Ok(ReasoningRecord {
        reasoning_text: prompts::parse_reasoning(&text),
        correct_letter: question.correct_letter,
        predicted_letter: predicted,
        outcome: classify_outcome(question, predicted),
        malformed: predicted.is_none(),
        question: question.clone(),
    })
}

/// Asks every question under `rule`. Records keep question order.
pub fn run_quiz(rule: &FolRule, questions: &[QuizQuestion], agent: &Agent, exec: &Executor) -> Result<QuizResult, QuizError> {
    let records = exec.map(questions, |q| ask(rule, q, agent)).into_iter().collect::<Result<Vec<_>, _>>()?;
    QuizResult::from_records(records)
}
