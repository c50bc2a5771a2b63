//! Weighted tree of rule versions and the best-first refinement loop.
//!
//! Each node holds one rule; its weight is the rule's quiz accuracy. The loop
//! evaluates every unevaluated node, stops once the best weight reaches the
//! threshold or the iteration budget is spent, and otherwise refines the best
//! node into a new child.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::Agent;
use crate::cacl::{self, CaclConfig, CaclError};
use crate::corpus::LabelSpace;
use crate::fol_rules::{parse_rule, Consequent, FolRule, ParseError, Provenance};
use crate::quiz::{self, QuizError, QuizQuestion, QuizResult, ReasoningRecord};
use crate::Executor;

#[derive(Debug, thiserror::Error)]
pub enum TreeError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("no evaluated node")]
    NothingEvaluated,
    #[error("node {0} has not been evaluated")]
    NotEvaluated(String),
    #[error("no quiz questions")]
    NoQuestions,
    #[error(transparent)]
    Quiz(#[from] QuizError),
    #[error(transparent)]
    Cacl(#[from] CaclError),
    #[error("tree store: {0}")]
    Store(String),
    #[error("tree store rule of node {node}: {source}")]
    StoreRule { node: String, source: ParseError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleNode {
    pub node_id: String,
    pub rule: FolRule,
    pub parent: Option<String>,
    pub children: Vec<String>,
    pub eval: Option<QuizResult>,
}

impl RuleNode {
    pub fn weight(&self) -> Option<f64> {
        self.eval.as_ref().map(|e| e.score)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub defined_score: f64,
    pub max_iterations: u32,
    pub cacl: CaclConfig,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig { defined_score: 0.9, max_iterations: 5, cacl: CaclConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationTree {
    pub target: Consequent,
    nodes: Vec<RuleNode>,
    index: BTreeMap<String, usize>,
    pub max_score: f64,
    pub max_pointer: Option<String>,
    pub iteration: u32,
}

fn node_id(rule: &FolRule, seq: usize) -> String {
    format!("{}/{}/{}", rule.target.key(), rule.version, seq)
}

impl OptimizationTree {
    /// Single unevaluated root. The root's rule id becomes its node id.
    pub fn new(initial: FolRule) -> Self {
        let mut tree = OptimizationTree {
            target: initial.target.clone(),
            nodes: Vec::new(),
            index: BTreeMap::new(),
            max_score: 0.0,
            max_pointer: None,
            iteration: 0,
        };
        tree.insert(initial, None);
        tree
    }

    fn insert(&mut self, mut rule: FolRule, parent: Option<&str>) -> String {
        let id = node_id(&rule, self.nodes.len());
        rule.rule_id = id.clone();
        if let Some(p) = parent {
            let pi = self.index[p];
            self.nodes[pi].children.push(id.clone());
        }
        self.index.insert(id.clone(), self.nodes.len());
        self.nodes.push(RuleNode { node_id: id.clone(), rule, parent: parent.map(String::from), children: Vec::new(), eval: None });
        id
    }

    pub fn root(&self) -> &RuleNode {
        &self.nodes[0]
    }

    pub fn root_id(&self) -> &str {
        &self.nodes[0].node_id
    }

    /// Nodes in insertion order.
    pub fn nodes(&self) -> &[RuleNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Result<&RuleNode, TreeError> {
        self.index.get(id).map(|&i| &self.nodes[i]).ok_or_else(|| TreeError::UnknownNode(id.into()))
    }

    fn install(&mut self, id: &str, result: QuizResult) -> f64 {
        let weight = result.score;
        self.nodes[self.index[id]].eval = Some(result);
        // Strict improvement keeps the first node to reach a score.
        if self.max_pointer.is_none() || weight > self.max_score {
            self.max_score = weight;
            self.max_pointer = Some(id.to_string());
        }
        weight
    }

    /// Quiz weight of a node, computed once and cached.
    pub fn evaluate_node(
        &mut self,
        id: &str,
        questions: &[QuizQuestion],
        agent: &Agent,
        exec: &Executor,
    ) -> Result<f64, TreeError> {
        let node = self.node(id)?;
        if let Some(w) = node.weight() {
            return Ok(w);
        }
        let result = quiz::run_quiz(&node.rule, questions, agent, exec)?;
        log::info!("node {id} scored {:.3} ({}/{})", result.score, result.tp + result.tn, result.records.len());
        Ok(self.install(id, result))
    }

    pub fn select_best(&self) -> Result<&str, TreeError> {
        self.max_pointer.as_deref().ok_or(TreeError::NothingEvaluated)
    }

    /// Refines an evaluated node into a new unevaluated child.
    pub fn expand(&mut self, id: &str, agent: &Agent, labels: &LabelSpace, config: &CaclConfig) -> Result<String, TreeError> {
        let node = self.node(id)?;
        let eval = node.eval.as_ref().ok_or_else(|| TreeError::NotEvaluated(id.into()))?;
        let child = cacl::refine(&node.rule, eval, agent, labels, config)?;
        Ok(self.insert(child, Some(id)))
    }

    pub fn best_rule(&self) -> Result<&FolRule, TreeError> {
        Ok(&self.node(self.select_best()?)?.rule)
    }

    /// Runs the loop to completion, calling `persist` after every change of state.
    pub fn optimize(
        &mut self,
        questions: &[QuizQuestion],
        agent: &Agent,
        labels: &LabelSpace,
        config: &OptimizeConfig,
        exec: &Executor,
        persist: &mut dyn FnMut(&OptimizationTree) -> Result<(), TreeError>,
    ) -> Result<FolRule, TreeError> {
        if questions.is_empty() {
            return Err(TreeError::NoQuestions);
        }
        let mut expanded = 0u32;
        loop {
            let pending: Vec<String> = self.nodes.iter().filter(|n| n.eval.is_none()).map(|n| n.node_id.clone()).collect();
            for id in &pending {
                self.evaluate_node(id, questions, agent, exec)?;
            }
            if !pending.is_empty() {
                persist(self)?;
            }
            if self.max_score >= config.defined_score || self.iteration >= config.max_iterations {
                break;
            }
            let best = self.select_best()?.to_string();
            match self.expand(&best, agent, labels, &config.cacl) {
                Ok(child) => {
                    expanded += 1;
                    log::info!("expanded {best} into {child}");
                }
                Err(e) => log::warn!("expansion of {best} failed: {e}"),
            }
            self.iteration += 1;
            persist(self)?;
        }
        if expanded == 0 && self.iteration > 0 {
            log::warn!("every expansion for {} failed; returning the best evaluated rule", self.target.key());
        }
        Ok(self.best_rule()?.clone())
    }

    /// Structural and bookkeeping invariants; `Err` names the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.nodes.is_empty() || self.nodes[0].parent.is_some() {
            return Err("tree must have a parentless root".into());
        }
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            let p = n.parent.as_deref().ok_or_else(|| format!("{} has no parent", n.node_id))?;
            let pi = *self.index.get(p).ok_or_else(|| format!("{} has unknown parent {p}", n.node_id))?;
            if pi >= i {
                return Err(format!("{} precedes its parent", n.node_id));
            }
            if !self.nodes[pi].children.contains(&n.node_id) {
                return Err(format!("{p} does not list child {}", n.node_id));
            }
            if n.rule.target != self.target {
                return Err(format!("{} changed its consequent", n.node_id));
            }
            if n.rule.version <= self.nodes[pi].rule.version {
                return Err(format!("{} does not increase the version", n.node_id));
            }
        }
        let best = self.nodes.iter().filter_map(RuleNode::weight).fold(None, |m: Option<f64>, w| Some(m.map_or(w, |m| m.max(w))));
        match (best, &self.max_pointer) {
            (None, None) => Ok(()),
            (Some(b), Some(p)) => {
                let w = self.node(p).map_err(|e| e.to_string())?.weight();
                if b != self.max_score || w != Some(b) {
                    Err(format!("max_score {} / pointer weight {w:?} disagree with best weight {b}", self.max_score))
                } else {
                    Ok(())
                }
            }
            _ => Err("max_pointer out of sync with evaluations".into()),
        }
    }

    pub fn to_store(&self) -> TreeStore {
        TreeStore {
            target: self.target.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| {
                    let e = n.eval.as_ref();
                    StoredNode {
                        node_id: n.node_id.clone(),
                        parent: n.parent.clone(),
                        rule_text: n.rule.text(),
                        version: n.rule.version,
                        weight: n.weight(),
                        tp: e.map(|e| e.tp),
                        tn: e.map(|e| e.tn),
                        fp: e.map(|e| e.fp),
                        fn_: e.map(|e| e.fn_),
                        records: e.map(|e| e.records.clone()).unwrap_or_default(),
                    }
                })
                .collect(),
            max_pointer: self.max_pointer.clone(),
            max_score: self.max_score,
            iteration: self.iteration,
        }
    }

    pub fn from_store(store: TreeStore) -> Result<Self, TreeError> {
        let bad = |m: String| TreeError::Store(m);
        let mut tree: Option<OptimizationTree> = None;
        for n in store.nodes {
            let mut rule = parse_rule(&n.rule_text).map_err(|source| TreeError::StoreRule { node: n.node_id.clone(), source })?;
            if rule.target != store.target {
                return Err(bad(format!("node {} has a different consequent", n.node_id)));
            }
            rule.version = n.version;
            rule.provenance = match &n.parent {
                Some(p) => Provenance::OptimizedFrom(p.clone()),
                None => Provenance::Initialized,
            };
            let id = match (&mut tree, &n.parent) {
                (None, None) => {
                    tree = Some(OptimizationTree::new(rule));
                    tree.as_ref().map(|t| t.root_id().to_string()).unwrap_or_default()
                }
                (Some(t), Some(p)) => {
                    if !t.index.contains_key(p) {
                        return Err(bad(format!("node {} names unknown parent {p}", n.node_id)));
                    }
                    t.insert(rule, Some(p))
                }
                _ => return Err(bad(format!("node {} is misplaced: exactly the first node must be the root", n.node_id))),
            };
            if id != n.node_id {
                return Err(bad(format!("node id {} does not match its position (expected {id})", n.node_id)));
            }
            if n.weight.is_some() {
                let t = tree.as_mut().expect("root inserted");
                let eval = QuizResult::from_records(n.records).map_err(|e| bad(format!("node {id}: {e}")))?;
                if Some(eval.score) != n.weight {
                    return Err(bad(format!("node {id}: weight does not match its records")));
                }
                let i = t.index[&id];
                t.nodes[i].eval = Some(eval);
            }
        }
        let mut tree = tree.ok_or_else(|| bad("no nodes".into()))?;
        if let Some(p) = &store.max_pointer {
            if !tree.index.contains_key(p) {
                return Err(bad(format!("max_pointer names unknown node {p}")));
            }
        }
        tree.max_pointer = store.max_pointer;
        tree.max_score = store.max_score;
        tree.iteration = store.iteration;
        tree.check_invariants().map_err(bad)?;
        Ok(tree)
    }

    pub fn save(&self, path: &Path) -> Result<(), TreeError> {
        let text = serde_json::to_string_pretty(&self.to_store()).map_err(|e| TreeError::Store(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TreeError> {
        let text = std::fs::read_to_string(path)?;
        let store: TreeStore = serde_json::from_str(&text).map_err(|e| TreeError::Store(format!("{}: {e}", path.display())))?;
        OptimizationTree::from_store(store)
    }
}

/// Persisted form of an [`OptimizationTree`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeStore {
    pub target: Consequent,
    pub nodes: Vec<StoredNode>,
    pub max_pointer: Option<String>,
    pub max_score: f64,
    pub iteration: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredNode {
    pub node_id: String,
    pub parent: Option<String>,
    pub rule_text: String,
    pub version: u32,
    pub weight: Option<f64>,
    pub tp: Option<usize>,
    pub tn: Option<usize>,
    pub fp: Option<usize>,
    #[serde(rename = "fn")]
    pub fn_: Option<usize>,
    #[serde(default)]
    pub records: Vec<ReasoningRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{ChatRequest, FnBackend};
    use crate::corpus::{Judgment, LegalCase};
    use crate::confusable::ConfusableSet;
    use crate::quiz::{make_quiz, QuizConfig};

    // Rules are `FORALL x (Level<N>(x)) -> ...` and level N scores weights[N].
    // A rewrite moves to the parent's level + 1, which is a pure function of
    // the request.
    fn weighted_agent(weights: &'static [f64], questions: usize) -> Agent {
        level_agent(weights, questions, None)
    }

    // Each rewrite moves to the next unused level, so weights are consumed in
    // evaluation order.
    fn scripted_agent(weights: &'static [f64], questions: usize) -> Agent {
        level_agent(weights, questions, Some(std::sync::atomic::AtomicUsize::new(1)))
    }

    fn level_agent(weights: &'static [f64], questions: usize, counter: Option<std::sync::atomic::AtomicUsize>) -> Agent {
        Agent::for_backend(FnBackend::new("levels", move |req: &ChatRequest| {
            let level: usize = req.user_text.split("Level").nth(1).and_then(|s| s.split('(').next()).and_then(|s| s.parse().ok()).unwrap_or(0);
            if req.tag.starts_with("quiz/") {
                let case: usize = req.tag.rsplit('c').next().unwrap().parse().unwrap();
                let correct = (weights[level] * questions as f64).round() as usize;
                let letters = crate::prompts::section(&req.user_text, "Options:\n", Some("\n\nDecide")).unwrap().to_string();
                let target_letter = letters.lines().find(|l| l.contains("theft")).unwrap().chars().next().unwrap();
                let other = letters.lines().find(|l| !l.contains("theft")).unwrap().chars().next().unwrap();
                let pick = if case < correct { target_letter } else { other };
                Ok(format!("Reasoning: r\nAnswer: {pick}"))
            } else if req.tag.ends_with("/rewrite") {
                let next = match &counter {
                    Some(c) => c.fetch_add(1, std::sync::atomic::Ordering::SeqCst),
                    None => level + 1,
                };
                Ok(format!("Rule: FORALL x (Level{next}(x)) -> ARTICLE(264) CHARGE(theft)"))
            } else if req.tag.ends_with("/synthesize") {
                Ok("KEEP: k\nIMPROVE: i".into())
            } else {
                Ok("analysis".into())
            }
        }))
    }

    fn questions(n: usize) -> Vec<QuizQuestion> {
        let j = Judgment { article: "264".into(), charge: "theft".into(), prison_term: "0".into() };
        let set = ConfusableSet {
            target: Consequent::ArticleCharge { article: "264".into(), charge: "theft".into() },
            positives: (0..n).map(|i| LegalCase::new(format!("c{i}"), "f", Some(j.clone()))).collect(),
            negatives: vec![],
            negative_similarity: vec![],
            requested_negatives: 0,
        };
        let pool = vec![set.target.clone(), Consequent::ArticleCharge { article: "266".into(), charge: "fraud".into() }];
        make_quiz(&set, &pool, &QuizConfig { num_options: 2, ..Default::default() }).unwrap()
    }

    fn labels() -> LabelSpace {
        LabelSpace { articles: vec!["264".into(), "266".into()], charges: vec!["theft".into(), "fraud".into()], prison_terms: vec![] }
    }

    fn root() -> FolRule {
        parse_rule("FORALL x (Level0(x)) -> ARTICLE(264) CHARGE(theft)").unwrap()
    }

    fn run(weights: &'static [f64], threshold: f64, max_iterations: u32) -> (OptimizationTree, FolRule) {
        let qs = questions(10);
        let agent = scripted_agent(weights, 10);
        let mut tree = OptimizationTree::new(root());
        let cfg = OptimizeConfig { defined_score: threshold, max_iterations, ..Default::default() };
        let best = tree.optimize(&qs, &agent, &labels(), &cfg, &Executor::sequential(), &mut |_| Ok(())).unwrap();
        (tree, best)
    }

    #[test]
    fn fresh_tree() {
        let t = OptimizationTree::new(root());
        assert_eq!((t.len(), t.iteration, t.max_score), (1, 0, 0.0));
        assert!(t.root().children.is_empty() && t.root().weight().is_none());
        assert_eq!(t.root_id(), "264+theft/0/0");
        assert!(matches!(t.select_best(), Err(TreeError::NothingEvaluated)));
    }

    #[test]
    fn evaluation_is_memoized() {
        let qs = questions(4);
        let agent = weighted_agent(&[0.5], 4);
        let mut t = OptimizationTree::new(root());
        let id = t.root_id().to_string();
        assert_eq!(t.evaluate_node(&id, &qs, &agent, &Executor::sequential()).unwrap(), 0.5);
        let calls = agent.transcript().len();
        assert_eq!(t.evaluate_node(&id, &qs, &agent, &Executor::sequential()).unwrap(), 0.5);
        assert_eq!(agent.transcript().len(), calls);
    }

    #[test]
    fn stops_when_root_meets_threshold() {
        let (tree, best) = run(&[0.9], 0.9, 5);
        assert_eq!(tree.len(), 1);
        assert_eq!(best.version, 0);
    }

    #[test]
    fn stops_after_child_reaches_threshold() {
        let (tree, best) = run(&[0.5, 0.8], 0.8, 5);
        assert_eq!(tree.len(), 2);
        assert_eq!(best.version, 1);
        assert_eq!(tree.max_score, 0.8);
    }

    #[test]
    fn hand_walked_budget() {
        let (tree, best) = run(&[0.5, 0.6, 0.4, 0.7], 1.0, 3);
        assert_eq!(tree.len(), 4);
        assert_eq!(best.text(), "FORALL x (Level3(x)) -> ARTICLE(264) CHARGE(theft)");
        assert_eq!(tree.max_score, 0.7);
        let parents: Vec<Option<&str>> = tree.nodes().iter().map(|n| n.parent.as_deref()).collect();
        assert_eq!(parents, [None, Some("264+theft/0/0"), Some("264+theft/1/1"), Some("264+theft/1/1")]);
        tree.check_invariants().unwrap();
    }

    #[test]
    fn ties_keep_first_achiever() {
        let (tree, best) = run(&[0.7, 0.7, 0.7], 1.0, 2);
        assert_eq!(best.version, 0);
        assert_eq!(tree.select_best().unwrap(), tree.root_id());
    }

    #[test]
    fn failed_expansion_still_counts() {
        let qs = questions(4);
        let agent = Agent::for_backend(FnBackend::new("bad", |req: &ChatRequest| {
            if req.tag.starts_with("quiz/") {
                Ok("Answer: A".into())
            } else {
                Ok("garbage".into())
            }
        }));
        let mut tree = OptimizationTree::new(root());
        let cfg = OptimizeConfig { defined_score: 1.1, max_iterations: 2, ..Default::default() };
        let best = tree.optimize(&qs, &agent, &labels(), &cfg, &Executor::sequential(), &mut |_| Ok(())).unwrap();
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.iteration, 2);
        assert_eq!(best.version, 0);
    }

    #[test]
    fn store_round_trip_and_resume() {
        let weights: &'static [f64] = &[0.3, 0.5, 0.4, 0.9];
        let qs = questions(10);
        let cfg = OptimizeConfig { defined_score: 0.95, max_iterations: 4, ..Default::default() };
        let mut snapshots = Vec::new();
        let mut tree = OptimizationTree::new(root());
        let agent = weighted_agent(weights, 10);
        let full = tree
            .optimize(&qs, &agent, &labels(), &cfg, &Executor::sequential(), &mut |t| {
                snapshots.push(serde_json::to_string(&t.to_store()).unwrap());
                Ok(())
            })
            .unwrap();
        for snap in &snapshots {
            let mut resumed = OptimizationTree::from_store(serde_json::from_str(snap).unwrap()).unwrap();
            let agent = weighted_agent(weights, 10);
            let best = resumed.optimize(&qs, &agent, &labels(), &cfg, &Executor::sequential(), &mut |_| Ok(())).unwrap();
            assert!(best.same_logic(&full));
            assert_eq!(resumed.to_store(), tree.to_store());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tree.json");
        tree.save(&p).unwrap();
        assert_eq!(OptimizationTree::load(&p).unwrap(), tree);
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert!(raw["nodes"][0].get("fn").is_some());
    }

    #[test]
    fn store_rejects_inconsistent_weight() {
        let (tree, _) = run(&[0.5, 0.8], 0.8, 5);
        let mut store = tree.to_store();
        store.nodes[1].weight = Some(0.1);
        assert!(OptimizationTree::from_store(store).is_err());
    }
}
