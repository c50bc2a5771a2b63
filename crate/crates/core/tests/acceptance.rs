//! Acceptance suite. Each criterion prints one PASS/FAIL line with its runtime
//! budget; the process exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rljp_core::agents::{Agent, ChatRequest, FnBackend};
use rljp_core::confusable::{
    build_confusable_set, cosine_similarity_matrix, EmbedError, EmbeddingBackend, EmbeddingMatrix,
};
use rljp_core::corpus::{Judgment, LabelSpace, LegalCase};
use rljp_core::examination::{
    predict_case, CandidateList, Candidates, Prediction, Subtask, SubtaskFlags, NO_RULE_SATISFIED,
};
use rljp_core::fol_rules::{parse_rule, parse_rule_parts, validate_rule, Consequent, FolRule, Formula, Quantifier, Term};
use rljp_core::metrics::{compute_metrics, ClassUniverse};
use rljp_core::opt_tree::{OptimizationTree, OptimizeConfig, TreeStore};
use rljp_core::pipeline::{Pipeline, RunOptions, TargetOptimization};
use rljp_core::quiz::{classify_outcome, score, Outcome, QuizOption, QuizQuestion, QuizResult, ReasoningRecord};
use rljp_core::rule_init::RuleSet;
use rljp_core::Executor;

fn criterion(id: u32, name: &str, budget_secs: u64, body: impl FnOnce() -> String) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    let within = elapsed <= Duration::from_secs(budget_secs);
    let (pass, detail) = match &outcome {
        Ok(d) if within => (true, d.clone()),
        Ok(d) => (false, format!("{d}; over the time budget")),
        Err(p) => (
            false,
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default(),
        ),
    };
    println!(
        "{} [{id}] {name}: {detail} ({:.2}s, budget {budget_secs}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn fixture_config() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/synthetic.json")
}

fn theft() -> Consequent {
    Consequent::ArticleCharge { article: "264".into(), charge: "theft".into() }
}

fn robbery() -> Consequent {
    Consequent::ArticleCharge { article: "263".into(), charge: "robbery".into() }
}

// Rule generator: predicate arity is fixed per name and every variable is bound.

const PREDICATES: [&str; 8] = ["TookProperty", "UsedViolence", "Secretly", "HasWeapon", "p_1", "Injured", "实施盗窃", "Amount"];
const ARTICLES: [&str; 4] = ["264", "263", "133-1", "art_20"];
const CHARGES: [&str; 4] = ["theft", "intentional injury", "dangerous_driving", "诈骗"];
const TERMS: [&str; 4] = ["0", "1", "2", "over 10 years"];
const STRINGS: [&str; 5] = ["shop", "a \"big\" sum", "back\\slash", "line\nbreak", "夜间"];

fn arity(predicate: &str) -> usize {
    PREDICATES.iter().position(|p| *p == predicate).unwrap() % 3
}

fn gen_term(rng: &mut ChaCha8Rng, bound: &[String]) -> Term {
    match rng.gen_range(0..4) {
        0 => Term::Str(STRINGS.choose(rng).unwrap().to_string()),
        1 => Term::Int(rng.gen_range(0..100_000)),
        _ => Term::Var(bound.choose(rng).unwrap().clone()),
    }
}

fn gen_formula(rng: &mut ChaCha8Rng, depth: u32, bound: &mut Vec<String>) -> Formula {
    let choice = if depth == 0 { 0 } else { rng.gen_range(0..5) };
    match choice {
        0 => {
            let p = *PREDICATES.choose(rng).unwrap();
            Formula::atom(p, (0..arity(p)).map(|_| gen_term(rng, bound)).collect())
        }
        1 => Formula::not(gen_formula(rng, depth - 1, bound)),
        2 | 3 => {
            let n = rng.gen_range(2..=3);
            let children = (0..n).map(|_| gen_formula(rng, depth - 1, bound)).collect();
            if choice == 2 {
                Formula::And(children)
            } else {
                Formula::Or(children)
            }
        }
        _ => {
            let v = format!("v{}", bound.len());
            bound.push(v.clone());
            let body = gen_formula(rng, depth - 1, bound);
            bound.pop();
            let quantifier = if rng.gen_bool(0.5) { Quantifier::ForAll } else { Quantifier::Exists };
            Formula::Quantified { quantifier, variable: v, body: Box::new(body) }
        }
    }
}

fn gen_rule(rng: &mut ChaCha8Rng) -> (Formula, Consequent) {
    let mut bound = vec!["x".to_string()];
    let depth = rng.gen_range(0..=4);
    let body = gen_formula(rng, depth, &mut bound);
    let antecedent = if rng.gen_bool(0.8) { Formula::forall("x", body) } else { Formula::exists("x", body) };
    let article = ARTICLES.choose(rng).unwrap().to_string();
    let target = match rng.gen_range(0..3) {
        0 => Consequent::Article { article },
        1 => Consequent::ArticleCharge { article, charge: CHARGES.choose(rng).unwrap().to_string() },
        _ => Consequent::ArticlePrisonTerm { article, prison_term: TERMS.choose(rng).unwrap().to_string() },
    };
    (antecedent, target)
}

fn generator_labels() -> LabelSpace {
    LabelSpace {
        articles: ARTICLES.iter().map(|s| s.to_string()).collect(),
        charges: CHARGES.iter().map(|s| s.to_string()).collect(),
        prison_terms: TERMS.iter().map(|s| s.to_string()).collect(),
    }
}

const INVALID_SOURCES: [&str; 50] = [
    "",
    "FORALL",
    "FORALL x",
    "FORALL x (P(x))",
    "FORALL x (P(x)) ->",
    "FORALL x (P(x)) -> ARTICLE",
    "FORALL x (P(x)) -> ARTICLE(",
    "FORALL x (P(x)) -> ARTICLE()",
    "FORALL x (P(x) -> ARTICLE(264)",
    "FORALL x (P(x))) -> ARTICLE(264)",
    "FORALL (P(x)) -> ARTICLE(264)",
    "FORALL x (P(x) AND) -> ARTICLE(264)",
    "FORALL x (AND P(x)) -> ARTICLE(264)",
    "FORALL x (P(x) OR OR Q(x)) -> ARTICLE(264)",
    "FORALL x (NOT) -> ARTICLE(264)",
    "FORALL x (P(x,)) -> ARTICLE(264)",
    "FORALL x (P(,x)) -> ARTICLE(264)",
    "FORALL x (P(x) Q(x)) -> ARTICLE(264)",
    "FORALL x (P(x)) -> CHARGE(theft)",
    "FORALL x (P(x)) -> ARTICLE(264) CHARGE(theft) TERM(1)",
    "FORALL x (P(x)) -> ARTICLE(264) ARTICLE(263)",
    "FORALL x (P(\"unterminated)) -> ARTICLE(264)",
    "FORALL x (P(x)) => ARTICLE(264)",
    "FORALL x (P(x)) -> ARTICLE(264) extra",
    "FORALL x (P(x)) ARTICLE(264)",
    "FORALL x (P x) -> ARTICLE(264)",
    "FORALL AND (P(x)) -> ARTICLE(264)",
    "FORALL x (P(x)) -> ARTICLE(264) CHARGE()",
    "FORALL x (@(x)) -> ARTICLE(264)",
    "FORALL x ((P(x)) -> ARTICLE(264)",
    "FORALL x (P(x)) -> TERM(1)",
    "-> ARTICLE(264)",
    "FORALL x () -> ARTICLE(264)",
    "FORALL x (P(x)) -> ARTICLE(264",
    "FORALL x (P(x)) - > ARTICLE(264)",
    "FORALL x EXISTS (P(x)) -> ARTICLE(264)",
    "FORALL x (P(x)) -> ARTICLE(264) CHARGE(theft",
    "FORALL x (P(x)) -> ARTICLE(264)\n-> ARTICLE(263)",
    "FORALL x (NOT NOT) -> ARTICLE(264)",
    "FORALL x (P(x) AND (Q(x)) -> ARTICLE(264)",
    "FORALL x (P(y)) -> ARTICLE(264)",
    "FORALL x ((P(x) AND Q(y))) -> ARTICLE(264)",
    "FORALL x (P(x)) -> ARTICLE(999)",
    "FORALL x (P(x)) -> ARTICLE(264) CHARGE(arson)",
    "FORALL x (P(x)) -> ARTICLE(264) TERM(9)",
    "FORALL x ((P(x) AND P(x, x))) -> ARTICLE(264)",
    "FORALL x ((Q(x) OR Q())) -> ARTICLE(263) CHARGE(robbery)",
    "FORALL x (EXISTS y (R(x, y)) AND S(z))) -> ARTICLE(264)",
    "EXISTS y (P(y)) -> ARTICLE(264) CHARGE(\"not a charge\")",
    "FORALL x ((P(x) OR NOT (W(x, w)))) -> ARTICLE(263)",
];

fn criterion_1() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels = generator_labels();
    for i in 0..1000 {
        let (antecedent, target) = gen_rule(&mut rng);
        let rule = FolRule::new("g", target.clone(), antecedent.clone());
        let text = rule.text();
        let (parsed, consequent) = parse_rule_parts(&text).unwrap_or_else(|e| panic!("rule {i} `{text}`: {e}"));
        assert_eq!(parsed, antecedent, "rule {i} `{text}`");
        assert_eq!(consequent, target, "rule {i} `{text}`");
        let reparsed = parse_rule(&text).unwrap();
        assert_eq!(reparsed.text(), text, "rule {i}");
        let violations = validate_rule(&reparsed, &labels);
        assert!(violations.is_empty(), "rule {i} `{text}`: {violations:?}");
    }
    let space = LabelSpace {
        articles: vec!["264".into(), "263".into()],
        charges: vec!["theft".into(), "robbery".into()],
        prison_terms: vec!["0".into(), "1".into()],
    };
    let (mut syntax, mut semantic) = (0, 0);
    for src in INVALID_SOURCES {
        match parse_rule(src) {
            Err(e) => {
                assert!(e.line >= 1 && e.column >= 1, "{src:?}: unlocated error {e}");
                syntax += 1;
            }
            Ok(rule) => {
                let v = validate_rule(&rule, &space);
                assert!(!v.is_empty(), "{src:?} was accepted");
                semantic += 1;
            }
        }
    }
    format!("1000 rules round-trip; {syntax} syntax and {semantic} validation errors")
}

struct TableEmbedder(HashMap<String, Vec<f64>>);

impl EmbeddingBackend for TableEmbedder {
    fn identity(&self) -> String {
        "table".into()
    }

    fn embed(&self, case_id: &str, _text: &str) -> Result<Vec<f64>, EmbedError> {
        self.0.get(case_id).cloned().ok_or_else(|| EmbedError::Provider { case_id: case_id.into(), message: "unknown".into() })
    }
}

fn random_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn scalar_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn criterion_2() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let exec = Executor::default();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, n, d) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=16));
        let (a, b) = (random_rows(&mut rng, m, d), random_rows(&mut rng, n, d));
        let ids = |p: &str, k: usize| (0..k).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let left = EmbeddingMatrix::new(ids("a", m), a.clone()).unwrap();
        let right = EmbeddingMatrix::new(ids("b", n), b.clone()).unwrap();
        let sim = cosine_similarity_matrix(&left, &right, &exec).unwrap();
        for (i, (row, ai)) in sim.values.iter().zip(&a).enumerate() {
            for (j, (cell, bj)) in row.iter().zip(&b).enumerate() {
                let diff = (cell - scalar_cosine(ai, bj)).abs();
                worst = worst.max(diff);
                assert!(diff <= 1e-9, "cell ({i},{j}) differs by {diff}");
            }
        }
    }

    let target = theft();
    let other_labels = [robbery(), Consequent::ArticleCharge { article: "266".into(), charge: "fraud".into() }];
    let judgment = |c: &Consequent| match c {
        Consequent::ArticleCharge { article, charge } => {
            Judgment { article: article.clone(), charge: charge.clone(), prison_term: "0".into() }
        }
        _ => unreachable!(),
    };
    for inst in 0..50 {
        let d = rng.gen_range(2..=8);
        let (p, o) = (rng.gen_range(1..=5), rng.gen_range(1..=8));
        let mut table = HashMap::new();
        let mut positives = Vec::new();
        let mut others = Vec::new();
        for i in 0..p {
            let id = format!("p{i:02}");
            table.insert(id.clone(), random_rows(&mut rng, 1, d).remove(0));
            positives.push(LegalCase::new(id, "", Some(judgment(&target))));
        }
        for i in 0..o {
            let id = format!("o{i:02}");
            table.insert(id.clone(), random_rows(&mut rng, 1, d).remove(0));
            let label = if rng.gen_bool(0.2) { target.clone() } else { other_labels.choose(&mut rng).unwrap().clone() };
            others.push(LegalCase::new(id, "", Some(judgment(&label))));
        }
        if others.iter().all(|c| target.matches(c.judgment.as_ref().unwrap())) {
            continue;
        }
        let num = rng.gen_range(1..=6);
        let embedder = TableEmbedder(table.clone());
        let set = build_confusable_set(&target, &positives, &others, num, &embedder, &exec).unwrap();

        let pool: Vec<&LegalCase> = others.iter().filter(|c| !target.matches(c.judgment.as_ref().unwrap())).collect();
        let mut best: BTreeMap<String, f64> = BTreeMap::new();
        for pos in &positives {
            let mut top: Option<(&str, f64)> = None;
            for cand in &pool {
                let s = scalar_cosine(&table[&pos.case_id], &table[&cand.case_id]);
                let better = match top {
                    None => true,
                    Some((tid, ts)) => s > ts || (s == ts && cand.case_id.as_str() < tid),
                };
                if better {
                    top = Some((&cand.case_id, s));
                }
            }
            let (id, s) = top.unwrap();
            let e = best.entry(id.to_string()).or_insert(s);
            *e = e.max(s);
        }
        let mut expected: Vec<(String, f64)> = best.into_iter().collect();
        expected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        expected.truncate(num);
        let got: Vec<&str> = set.negatives.iter().map(|c| c.case_id.as_str()).collect();
        let want: Vec<&str> = expected.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(got, want, "instance {inst}");
        for (s, (_, e)) in set.negative_similarity.iter().zip(&expected) {
            assert!((s - e).abs() <= 1e-9, "instance {inst}");
        }
        assert_eq!(set.positives, positives);
    }
    format!("100 matrices within {worst:.1e}; 50 confusable sets match the brute-force oracle")
}

fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

fn criterion_3() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pool: Vec<Consequent> = ["theft", "robbery", "fraud", "arson", "injury"]
        .iter()
        .enumerate()
        .map(|(i, c)| Consequent::ArticleCharge { article: format!("{}", 260 + i), charge: c.to_string() })
        .collect();
    let mut records_seen = 0;
    for list in 0..200 {
        let n = rng.gen_range(1..=30);
        let mut records = Vec::with_capacity(n);
        let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for k in 0..n {
            let num = rng.gen_range(2..=5);
            let mut labels: Vec<Consequent> = pool.choose_multiple(&mut rng, num).cloned().collect();
            labels.shuffle(&mut rng);
            let target_idx = rng.gen_range(0..num);
            let positive = rng.gen_bool(0.5);
            let gold_idx = if positive { target_idx } else { (target_idx + rng.gen_range(1..num)) % num };
            let options: Vec<QuizOption> =
                labels.iter().enumerate().map(|(i, l)| QuizOption { letter: letter(i), label: l.clone() }).collect();
            let predicted = if rng.gen_bool(0.1) { None } else { Some(letter(rng.gen_range(0..num))) };
            let q = QuizQuestion {
                case_id: format!("c{k}"),
                fact_text: String::new(),
                target: labels[target_idx].clone(),
                gold: labels[gold_idx].clone(),
                options,
                correct_letter: letter(gold_idx),
                is_positive: positive,
                similarity: None,
            };
            let chose_target = predicted == Some(letter(target_idx));
            let flags = [positive && chose_target, !positive && !chose_target, !positive && chose_target, positive && !chose_target];
            assert_eq!(flags.iter().filter(|f| **f).count(), 1, "list {list} record {k}");
            let expected = [Outcome::TP, Outcome::TN, Outcome::FP, Outcome::FN][flags.iter().position(|f| *f).unwrap()];
            match expected {
                Outcome::TP => tp += 1,
                Outcome::TN => tn += 1,
                Outcome::FP => fp += 1,
                Outcome::FN => fn_ += 1,
            }
            let outcome = classify_outcome(&q, predicted);
            assert_eq!(outcome, expected, "list {list} record {k}");
            records.push(ReasoningRecord {
                question: q,
                reasoning_text: String::new(),
                correct_letter: letter(gold_idx),
                predicted_letter: predicted,
                outcome,
                malformed: predicted.is_none(),
            });
        }
        let expected = (tp + tn) as f64 / n as f64;
        assert_eq!(score(&records).unwrap(), expected, "list {list}");
        let result = QuizResult::from_records(records).unwrap();
        assert_eq!((result.tp, result.tn, result.fp, result.fn_), (tp, tn, fp, fn_), "list {list}");
        assert_eq!(result.tp + result.tn + result.fp + result.fn_, n);
        assert_eq!(result.score, expected);
        records_seen += n;
    }
    format!("200 lists, {records_seen} records, each in exactly one outcome")
}

fn tree_labels() -> LabelSpace {
    LabelSpace {
        articles: vec!["264".into(), "263".into()],
        charges: vec!["theft".into(), "robbery".into()],
        prison_terms: vec!["0".into()],
    }
}

const QUESTIONS: usize = 10;

fn quiz_questions() -> Vec<QuizQuestion> {
    (0..QUESTIONS)
        .map(|i| QuizQuestion {
            case_id: format!("c{i}"),
            fact_text: format!("facts of case {i}"),
            target: theft(),
            gold: theft(),
            options: vec![QuizOption { letter: 'A', label: theft() }, QuizOption { letter: 'B', label: robbery() }],
            correct_letter: 'A',
            is_positive: true,
            similarity: None,
        })
        .collect()
}

fn seq_of(rule_id: &str) -> usize {
    rule_id.rsplit('/').next().unwrap().parse().unwrap()
}

/// Quiz answers give node `seq` the weight `script[seq] / 10`. Rewrites from
/// a barren parent never yield a rule; `adversarial` decides, per parent and
/// attempt, whether a rewrite swaps the consequent.
fn scripted_agent(
    script: Vec<usize>,
    barren: Vec<bool>,
    adversarial: impl Fn(usize, usize) -> bool + Send + Sync + 'static,
) -> Agent {
    Agent::for_backend(FnBackend::new("scripted", move |req: &ChatRequest| {
        let tag = req.tag.as_str();
        if let Some(rest) = tag.strip_prefix("quiz/") {
            let (rule_id, case) = rest.rsplit_once('/').unwrap();
            let case: usize = case.trim_start_matches('c').parse().unwrap();
            let pick = if case < script[seq_of(rule_id)] { 'A' } else { 'B' };
            return Ok(format!("Reasoning: scripted\nAnswer: {pick}"));
        }
        let Some(rest) = tag.strip_prefix("cacl/") else { return Ok(String::new()) };
        if rest.ends_with("/keep") || rest.ends_with("/improve") {
            return Ok("analysis".into());
        }
        if rest.contains("/synthesize") {
            return Ok("KEEP: keep the core\nIMPROVE: tighten it".into());
        }
        let (rule_id, step) = rest.split_once("/rewrite").unwrap();
        let parent = seq_of(rule_id);
        let attempt: usize = step.strip_prefix("/repair").map_or(0, |n| n.parse().unwrap());
        if barren[parent] {
            return Ok("I would rather not.".into());
        }
        let consequent = if adversarial(parent, attempt) { robbery().render() } else { theft().render() };
        Ok(format!("Rule: FORALL x ((Refined{parent}(x) AND Step{attempt}(x))) -> {consequent}"))
    }))
}

struct Oracle {
    pointer: usize,
    max: f64,
    nodes: usize,
}

fn simulate(script: &[usize], barren: &[bool], config: &OptimizeConfig) -> Oracle {
    let (mut nodes, mut evaluated, mut iteration) = (1usize, 0usize, 0u32);
    let (mut max, mut pointer) = (0.0, None::<usize>);
    loop {
        while evaluated < nodes {
            let w = script[evaluated] as f64 / QUESTIONS as f64;
            if pointer.is_none() || w > max {
                max = w;
                pointer = Some(evaluated);
            }
            evaluated += 1;
        }
        if max >= config.defined_score || iteration >= config.max_iterations {
            break;
        }
        if !barren[pointer.unwrap()] {
            nodes += 1;
        }
        iteration += 1;
    }
    Oracle { pointer: pointer.unwrap(), max, nodes }
}

fn root_rule() -> FolRule {
    parse_rule("FORALL x (TookProperty(x)) -> ARTICLE(264) CHARGE(theft)").unwrap()
}

fn criterion_4() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let questions = quiz_questions();
    let labels = tree_labels();
    let exec = Executor::default();
    let mut reloads = 0;
    for run in 0..100 {
        let max_iterations = rng.gen_range(0..=6);
        let defined_score = *[0.5, 0.8, 0.9, 1.0, 1.5].choose(&mut rng).unwrap();
        let config = OptimizeConfig { defined_score, max_iterations, ..Default::default() };
        let script: Vec<usize> = (0..=max_iterations).map(|_| rng.gen_range(0..=QUESTIONS)).collect();
        let barren: Vec<bool> = (0..=max_iterations).map(|_| rng.gen_bool(0.15)).collect();
        let agent = scripted_agent(script.clone(), barren.clone(), |_, _| false);

        let mut tree = OptimizationTree::new(root_rule());
        let mut snapshots: Vec<String> = Vec::new();
        let mut last_max = f64::NEG_INFINITY;
        let mut persist = |t: &OptimizationTree| {
            assert!(t.max_score >= last_max || t.max_pointer.is_none(), "run {run}: max_score decreased");
            if t.max_pointer.is_some() {
                last_max = t.max_score;
            }
            snapshots.push(serde_json::to_string(&t.to_store()).unwrap());
            Ok(())
        };
        let best = tree.optimize(&questions, &agent, &labels, &config, &exec, &mut persist).unwrap();

        let oracle = simulate(&script, &barren, &config);
        tree.check_invariants().unwrap_or_else(|e| panic!("run {run}: {e}"));
        assert!(tree.len() as u32 <= 1 + tree.iteration, "run {run}: {} nodes after {} iterations", tree.len(), tree.iteration);
        assert_eq!(tree.len(), oracle.nodes, "run {run}");
        assert_eq!(tree.max_score, oracle.max, "run {run}");
        assert_eq!(seq_of(&best.rule_id), oracle.pointer, "run {run}: first achiever");
        assert_eq!(tree.node(&best.rule_id).unwrap().weight(), Some(tree.max_score), "run {run}");
        let first = tree.nodes().iter().position(|n| n.weight() == Some(tree.max_score)).unwrap();
        assert_eq!(seq_of(&best.rule_id), first, "run {run}: ties keep the first achiever");

        let final_store = serde_json::to_string(&tree.to_store()).unwrap();
        let pick = rng.gen_range(0..snapshots.len());
        let store: TreeStore = serde_json::from_str(&snapshots[pick]).unwrap();
        let mut resumed = OptimizationTree::from_store(store).unwrap();
        let again = resumed.optimize(&questions, &agent, &labels, &config, &exec, &mut |_| Ok(())).unwrap();
        assert_eq!(again.text(), best.text(), "run {run}: resumed from snapshot {pick}");
        assert_eq!(again.rule_id, best.rule_id, "run {run}");
        assert_eq!(serde_json::to_string(&resumed.to_store()).unwrap(), final_store, "run {run}");
        reloads += 1;
    }
    format!("100 runs match the oracle; {reloads} mid-run reloads reproduce the final tree")
}

fn hash(a: u64, b: u64) -> u64 {
    let mut x = a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_add(0x632b_e59b_d9b4_e019);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 29)
}

fn criterion_5() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let questions = quiz_questions();
    let labels = tree_labels();
    let exec = Executor::default();
    let (mut nodes, mut repairs, mut adversarial_total, mut failed) = (0, 0, 0, 0);
    for run in 0..50u64 {
        let config = OptimizeConfig { defined_score: 1.5, max_iterations: rng.gen_range(1..=5), ..Default::default() };
        let script: Vec<usize> = (0..=config.max_iterations).map(|_| rng.gen_range(0..=QUESTIONS)).collect();
        let barren = vec![false; script.len()];
        let rate = rng.gen_range(3..=9);
        let agent = scripted_agent(script, barren, move |parent, attempt| hash(run, (parent * 7 + attempt) as u64) % 10 < rate);
        let mut tree = OptimizationTree::new(root_rule());
        let best = tree.optimize(&questions, &agent, &labels, &config, &exec, &mut |_| Ok(())).unwrap();
        assert_eq!(best.target, theft(), "run {run}: returned rule drifted");
        for n in tree.nodes() {
            assert_eq!(n.rule.target, theft(), "run {run}: node {} drifted", n.node_id);
        }
        nodes += tree.len();

        let entries = agent.transcript().entries();
        for (i, e) in entries.iter().enumerate() {
            let Some(reply) = &e.response else { continue };
            if e.tag.contains("/rewrite") && reply.contains("CHARGE(robbery)") {
                adversarial_total += 1;
                let next = entries.get(i + 1);
                let repaired = next.is_some_and(|n| n.tag.contains("/rewrite/repair"));
                let attempt = e.tag.rsplit("repair").next().and_then(|s| s.parse::<u32>().ok()).unwrap_or(0);
                if attempt < config.cacl.repair_attempts {
                    assert!(repaired, "run {run}: no repair after drifted reply {}", e.tag);
                    let prompt = &next.unwrap().request.user_text;
                    assert!(prompt.contains("consequent changed") && prompt.contains(&theft().render()), "run {run}: {prompt}");
                    repairs += 1;
                } else {
                    failed += 1;
                }
            }
        }
    }
    assert!(repairs > 0, "no adversarial rewrite was exercised");
    format!("{nodes} nodes, 0 drifted; {adversarial_total} drifted replies, {repairs} repair prompts, {failed} expansions abandoned")
}

fn criterion_6() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let articles = ["264", "263", "266", "234"];
    let charges = ["theft", "robbery", "fraud", "injury"];
    let terms = ["0", "1", "2"];
    let space = LabelSpace {
        articles: articles.iter().map(|s| s.to_string()).chain(["999".to_string()]).collect(),
        charges: charges.iter().map(|s| s.to_string()).chain(["arson".to_string()]).collect(),
        prison_terms: terms.iter().map(|s| s.to_string()).chain(["3".to_string()]).collect(),
    };
    let mut zero_division = 0;
    for set in 0..20 {
        let n = rng.gen_range(1..=12);
        let pick = |rng: &mut ChaCha8Rng, xs: &[&str], k: usize| xs[rng.gen_range(0..k.min(xs.len()))].to_string();
        let width = rng.gen_range(1..=4);
        let gold: Vec<LegalCase> = (0..n)
            .map(|i| {
                let j = Judgment {
                    article: pick(&mut rng, &articles, width),
                    charge: pick(&mut rng, &charges, width),
                    prison_term: pick(&mut rng, &terms, width),
                };
                LegalCase::new(format!("case{i}"), "", Some(j))
            })
            .collect();
        let mut preds: Vec<Prediction> = gold
            .iter()
            .map(|c| {
                let j = c.judgment.as_ref().unwrap();
                let mut noisy = |g: &str, xs: &[&str]| if rng.gen_bool(0.6) { g.to_string() } else { xs[rng.gen_range(0..xs.len())].to_string() };
                Prediction {
                    case_id: c.case_id.clone(),
                    article: noisy(&j.article, &articles),
                    charge: noisy(&j.charge, &charges),
                    term: noisy(&j.prison_term, &terms),
                    used_fallback: SubtaskFlags::default(),
                    used_abstract: false,
                    rationale: String::new(),
                }
            })
            .collect();
        preds.shuffle(&mut rng);

        for universe in [ClassUniverse::Observed, ClassUniverse::LabelSpace] {
            let report = compute_metrics(&preds, &gold, universe, &space).unwrap();
            for subtask in Subtask::ALL {
                let gold_of: HashMap<&str, &str> = gold.iter().map(|c| (c.case_id.as_str(), subtask.gold(c).unwrap())).collect();
                let pairs: Vec<(&str, &str)> = preds.iter().map(|p| (gold_of[p.case_id.as_str()], p.label(subtask))).collect();
                let mut classes: BTreeSet<&str> = pairs.iter().flat_map(|(g, p)| [*g, *p]).collect();
                if universe == ClassUniverse::LabelSpace {
                    classes.extend(subtask.labels(&space).iter().map(String::as_str));
                }
                let m = report.get(subtask);
                assert_eq!(m.classes.len(), classes.len(), "set {set} {}", subtask.name());
                let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
                for (c, got) in classes.iter().zip(&m.classes) {
                    let tp = pairs.iter().filter(|(g, p)| g == c && p == c).count();
                    let fp = pairs.iter().filter(|(g, p)| g != c && p == c).count();
                    let fn_ = pairs.iter().filter(|(g, p)| g == c && p != c).count();
                    let p = if tp + fp == 0 { zero_division += 1; 0.0 } else { tp as f64 / (tp + fp) as f64 };
                    let r = if tp + fn_ == 0 { zero_division += 1; 0.0 } else { tp as f64 / (tp + fn_) as f64 };
                    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
                    assert_eq!(got.label, *c);
                    assert_eq!((got.precision, got.recall, got.f1), (p, r, f), "set {set} {} class {c}", subtask.name());
                    assert_eq!((got.support, got.predicted), (tp + fn_, tp + fp));
                    sp += p;
                    sr += r;
                    sf += f;
                }
                let k = classes.len() as f64;
                let acc = pairs.iter().filter(|(g, p)| g == p).count() as f64 / pairs.len() as f64;
                assert_eq!(m.accuracy, acc, "set {set}");
                assert_eq!((m.macro_precision, m.macro_recall, m.macro_f1), (sp / k, sr / k, sf / k), "set {set} {}", subtask.name());
            }
        }
    }
    assert!(zero_division > 0, "no zero-division case exercised");
    format!("20 sets x 2 class universes match the confusion-matrix oracle ({zero_division} zero divisions)")
}

fn run_fixture(dir: &Path) -> Pipeline {
    let opts = RunOptions { run_dir: dir.to_path_buf(), mock: true, ..Default::default() };
    let mut p = Pipeline::open(&fixture_config(), &opts, true).unwrap();
    p.run_all().unwrap();
    p
}

fn tree_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir.join("trees"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn criterion_7() -> String {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let runs = [run_fixture(a.path()), run_fixture(b.path())];
    for file in ["predictions.jsonl", "metrics.json", "metrics.txt"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(!x.is_empty() && x == y, "{file} differs between runs");
    }
    let trees = tree_files(a.path());
    assert!(!trees.is_empty());
    assert_eq!(trees, tree_files(b.path()), "tree stores differ");
    for (p, dir) in runs.iter().zip([a.path(), b.path()]) {
        let lines = std::fs::read_to_string(dir.join("transcript.jsonl")).unwrap().lines().count() as u64;
        let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["usage"]["calls"].as_u64(), Some(lines));
        assert_eq!(p.manifest().usage.calls, lines);
        assert_eq!(manifest["stages"].as_array().unwrap().len(), 9);
    }
    format!("predictions, metrics and {} tree stores byte-identical; {} calls = transcript lines", trees.len(), runs[0].manifest().usage.calls)
}

fn criterion_8() -> String {
    let dir = tempfile::tempdir().unwrap();
    run_fixture(dir.path());
    let report: Vec<TargetOptimization> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("optimize_report.json")).unwrap()).unwrap();
    let mut notes = Vec::new();
    for target in [theft(), robbery()] {
        let r = report.iter().find(|r| r.target == target.key()).unwrap_or_else(|| panic!("no report for {}", target.key()));
        let tree = OptimizationTree::load(&dir.path().join(r.tree.as_ref().unwrap())).unwrap();
        let root = tree.root().weight().unwrap();
        let best = tree.node(tree.max_pointer.as_ref().unwrap()).unwrap();
        assert_eq!(Some(root), r.root_weight);
        assert!((root - 0.5).abs() <= 0.1, "{}: root quiz score {root}", target.key());
        assert!(best.weight().unwrap() >= 0.9, "{}: best quiz score {:?}", target.key(), best.weight());
        assert_ne!(best.node_id, tree.root_id(), "{}: the root was returned", target.key());
        assert_eq!(best.rule.text(), r.best_rule);
        notes.push(format!("{} {root:.2} -> {:.2}", target.key(), best.weight().unwrap()));
    }
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    let acc = metrics["charge"]["accuracy"].as_f64().unwrap();
    assert!(acc >= 0.9, "charge accuracy {acc}");
    format!("{}; charge accuracy {acc:.2}", notes.join(", "))
}

fn criterion_9() -> String {
    let article_rule = |a: &str| FolRule::new(a, Consequent::Article { article: a.into() }, Formula::forall("x", Formula::atom("Holds", vec![Term::Var("x".into())])));
    let rules: RuleSet = ["264", "263", "266"].into_iter().map(article_rule).collect();
    let labels = LabelSpace {
        articles: vec!["264".into(), "263".into(), "266".into()],
        charges: vec!["theft".into(), "robbery".into()],
        prison_terms: vec!["0".into(), "1".into()],
    };
    let list = |s: Subtask, entries: &[(&str, f64)]| CandidateList { subtask: s, entries: entries.iter().map(|(l, v)| (l.to_string(), *v)).collect() };
    let candidates = Candidates {
        article: list(Subtask::Article, &[("264", 0.9), ("263", 0.4)]),
        charge: list(Subtask::Charge, &[("theft", 0.7)]),
        prison_term: list(Subtask::PrisonTerm, &[("1", 0.6)]),
    };
    let judge = |yes: Option<&'static str>| {
        Agent::for_backend(FnBackend::new("judge", move |req: &ChatRequest| {
            let verdict = if yes.is_some_and(|t| req.tag.ends_with(&format!("/article/{t}"))) { "YES" } else { "NO" };
            Ok(format!("Reasoning: scripted\nVerdict: {verdict}"))
        }))
    };

    let agent = judge(Some("266"));
    let p = predict_case("c1", "facts", &rules, &candidates, &labels, &agent, 9).unwrap();
    assert_eq!(p.article, "266");
    assert!(p.used_fallback.article);
    let tags = agent.transcript().tags();
    let pos = |t: &str| tags.iter().position(|x| x == t).unwrap_or_else(|| panic!("{t} not asked: {tags:?}"));
    assert!(pos("exam/c1/article/264") < pos("exam/c1/article/263"));
    assert!(pos("exam/c1/article/263") < pos("exam/c1/article/266"), "remaining labels after candidates");

    let p = predict_case("c1", "facts", &rules, &candidates, &labels, &judge(None), 9).unwrap();
    assert_eq!(p.article, "264");
    assert!(p.used_fallback.article);
    assert!(p.rationale.contains(NO_RULE_SATISFIED));

    let p = predict_case("c1", "facts", &rules, &candidates, &labels, &judge(Some("263")), 9).unwrap();
    assert_eq!(p.article, "263");
    assert!(!p.used_fallback.article);
    "remaining-label rule wins with fallback; all-NO falls back to top-1".into()
}

fn main() {
    let results = [
        criterion(1, "FOL round-trip and located errors", 5, criterion_1),
        criterion(2, "similarity and confusable-set oracles", 10, criterion_2),
        criterion(3, "quiz score and outcome partition", 5, criterion_3),
        criterion(4, "optimization tree invariants", 30, criterion_4),
        criterion(5, "consequent lock under adversarial rewrites", 10, criterion_5),
        criterion(6, "metrics oracle", 5, criterion_6),
        criterion(7, "end-to-end determinism", 60, criterion_7),
        criterion(8, "end-to-end efficacy", 60, criterion_8),
        criterion(9, "examination fallback", 5, criterion_9),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
