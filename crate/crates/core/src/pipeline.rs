//! Resumable end-to-end runs: nine stages over plain files in a run directory.
//!
//! Every stage records the content hashes of what it read and wrote in
//! `manifest.json`. With `resume`, a stage whose inputs are unchanged and whose
//! outputs are intact is skipped; an output whose bytes no longer match the
//! recorded hash is reported as a checksum error.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::agents::{Agent, ChatBackend, OpenAiBackend, OpenAiEmbedder, RetryPolicy, Transcript, UsageTotals, API_KEY_ENV};
use crate::cacl::CaclConfig;
use crate::confusable::{build_confusable_set, fnv1a, ConfusableRecord, ConfusableSet, EmbedError, EmbeddingBackend, HashingEmbedder};
use crate::corpus::{self, FieldMapping, LabelSpace, LegalCase, PrecedentMode};
use crate::examination::{self, CandidateModel, ExamConfig, PerceptronConfig};
use crate::fol_rules::{Consequent, FolRule};
use crate::jurist::KeywordJurist;
use crate::metrics::{compute_metrics, ClassUniverse};
use crate::opt_tree::{OptimizationTree, OptimizeConfig, TreeError};
use crate::quiz::{make_quiz, DistractorSource, QuizConfig, QuizError};
use crate::rule_init::{init_all_rules, InitConfig, RuleSet};
use crate::Executor;

pub const MANIFEST: &str = "manifest.json";
pub const TRANSCRIPT: &str = "transcript.jsonl";
pub const CASES: &str = "cases.jsonl";
pub const REJECTS: &str = "rejects.jsonl";
pub const LABELS: &str = "labels.json";
pub const SPLIT: &str = "split.json";
pub const PRECEDENTS: &str = "precedents.json";
pub const RULES_INITIAL: &str = "rules_initial.json";
pub const INIT_REPORT: &str = "init_report.json";
pub const CONFUSABLE: &str = "confusable.json";
pub const TREES_DIR: &str = "trees";
pub const RULES_OPTIMIZED: &str = "rules_optimized.json";
pub const OPTIMIZE_REPORT: &str = "optimize_report.json";
pub const CANDIDATES: &str = "candidates.json";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checksum mismatch for {path}: recorded {expected}, found {actual}")]
    Checksum { path: String, expected: String, actual: String },
    #[error("stage {stage} needs {path}, which does not exist; run the producing stage first")]
    MissingInput { stage: &'static str, path: String },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("run directory: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code: 2 for configuration errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Resolved against the configuration file's directory when relative.
    pub corpus: PathBuf,
    pub field_mapping: FieldMapping,
    pub split_ratios: [f64; 3],
    pub precedent_modes: Vec<PrecedentMode>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: PathBuf::from("cases.jsonl"),
            field_mapping: FieldMapping::default(),
            split_ratios: [0.8, 0.1, 0.1],
            precedent_modes: vec![PrecedentMode::ArticleCharge],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatKind {
    /// The offline phrase-matching jurist.
    Simulated,
    OpenAi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatProviderConfig {
    pub kind: ChatKind,
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for ChatProviderConfig {
    fn default() -> Self {
        ChatProviderConfig {
            kind: ChatKind::Simulated,
            base_url: "https://api.openai.com".into(),
            model: "gpt-4o".into(),
            timeout_secs: 120,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Hashing,
    OpenAi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingProviderConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        EmbeddingProviderConfig {
            kind: EmbeddingKind::Hashing,
            dim: 256,
            base_url: "https://api.openai.com".into(),
            model: "text-embedding-3-small".into(),
            timeout_secs: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub chat: ChatProviderConfig,
    pub embedding: EmbeddingProviderConfig,
    pub retry: RetryPolicy,
    /// Upper bound on concurrent agent calls.
    pub concurrency: usize,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        ProvidersConfig {
            chat: ChatProviderConfig::default(),
            embedding: EmbeddingProviderConfig::default(),
            retry: RetryPolicy::default(),
            concurrency: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuizSection {
    pub num_options: usize,
    pub distractors: DistractorSource,
}

impl Default for QuizSection {
    fn default() -> Self {
        let q = QuizConfig::default();
        QuizSection { num_options: q.num_options, distractors: q.distractors }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationSection {
    pub init: InitConfig,
    /// Hard negatives per target; defaults to the number of positives.
    pub num_negatives: Option<usize>,
    pub defined_score: f64,
    pub max_iterations: u32,
    pub cacl: CaclConfig,
}

impl Default for OptimizationSection {
    fn default() -> Self {
        let o = OptimizeConfig::default();
        OptimizationSection {
            init: InitConfig::default(),
            num_negatives: None,
            defined_score: o.defined_score,
            max_iterations: o.max_iterations,
            cacl: o.cacl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptronSection {
    pub dim: usize,
    pub max_n: usize,
    pub epochs: usize,
}

impl Default for PerceptronSection {
    fn default() -> Self {
        let p = PerceptronConfig::default();
        PerceptronSection { dim: p.dim, max_n: p.max_n, epochs: p.epochs }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExaminationSection {
    pub top_k: usize,
    pub abstract_threshold: usize,
    /// When set, only this fraction of the longest test cases is examined.
    pub long_subset_fraction: Option<f64>,
    pub perceptron: PerceptronSection,
}

impl Default for ExaminationSection {
    fn default() -> Self {
        let e = ExamConfig::default();
        ExaminationSection {
            top_k: e.top_k,
            abstract_threshold: e.abstract_threshold,
            long_subset_fraction: None,
            perceptron: PerceptronSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub universe: ClassUniverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub providers: ProvidersConfig,
    pub quiz: QuizSection,
    pub optimization: OptimizationSection,
    pub examination: ExaminationSection,
    pub metrics: MetricsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            data: DataConfig::default(),
            providers: ProvidersConfig::default(),
            quiz: QuizSection::default(),
            optimization: OptimizationSection::default(),
            examination: ExaminationSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let config: PipelineConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let r = self.data.split_ratios;
        if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("data.split_ratios must be non-negative and sum to 1, got {r:?}"));
        }
        if self.data.precedent_modes.is_empty() {
            return bad("data.precedent_modes must not be empty".into());
        }
        if self.quiz.num_options < 2 {
            return bad("quiz.num_options must be at least 2".into());
        }
        if self.optimization.num_negatives == Some(0) {
            return bad("optimization.num_negatives must be at least 1".into());
        }
        if self.optimization.init.precedents_per_target == 0 {
            return bad("optimization.init.precedents_per_target must be at least 1".into());
        }
        if self.examination.top_k == 0 {
            return bad("examination.top_k must be at least 1".into());
        }
        if let Some(f) = self.examination.long_subset_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("examination.long_subset_fraction must lie in (0, 1], got {f}"));
            }
        }
        if self.providers.concurrency == 0 {
            return bad("providers.concurrency must be at least 1".into());
        }
        if self.providers.embedding.dim == 0 {
            return bad("providers.embedding.dim must be at least 1".into());
        }
        Ok(())
    }

    fn optimize_config(&self) -> OptimizeConfig {
        OptimizeConfig {
            defined_score: self.optimization.defined_score,
            max_iterations: self.optimization.max_iterations,
            cacl: self.optimization.cacl.clone(),
        }
    }

    fn perceptron_config(&self) -> PerceptronConfig {
        let p = &self.examination.perceptron;
        PerceptronConfig { dim: p.dim, max_n: p.max_n, epochs: p.epochs, seed: self.seed }
    }

    fn exam_config(&self) -> ExamConfig {
        ExamConfig {
            top_k: self.examination.top_k,
            abstract_threshold: self.examination.abstract_threshold,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Split,
    Group,
    InitRules,
    BuildConfusable,
    Optimize,
    TrainCandidates,
    Examine,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Split,
        Stage::Group,
        Stage::InitRules,
        Stage::BuildConfusable,
        Stage::Optimize,
        Stage::TrainCandidates,
        Stage::Examine,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Group => "group",
            Stage::InitRules => "init-rules",
            Stage::BuildConfusable => "build-confusable",
            Stage::Optimize => "optimize",
            Stage::TrainCandidates => "train-candidates",
            Stage::Examine => "examine",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Run-directory files the stage reads.
    fn input_files(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &[],
            Stage::Split => &[CASES],
            Stage::Group => &[CASES, SPLIT],
            Stage::InitRules => &[CASES, LABELS, PRECEDENTS],
            Stage::BuildConfusable => &[CASES, SPLIT, RULES_INITIAL],
            Stage::Optimize => &[CASES, SPLIT, LABELS, RULES_INITIAL, CONFUSABLE],
            Stage::TrainCandidates => &[CASES, SPLIT, LABELS],
            Stage::Examine => &[CASES, SPLIT, LABELS, RULES_OPTIMIZED, CANDIDATES],
            Stage::Evaluate => &[CASES, SPLIT, LABELS, PREDICTIONS],
        }
    }

    /// Pointers into the effective configuration the stage depends on.
    fn config_sections(self) -> &'static [&'static str] {
        match self {
            Stage::Ingest => &["/data/field_mapping"],
            Stage::Split => &["/data/split_ratios", "/seed"],
            Stage::Group => &["/data/precedent_modes", "/optimization/init/precedents_per_target"],
            Stage::InitRules => &["/optimization/init", "/providers/chat"],
            Stage::BuildConfusable => &["/optimization/num_negatives", "/providers/embedding"],
            Stage::Optimize => &["/quiz", "/optimization", "/providers/chat", "/seed"],
            Stage::TrainCandidates => &["/examination/perceptron", "/seed"],
            Stage::Examine => &["/examination", "/providers/chat", "/seed"],
            Stage::Evaluate => &["/metrics", "/examination/long_subset_fraction"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub started_at: String,
    pub finished_at: String,
    /// Input key to SHA-256; keys are run-directory paths, the corpus path, or `config:<pointer>`.
    pub inputs: BTreeMap<String, String>,
    /// Run-directory path to SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub updated_at: String,
    pub config_path: String,
    pub config_sha256: String,
    /// The configuration file exactly as read.
    pub config_text: String,
    /// After defaults and command-line overrides.
    pub effective_config: Value,
    pub providers: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<String>,
    /// Agent calls and usage accumulated over every session on this run directory.
    pub usage: UsageTotals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<Stage>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Stage { stage: "manifest", message: e.to_string() })
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    fn put(&mut self, record: StageRecord) {
        match self.stages.iter_mut().find(|r| r.stage == record.stage) {
            Some(slot) => *slot = record,
            None => {
                self.stages.push(record);
                self.stages.sort_by_key(|r| r.stage);
            }
        }
        let mut artifacts: Vec<String> = self.stages.iter().flat_map(|r| r.outputs.keys().cloned()).collect();
        artifacts.sort();
        artifacts.dedup();
        self.artifacts = artifacts;
    }

    /// Recorded hash of a run-directory file, from whichever stage wrote it.
    fn recorded_hash(&self, file: &str) -> Option<&str> {
        self.stages.iter().find_map(|r| r.outputs.get(file).map(String::as_str))
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub run_dir: PathBuf,
    pub seed: Option<u64>,
    pub resume: bool,
    /// Forces the simulated chat backend and the hashing embedder.
    pub mock: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
    fs::write(path, text + "\n")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// File name for a target's tree store.
pub fn tree_file(target: &Consequent) -> String {
    let key: String = target
        .key()
        .chars()
        .map(|c| if c.is_alphanumeric() || "+#-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{TREES_DIR}/{key}.json")
}

/// Embedder that remembers vectors by case id.
struct CachedEmbedder {
    inner: Box<dyn EmbeddingBackend>,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl EmbeddingBackend for CachedEmbedder {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn embed(&self, case_id: &str, text: &str) -> Result<Vec<f64>, EmbedError> {
        if let Some(v) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(case_id) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(case_id, text)?;
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).insert(case_id.to_string(), v.clone());
        Ok(v)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SplitIds {
    train: Vec<String>,
    validation: Vec<String>,
    test: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PrecedentGroup {
    target: Consequent,
    case_ids: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InitReportFile {
    initialized: Vec<String>,
    failures: Vec<TargetFailure>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TargetFailure {
    target: String,
    error: String,
}

/// Per-target summary of an optimization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetOptimization {
    pub target: String,
    pub tree: Option<String>,
    pub root_weight: Option<f64>,
    pub best_weight: Option<f64>,
    pub best_rule: String,
    pub nodes: usize,
    pub iterations: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

type StageResult = Result<Vec<String>, String>;

pub struct Pipeline {
    config: PipelineConfig,
    effective: Value,
    corpus_path: PathBuf,
    run_dir: PathBuf,
    resume: bool,
    agent: Agent,
    embedder: CachedEmbedder,
    exec: Executor,
    transcript: Arc<Transcript>,
    base_usage: UsageTotals,
    manifest: RunManifest,
}

impl Pipeline {
    /// Reads the configuration file and prepares the run directory. A fresh
    /// `run-all` passes `fresh = true`, which truncates the transcript and
    /// starts a new manifest.
    pub fn open(config_path: &Path, options: &RunOptions, fresh: bool) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(config_path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", config_path.display())))?;
        let base = config_path.parent().unwrap_or(Path::new("."));
        Pipeline::from_text(&text, &config_path.display().to_string(), base, options, fresh)
    }

    pub fn from_text(
        text: &str,
        config_label: &str,
        base_dir: &Path,
        options: &RunOptions,
        fresh: bool,
    ) -> Result<Self, PipelineError> {
        let mut config = PipelineConfig::parse(text)?;
        if let Some(seed) = options.seed {
            config.seed = seed;
        }
        if options.mock {
            config.providers.chat.kind = ChatKind::Simulated;
            config.providers.embedding.kind = EmbeddingKind::Hashing;
        }
        let corpus_path =
            if config.data.corpus.is_absolute() { config.data.corpus.clone() } else { base_dir.join(&config.data.corpus) };
        let effective = serde_json::to_value(&config).map_err(|e| PipelineError::Config(e.to_string()))?;

        let key = || std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let chat = &config.providers.chat;
        let backend: Arc<dyn ChatBackend> = match chat.kind {
            ChatKind::Simulated => Arc::new(KeywordJurist::default()),
            ChatKind::OpenAi => {
                if key().is_none() {
                    return Err(PipelineError::Config(format!("{API_KEY_ENV} is not set")));
                }
                Arc::new(OpenAiBackend::from_env(&chat.base_url, &chat.model, Duration::from_secs(chat.timeout_secs)))
            }
        };
        let emb = &config.providers.embedding;
        let inner: Box<dyn EmbeddingBackend> = match emb.kind {
            EmbeddingKind::Hashing => Box::new(HashingEmbedder { dim: emb.dim }),
            EmbeddingKind::OpenAi => {
                if key().is_none() {
                    return Err(PipelineError::Config(format!("{API_KEY_ENV} is not set")));
                }
                Box::new(OpenAiEmbedder::from_env(&emb.base_url, &emb.model, Duration::from_secs(emb.timeout_secs)))
            }
        };

        fs::create_dir_all(options.run_dir.join(TREES_DIR))?;
        let manifest_path = options.run_dir.join(MANIFEST);
        let previous = if !fresh && manifest_path.exists() { Some(RunManifest::load(&manifest_path)?) } else { None };
        let transcript_path = options.run_dir.join(TRANSCRIPT);
        if previous.is_none() {
            fs::write(&transcript_path, "")?;
        }
        let transcript = Transcript::to_file(&transcript_path)?;
        let retry = match chat.kind {
            ChatKind::Simulated => RetryPolicy::immediate(),
            ChatKind::OpenAi => config.providers.retry.clone(),
        };
        let agent = Agent::new(backend, retry, transcript.clone());
        let embedder = CachedEmbedder { inner, cache: Mutex::new(HashMap::new()) };

        let stamp = now();
        let config_sha256 = sha256_hex(text.as_bytes());
        let mut manifest = previous.unwrap_or_else(|| RunManifest {
            run_id: format!("run-{}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S"), &config_sha256[..8]),
            created_at: stamp.clone(),
            updated_at: stamp.clone(),
            config_path: String::new(),
            config_sha256: String::new(),
            config_text: String::new(),
            effective_config: Value::Null,
            providers: BTreeMap::new(),
            seeds: BTreeMap::new(),
            stages: Vec::new(),
            artifacts: Vec::new(),
            usage: UsageTotals::default(),
            failed_stage: None,
        });
        manifest.config_path = config_label.to_string();
        manifest.config_sha256 = config_sha256;
        manifest.config_text = text.to_string();
        manifest.effective_config = effective.clone();
        manifest.providers = BTreeMap::from([
            ("chat".to_string(), agent.identity()),
            ("embedding".to_string(), embedder.identity()),
            ("candidates".to_string(), "char-ngram-perceptron".to_string()),
        ]);
        manifest.seeds = BTreeMap::from([
            ("global".to_string(), config.seed),
            ("split".to_string(), config.seed),
            ("perceptron".to_string(), config.seed),
            ("examination".to_string(), config.seed),
        ]);
        let base_usage = manifest.usage;
        let exec = Executor::with_threads(config.providers.concurrency);
        let pipeline = Pipeline {
            config,
            effective,
            corpus_path,
            run_dir: options.run_dir.clone(),
            resume: options.resume,
            agent,
            embedder,
            exec,
            transcript,
            base_usage,
            manifest,
        };
        pipeline.save_manifest()?;
        Ok(pipeline)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    fn path(&self, file: &str) -> PathBuf {
        self.run_dir.join(file)
    }

    fn save_manifest(&self) -> Result<(), PipelineError> {
        write_json(&self.path(MANIFEST), &self.manifest)?;
        Ok(())
    }

    fn stage_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut inputs = BTreeMap::new();
        if stage == Stage::Ingest {
            let hash = file_hash(&self.corpus_path).map_err(|e| PipelineError::Stage {
                stage: stage.name(),
                message: format!("corpus {}: {e}", self.corpus_path.display()),
            })?;
            inputs.insert(format!("corpus:{}", self.corpus_path.display()), hash);
        }
        for file in stage.input_files() {
            let path = self.path(file);
            if !path.exists() {
                return Err(PipelineError::MissingInput { stage: stage.name(), path: path.display().to_string() });
            }
            let actual = file_hash(&path)?;
            if let Some(expected) = self.manifest.recorded_hash(file) {
                if expected != actual {
                    return Err(PipelineError::Checksum {
                        path: path.display().to_string(),
                        expected: expected.to_string(),
                        actual,
                    });
                }
            }
            inputs.insert(file.to_string(), actual);
        }
        for pointer in stage.config_sections() {
            let value = self.effective.pointer(pointer).cloned().unwrap_or(Value::Null);
            inputs.insert(format!("config:{pointer}"), sha256_hex(value.to_string().as_bytes()));
        }
        Ok(inputs)
    }

    /// Whether the recorded outputs of `stage` are all present and intact.
    fn outputs_intact(&self, stage: Stage) -> Result<bool, PipelineError> {
        let Some(record) = self.manifest.stage(stage) else { return Ok(false) };
        if record.status == StageStatus::Failed {
            return Ok(false);
        }
        for (file, expected) in &record.outputs {
            let path = self.path(file);
            if !path.exists() {
                return Ok(false);
            }
            let actual = file_hash(&path)?;
            if &actual != expected {
                return Err(PipelineError::Checksum { path: path.display().to_string(), expected: expected.clone(), actual });
            }
        }
        Ok(true)
    }

    fn is_fresh(&self, stage: Stage, inputs: &BTreeMap<String, String>) -> Result<bool, PipelineError> {
        let Some(record) = self.manifest.stage(stage) else { return Ok(false) };
        if &record.inputs != inputs || !self.outputs_intact(stage)? {
            return Ok(false);
        }
        // Predictions are only reused together with the metrics computed from them.
        if stage == Stage::Examine && !self.outputs_intact(Stage::Evaluate)? {
            return Ok(false);
        }
        Ok(true)
    }

    /// Every stage in order.
    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>, PipelineError> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    /// Runs one stage, or skips it when resuming and it is up to date.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageOutcome, PipelineError> {
        let result = self.run_stage_inner(stage);
        self.manifest.usage = self.usage();
        self.manifest.updated_at = now();
        if let Err(e) = &result {
            self.manifest.failed_stage = Some(stage);
            if !matches!(e, PipelineError::MissingInput { .. } | PipelineError::Checksum { .. }) {
                let stamp = now();
                let previous = self.manifest.stage(stage).cloned();
                self.manifest.put(StageRecord {
                    stage,
                    status: StageStatus::Failed,
                    started_at: stamp.clone(),
                    finished_at: stamp,
                    inputs: previous.as_ref().map(|r| r.inputs.clone()).unwrap_or_default(),
                    outputs: BTreeMap::new(),
                    error: Some(e.to_string()),
                });
            }
        } else if self.manifest.failed_stage == Some(stage) {
            self.manifest.failed_stage = None;
        }
        self.save_manifest()?;
        result
    }

    fn usage(&self) -> UsageTotals {
        let session = self.transcript.usage();
        UsageTotals {
            calls: self.base_usage.calls + session.calls,
            input_units: self.base_usage.input_units + session.input_units,
            output_units: self.base_usage.output_units + session.output_units,
        }
    }

    fn run_stage_inner(&mut self, stage: Stage) -> Result<StageOutcome, PipelineError> {
        let inputs = self.stage_inputs(stage)?;
        if self.resume && self.is_fresh(stage, &inputs)? {
            log::info!("stage {} is up to date; skipping", stage.name());
            if let Some(record) = self.manifest.stage(stage).cloned() {
                self.manifest.put(StageRecord { status: StageStatus::Skipped, ..record });
            }
            return Ok(StageOutcome { stage, skipped: true });
        }
        let interrupted = self
            .manifest
            .stage(stage)
            .is_some_and(|r| r.status == StageStatus::Failed && r.inputs == inputs);
        log::info!("stage {} running", stage.name());
        let started_at = now();
        let produced = match stage {
            Stage::Ingest => self.ingest(),
            Stage::Split => self.split(),
            Stage::Group => self.group(),
            Stage::InitRules => self.init_rules(),
            Stage::BuildConfusable => self.build_confusable(),
            Stage::Optimize => self.optimize(self.resume && interrupted),
            Stage::TrainCandidates => self.train_candidates(),
            Stage::Examine => self.examine(),
            Stage::Evaluate => self.evaluate(),
        }
        .map_err(|message| PipelineError::Stage { stage: stage.name(), message })?;
        let mut outputs = BTreeMap::new();
        for file in produced {
            let hash = file_hash(&self.path(&file))?;
            outputs.insert(file, hash);
        }
        self.manifest.put(StageRecord {
            stage,
            status: StageStatus::Completed,
            started_at,
            finished_at: now(),
            inputs: self.stage_inputs(stage)?,
            outputs,
            error: None,
        });
        Ok(StageOutcome { stage, skipped: false })
    }

    fn cases(&self) -> Result<Vec<LegalCase>, String> {
        let text = fs::read_to_string(self.path(CASES)).map_err(|e| format!("{CASES}: {e}"))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| format!("{CASES}: {e}")))
            .collect()
    }

    fn labels(&self) -> Result<LabelSpace, String> {
        read_json(&self.path(LABELS))
    }

    fn split_cases(&self) -> Result<corpus::DatasetSplit, String> {
        let ids: SplitIds = read_json(&self.path(SPLIT))?;
        let cases = self.cases()?;
        let by_id: HashMap<&str, &LegalCase> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
        let fetch = |list: &[String]| {
            list.iter()
                .map(|id| by_id.get(id.as_str()).map(|c| (*c).clone()).ok_or_else(|| format!("{SPLIT}: unknown case {id}")))
                .collect::<Result<Vec<_>, _>>()
        };
        Ok(corpus::DatasetSplit { train: fetch(&ids.train)?, validation: fetch(&ids.validation)?, test: fetch(&ids.test)? })
    }

    fn exam_cases(&self) -> Result<Vec<LegalCase>, String> {
        let test = self.split_cases()?.test;
        match self.config.examination.long_subset_fraction {
            Some(f) => corpus::long_subset(&test, f).map_err(|e| e.to_string()),
            None => Ok(test),
        }
    }

    fn ingest(&self) -> StageResult {
        let report = corpus::load_cases(&self.corpus_path, &self.config.data.field_mapping).map_err(|e| e.to_string())?;
        if report.cases.is_empty() {
            return Err(format!("no usable cases in {}", self.corpus_path.display()));
        }
        if !report.rejects.is_empty() {
            log::warn!("{} corpus lines rejected; see {REJECTS}", report.rejects.len());
        }
        let mut out = BufWriter::new(fs::File::create(self.path(CASES)).map_err(|e| e.to_string())?);
        for case in &report.cases {
            let line = serde_json::to_string(case).map_err(|e| e.to_string())?;
            writeln!(out, "{line}").map_err(|e| e.to_string())?;
        }
        out.flush().map_err(|e| e.to_string())?;
        corpus::write_rejects(&self.path(REJECTS), &report.rejects).map_err(|e| e.to_string())?;
        write_json(&self.path(LABELS), &corpus::label_space(&report.cases)).map_err(|e| e.to_string())?;
        Ok(vec![CASES.into(), REJECTS.into(), LABELS.into()])
    }

    fn split(&self) -> StageResult {
        let cases = self.cases()?;
        let labelled: Vec<LegalCase> = cases.into_iter().filter(|c| c.judgment.is_some()).collect();
        let split = corpus::split_dataset(&labelled, self.config.data.split_ratios, self.config.seed).map_err(|e| e.to_string())?;
        let ids = |v: &[LegalCase]| v.iter().map(|c| c.case_id.clone()).collect();
        let file = SplitIds { train: ids(&split.train), validation: ids(&split.validation), test: ids(&split.test) };
        write_json(&self.path(SPLIT), &file).map_err(|e| e.to_string())?;
        Ok(vec![SPLIT.into()])
    }

    fn group(&self) -> StageResult {
        let train = self.split_cases()?.train;
        let k = self.config.optimization.init.precedents_per_target;
        let mut groups = Vec::new();
        for mode in &self.config.data.precedent_modes {
            for (target, members) in corpus::group_precedents(&train, *mode, k) {
                groups.push(PrecedentGroup { target, case_ids: members.iter().map(|c| c.case_id.clone()).collect() });
            }
        }
        write_json(&self.path(PRECEDENTS), &groups).map_err(|e| e.to_string())?;
        Ok(vec![PRECEDENTS.into()])
    }

    fn init_rules(&self) -> StageResult {
        let groups: Vec<PrecedentGroup> = read_json(&self.path(PRECEDENTS))?;
        let cases = self.cases()?;
        let labels = self.labels()?;
        let by_id: HashMap<&str, &LegalCase> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
        let mut grouped: BTreeMap<Consequent, Vec<LegalCase>> = BTreeMap::new();
        for g in &groups {
            let members = g
                .case_ids
                .iter()
                .map(|id| by_id.get(id.as_str()).map(|c| (*c).clone()).ok_or_else(|| format!("{PRECEDENTS}: unknown case {id}")))
                .collect::<Result<Vec<_>, _>>()?;
            grouped.insert(g.target.clone(), members);
        }
        let targets: Vec<Consequent> = groups.iter().map(|g| g.target.clone()).collect();
        let report = init_all_rules(&targets, &grouped, &self.agent, &labels, &self.config.optimization.init, &self.exec);
        if report.rules.is_empty() {
            return Err("no rule could be initialized".into());
        }
        report.rules.save(&self.path(RULES_INITIAL), &now()).map_err(|e| e.to_string())?;
        let file = InitReportFile {
            initialized: report.rules.targets().map(Consequent::key).collect(),
            failures: report
                .failures
                .iter()
                .map(|f| TargetFailure { target: f.target.key(), error: f.error.to_string() })
                .collect(),
        };
        write_json(&self.path(INIT_REPORT), &file).map_err(|e| e.to_string())?;
        Ok(vec![RULES_INITIAL.into(), INIT_REPORT.into()])
    }

    fn build_confusable(&self) -> StageResult {
        let train = self.split_cases()?.train;
        let rules = RuleSet::load(&self.path(RULES_INITIAL)).map_err(|e| e.to_string())?;
        let mut records: Vec<ConfusableRecord> = Vec::new();
        for target in rules.targets() {
            let positives: Vec<LegalCase> =
                train.iter().filter(|c| c.judgment.as_ref().is_some_and(|j| target.matches(j))).cloned().collect();
            if positives.is_empty() {
                log::warn!("target {} has no training positives; skipped", target.key());
                continue;
            }
            let num = self.config.optimization.num_negatives.unwrap_or(positives.len());
            match build_confusable_set(target, &positives, &train, num, &self.embedder, &self.exec) {
                Ok(set) => records.push(set.record()),
                Err(EmbedError::BadInput { target, reason }) => log::warn!("confusable set for {target} skipped: {reason}"),
                Err(e) => return Err(e.to_string()),
            }
        }
        write_json(&self.path(CONFUSABLE), &records).map_err(|e| e.to_string())?;
        Ok(vec![CONFUSABLE.into()])
    }

    fn optimize(&self, continue_trees: bool) -> StageResult {
        let train = self.split_cases()?.train;
        let labels = self.labels()?;
        let initial = RuleSet::load(&self.path(RULES_INITIAL)).map_err(|e| e.to_string())?;
        let records: Vec<ConfusableRecord> = read_json(&self.path(CONFUSABLE))?;
        let sets: BTreeMap<Consequent, ConfusableSet> = records
            .iter()
            .map(|r| ConfusableSet::from_record(r, &train).map(|s| (r.target.clone(), s)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let rules: Vec<FolRule> = initial.iter().cloned().collect();
        let opt_config = self.config.optimize_config();

        let results = self.exec.map(&rules, |rule| -> Result<(FolRule, TargetOptimization), String> {
            let target = &rule.target;
            let summary = |best: &FolRule, tree: Option<&OptimizationTree>, file: Option<String>, error: Option<String>| {
                TargetOptimization {
                    target: target.key(),
                    tree: file,
                    root_weight: tree.and_then(|t| t.root().weight()),
                    best_weight: tree.and_then(|t| t.max_pointer.as_ref().and_then(|p| t.node(p).ok()).and_then(|n| n.weight())),
                    best_rule: best.text(),
                    nodes: tree.map_or(0, OptimizationTree::len),
                    iterations: tree.map_or(0, |t| t.iteration),
                    error,
                }
            };
            let Some(set) = sets.get(target) else {
                log::warn!("no confusable set for {}; keeping the initial rule", target.key());
                return Ok((rule.clone(), summary(rule, None, None, Some("no confusable set".into()))));
            };
            let pool = corpus::target_pool(&train, target.kind());
            let quiz_config = QuizConfig {
                num_options: self.config.quiz.num_options,
                seed: self.config.seed ^ fnv1a(target.key().as_bytes()),
                distractors: self.config.quiz.distractors,
            };
            let questions = match make_quiz(set, &pool, &quiz_config) {
                Ok(q) => q,
                Err(e) => {
                    log::warn!("quiz for {} unavailable ({e}); keeping the initial rule", target.key());
                    return Ok((rule.clone(), summary(rule, None, None, Some(e.to_string()))));
                }
            };
            let file = tree_file(target);
            let path = self.path(&file);
            let mut tree = match continue_trees && path.exists() {
                true => match OptimizationTree::load(&path) {
                    Ok(t) if t.root().rule.same_logic(rule) => t,
                    _ => OptimizationTree::new(rule.clone()),
                },
                false => OptimizationTree::new(rule.clone()),
            };
            let mut persist = |t: &OptimizationTree| t.save(&path);
            match tree.optimize(&questions, &self.agent, &labels, &opt_config, &self.exec, &mut persist) {
                Ok(best) => {
                    tree.save(&path).map_err(|e| e.to_string())?;
                    let s = summary(&best, Some(&tree), Some(file), None);
                    Ok((best, s))
                }
                Err(e @ (TreeError::Io(_) | TreeError::Store(_) | TreeError::Quiz(QuizError::Agent { .. }))) => {
                    Err(format!("{}: {e}", target.key()))
                }
                Err(e) => {
                    log::warn!("optimization of {} failed ({e}); keeping the initial rule", target.key());
                    tree.save(&path).map_err(|e| e.to_string())?;
                    Ok((rule.clone(), summary(rule, Some(&tree), Some(file), Some(e.to_string()))))
                }
            }
        });
        let mut optimized = RuleSet::default();
        let mut report = Vec::new();
        let mut outputs = Vec::new();
        for r in results {
            let (rule, summary) = r?;
            if let Some(f) = &summary.tree {
                outputs.push(f.clone());
            }
            optimized.insert(rule);
            report.push(summary);
        }
        optimized.save(&self.path(RULES_OPTIMIZED), &now()).map_err(|e| e.to_string())?;
        write_json(&self.path(OPTIMIZE_REPORT), &report).map_err(|e| e.to_string())?;
        outputs.extend([RULES_OPTIMIZED.to_string(), OPTIMIZE_REPORT.to_string()]);
        Ok(outputs)
    }

    fn train_candidates(&self) -> StageResult {
        let train = self.split_cases()?.train;
        let model = CandidateModel::train(&train, &self.config.perceptron_config(), &self.exec).map_err(|e| e.to_string())?;
        model.save(&self.path(CANDIDATES)).map_err(|e| e.to_string())?;
        Ok(vec![CANDIDATES.into()])
    }

    fn examine(&self) -> StageResult {
        let cases = self.exam_cases()?;
        let labels = self.labels()?;
        let rules = RuleSet::load(&self.path(RULES_OPTIMIZED)).map_err(|e| e.to_string())?;
        let model = CandidateModel::load(&self.path(CANDIDATES)).map_err(|e| e.to_string())?;
        let predictions =
            examination::examine_cases(&cases, &rules, &model, &labels, &self.agent, &self.config.exam_config(), &self.exec)
                .map_err(|e| e.to_string())?;
        examination::write_predictions(&self.path(PREDICTIONS), &predictions).map_err(|e| e.to_string())?;
        Ok(vec![PREDICTIONS.into()])
    }

    fn evaluate(&self) -> StageResult {
        let gold = self.exam_cases()?;
        let labels = self.labels()?;
        let predictions = examination::read_predictions(&self.path(PREDICTIONS)).map_err(|e| e.to_string())?;
        let report = compute_metrics(&predictions, &gold, self.config.metrics.universe, &labels).map_err(|e| e.to_string())?;
        write_json(&self.path(METRICS_JSON), &report).map_err(|e| e.to_string())?;
        fs::write(self.path(METRICS_TXT), report.to_table()).map_err(|e| e.to_string())?;
        Ok(vec![METRICS_JSON.into(), METRICS_TXT.into()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = PipelineConfig::parse("{}").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.optimization.defined_score, 0.9);
        assert_eq!(c.optimization.max_iterations, 5);
        assert_eq!(c.examination.top_k, 10);
        assert_eq!(c.examination.abstract_threshold, 4000);
        assert_eq!(c.quiz.num_options, 4);
        assert_eq!(c.providers.concurrency, 4);
        assert_eq!(c.optimization.cacl.fact_limit, 1200);
        assert_eq!(c.optimization.cacl.max_records_per_side, 20);
    }

    #[test]
    fn config_errors_exit_two() {
        for bad in [
            r#"{"quiz": {"num_options": 1}}"#,
            r#"{"data": {"split_ratios": [0.5, 0.5, 0.5]}}"#,
            r#"{"unknown_section": {}}"#,
            "not json",
        ] {
            let e = PipelineConfig::parse(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::from_name(s.name()), Some(s));
        }
    }

    #[test]
    fn tree_files_are_flat() {
        let t = Consequent::ArticleCharge { article: "264".into(), charge: "theft/x".into() };
        assert_eq!(tree_file(&t), "trees/264+theft_x.json");
    }
}
