//! Config-driven orchestration of the full training-and-evaluation
//! pipeline, with per-run artifact directories and a lineage manifest.
//!
//! A run directory is keyed by the hash of the resolved configuration
//! (output location excluded), so distinct experiment settings never share
//! artifacts. Stages execute in dependency order; a stage whose inputs are
//! missing fails with the producing stage's name. One global seed derives
//! every stage seed.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    build_relation_triples, embedder, nli_separation_study, retriever_separation_study,
    write_scores_csv, CommandNliScorer, LexicalOverlapScorer, NliScorer,
};
use crate::contrastive::{finetune, FinetuneConfig};
use crate::data::{load_corpus, load_nli_dataset, load_qa_dataset, save_jsonl, NliLabel};
use crate::derive_seed;
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::masking::{MaskConfig, MaskScope};
use crate::prompt::{
    load_pairs, unify_with_hypothesis, EntailmentPair, PromptStrategy, QaHypothesis,
    TrainingExample,
};
use crate::retrieval::{
    encode_corpus, evaluate, read_embeddings, relevance_from_answers, relevance_from_labels,
    results_for_queries, write_embeddings, RelevanceMode, SearchResult,
};
use crate::tokenizer::Tokenizer;
use crate::trainer::{entailment_tune, TuneConfig};
use crate::DefaultScalar;

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Transform,
    Assemble,
    Tune,
    Finetune,
    Index,
    Search,
    Eval,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Transform,
        Stage::Assemble,
        Stage::Tune,
        Stage::Finetune,
        Stage::Index,
        Stage::Search,
        Stage::Eval,
        Stage::Analyze,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Transform => "transform",
            Stage::Assemble => "assemble",
            Stage::Tune => "tune",
            Stage::Finetune => "finetune",
            Stage::Index => "index",
            Stage::Search => "search",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .iter()
            .find(|stage| stage.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// How the fine-tuning towers are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerInit {
    /// From the entailment-tuned checkpoint (requires the tune stage).
    Tuned,
    /// From a fresh random initialization (the no-tuning baseline).
    Fresh,
}

/// Resolved dataset and output locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub qa_train: PathBuf,
    pub qa_test: Option<PathBuf>,
    pub nli: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSettings {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ff_multiplier: usize,
    /// Vocabulary cap when building from the dataset.
    pub vocab_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Retrieval depth per query.
    pub k: usize,
    pub hits_cutoffs: Vec<usize>,
    pub mrr_cutoffs: Vec<usize>,
    pub relevance: RelevanceMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSettings {
    /// `lexical` or `command:<shell command>`.
    pub scorer: String,
    /// Fraction of the corpus tail reserved as the irrelevant-premise pool.
    pub irrelevant_fraction: f64,
    pub write_csv: bool,
}

/// Fully resolved pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub encoder: EncoderSettings,
    pub prompt_strategy: PromptStrategy,
    pub tune: TuneConfig,
    pub finetune: FinetuneConfig,
    pub finetune_init: TowerInit,
    pub eval: EvalSettings,
    pub analyze: AnalyzeSettings,
    #[serde(skip)]
    pub source_path: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Raw (all-optional) config as read from TOML, before defaulting.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    paths: Option<RawPaths>,
    encoder: Option<RawEncoder>,
    prompt: Option<RawPrompt>,
    tune: Option<RawTune>,
    finetune: Option<RawFinetune>,
    eval: Option<RawEval>,
    analyze: Option<RawAnalyze>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPaths {
    qa_train: Option<String>,
    qa_test: Option<String>,
    nli: Option<String>,
    corpus: Option<String>,
    vocab: Option<String>,
    output_dir: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEncoder {
    layers: Option<usize>,
    hidden: Option<usize>,
    heads: Option<usize>,
    max_len: Option<usize>,
    ff_multiplier: Option<usize>,
    vocab_budget: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrompt {
    strategy: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTune {
    learning_rate: Option<f64>,
    warmup_steps: Option<usize>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    weight_decay: Option<f64>,
    adam_betas: Option<[f64; 2]>,
    adam_epsilon: Option<f64>,
    max_grad_norm: Option<f64>,
    mask: Option<RawMask>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMask {
    beta: Option<f64>,
    scope: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFinetune {
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    negatives_per_query: Option<usize>,
    warmup_steps: Option<usize>,
    weight_decay: Option<f64>,
    adam_betas: Option<[f64; 2]>,
    adam_epsilon: Option<f64>,
    max_grad_norm: Option<f64>,
    init: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    k: Option<usize>,
    hits_cutoffs: Option<Vec<usize>>,
    mrr_cutoffs: Option<Vec<usize>>,
    relevance: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalyze {
    scorer: Option<String>,
    irrelevant_fraction: Option<f64>,
    write_csv: Option<bool>,
}

/// Environment prefix for config overrides: `ENTTUNE__TUNE__EPOCHS=3`
/// overrides `[tune] epochs`; path segments join with `__`.
pub const ENV_PREFIX: &str = "ENTTUNE__";

/// Overlay environment overrides onto a parsed TOML tree. Only scalar
/// leaves can be overridden; values parse as TOML scalars, falling back to
/// strings.
fn apply_env_overrides(
    tree: &mut toml::Value,
    vars: impl Iterator<Item = (String, String)>,
) -> std::result::Result<(), String> {
    for (key, value) in vars {
        let Some(path) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
        if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
            return Err(format!("malformed override variable {key:?}"));
        }
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(table) if !value.is_empty() => table["v"].clone(),
            _ => toml::Value::String(value.clone()),
        };
        if parsed.is_table() || parsed.is_array() {
            return Err(format!("override {key:?} must be a scalar"));
        }
        let mut node = &mut *tree;
        for segment in &segments[..segments.len() - 1] {
            let table = node
                .as_table_mut()
                .ok_or_else(|| format!("override {key:?} crosses a non-table value"))?;
            node = table
                .entry(segment.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| format!("override {key:?} crosses a non-table value"))?;
        let leaf = segments.last().expect("non-empty").clone();
        if let Some(existing) = table.get(&leaf) {
            if existing.is_table() || existing.is_array() {
                return Err(format!("override {key:?} targets a non-scalar leaf"));
            }
        }
        table.insert(leaf, parsed);
    }
    Ok(())
}

fn resolve(
    raw: RawConfig,
    config_dir: &Path,
    source_path: Option<PathBuf>,
    violations: &mut Vec<String>,
) -> PipelineConfig {
    let rel = |s: &String| -> PathBuf {
        let p = PathBuf::from(s);
        if p.is_absolute() {
            p
        } else {
            config_dir.join(p)
        }
    };
    let paths_raw = raw.paths.unwrap_or_default();
    let paths = Paths {
        qa_train: paths_raw.qa_train.as_ref().map(&rel).unwrap_or_else(|| {
            violations.push("paths.qa_train is required".to_string());
            PathBuf::new()
        }),
        qa_test: paths_raw.qa_test.as_ref().map(&rel),
        nli: paths_raw.nli.as_ref().map(&rel),
        corpus: paths_raw.corpus.as_ref().map(&rel),
        vocab: paths_raw.vocab.as_ref().map(&rel),
        output_dir: paths_raw
            .output_dir
            .as_ref()
            .map(&rel)
            .unwrap_or_else(|| config_dir.join("runs")),
    };

    let enc = raw.encoder.unwrap_or_default();
    let encoder = EncoderSettings {
        layers: enc.layers.unwrap_or(4),
        hidden: enc.hidden.unwrap_or(256),
        heads: enc.heads.unwrap_or(4),
        max_len: enc.max_len.unwrap_or(256),
        ff_multiplier: enc.ff_multiplier.unwrap_or(4),
        vocab_budget: enc.vocab_budget.unwrap_or(30_000),
    };
    if !encoder.hidden.is_multiple_of(encoder.heads.max(1)) {
        violations.push(format!(
            "encoder.hidden ({}) must be divisible by encoder.heads ({})",
            encoder.hidden, encoder.heads
        ));
    }

    let prompt_strategy = match raw
        .prompt
        .unwrap_or_default()
        .strategy
        .as_deref()
        .unwrap_or("prompt")
    {
        "prompt" => PromptStrategy::Prompt,
        "concat" => PromptStrategy::Concat,
        other => {
            violations.push(format!(
                "prompt.strategy must be \"prompt\" or \"concat\", got {other:?}"
            ));
            PromptStrategy::Prompt
        }
    };

    let seed = raw.seed.unwrap_or(42);

    let tune_raw = raw.tune.unwrap_or_default();
    let mask_raw = tune_raw.mask.unwrap_or_default();
    let mask_scope = match mask_raw.scope.as_deref().unwrap_or("hypothesis_only") {
        "hypothesis_only" => MaskScope::HypothesisOnly,
        "full_prompt" => MaskScope::FullPrompt,
        other => {
            violations.push(format!(
                "tune.mask.scope must be \"hypothesis_only\" or \"full_prompt\", got {other:?}"
            ));
            MaskScope::HypothesisOnly
        }
    };
    let mask = MaskConfig {
        beta: mask_raw.beta.unwrap_or(0.8),
        scope: mask_scope,
        seed: derive_seed(seed, "mask"),
    };
    if !(0.0..=1.0).contains(&mask.beta) {
        violations.push(format!(
            "tune.mask.beta must lie in [0,1], got {}",
            mask.beta
        ));
    }
    let tune = TuneConfig {
        learning_rate: tune_raw.learning_rate.unwrap_or(2e-5),
        warmup_steps: tune_raw.warmup_steps.unwrap_or(100),
        batch_size: tune_raw.batch_size.unwrap_or(128),
        epochs: tune_raw.epochs.unwrap_or(10),
        weight_decay: tune_raw.weight_decay.unwrap_or(0.01),
        adam_betas: tune_raw
            .adam_betas
            .map(|b| (b[0], b[1]))
            .unwrap_or((0.9, 0.999)),
        adam_epsilon: tune_raw.adam_epsilon.unwrap_or(1e-8),
        max_grad_norm: tune_raw.max_grad_norm.unwrap_or(1.0),
        mask,
        seed: derive_seed(seed, "tune"),
    };
    if tune.learning_rate <= 0.0 {
        violations.push(format!(
            "tune.learning_rate must be positive, got {}",
            tune.learning_rate
        ));
    }
    if tune.epochs == 0 {
        violations.push("tune.epochs must be at least 1".to_string());
    }
    if tune.batch_size == 0 {
        violations.push("tune.batch_size must be at least 1".to_string());
    }

    let ft_raw = raw.finetune.unwrap_or_default();
    let finetune_init = match ft_raw.init.as_deref().unwrap_or("tuned") {
        "tuned" => TowerInit::Tuned,
        "fresh" => TowerInit::Fresh,
        other => {
            violations.push(format!(
                "finetune.init must be \"tuned\" or \"fresh\", got {other:?}"
            ));
            TowerInit::Tuned
        }
    };
    let finetune = FinetuneConfig {
        epochs: ft_raw.epochs.unwrap_or(40),
        learning_rate: ft_raw.learning_rate.unwrap_or(2e-5),
        batch_size: ft_raw.batch_size.unwrap_or(32),
        negatives_per_query: ft_raw.negatives_per_query.unwrap_or(1),
        warmup_steps: ft_raw.warmup_steps.unwrap_or(100),
        weight_decay: ft_raw.weight_decay.unwrap_or(0.01),
        adam_betas: ft_raw
            .adam_betas
            .map(|b| (b[0], b[1]))
            .unwrap_or((0.9, 0.999)),
        adam_epsilon: ft_raw.adam_epsilon.unwrap_or(1e-8),
        max_grad_norm: ft_raw.max_grad_norm.unwrap_or(1.0),
        seed: derive_seed(seed, "finetune"),
    };
    if finetune.epochs == 0 {
        violations.push("finetune.epochs must be at least 1".to_string());
    }
    if finetune.learning_rate <= 0.0 {
        violations.push(format!(
            "finetune.learning_rate must be positive, got {}",
            finetune.learning_rate
        ));
    }

    let eval_raw = raw.eval.unwrap_or_default();
    let relevance = match eval_raw.relevance.as_deref().unwrap_or("labeled_positive") {
        "labeled_positive" => RelevanceMode::LabeledPositive,
        "answer_string" => RelevanceMode::AnswerString,
        other => {
            violations.push(format!(
                "eval.relevance must be \"labeled_positive\" or \"answer_string\", got {other:?}"
            ));
            RelevanceMode::LabeledPositive
        }
    };
    let eval = EvalSettings {
        k: eval_raw.k.unwrap_or(100),
        hits_cutoffs: eval_raw
            .hits_cutoffs
            .unwrap_or_else(|| vec![1, 5, 20, 50, 100]),
        mrr_cutoffs: eval_raw.mrr_cutoffs.unwrap_or_else(|| vec![10, 100]),
        relevance,
    };
    if eval.k == 0 {
        violations.push("eval.k must be at least 1".to_string());
    }
    if eval.hits_cutoffs.is_empty() {
        violations.push("eval.hits_cutoffs must not be empty".to_string());
    }

    let an_raw = raw.analyze.unwrap_or_default();
    let analyze = AnalyzeSettings {
        scorer: an_raw.scorer.unwrap_or_else(|| "lexical".to_string()),
        irrelevant_fraction: an_raw.irrelevant_fraction.unwrap_or(0.2),
        write_csv: an_raw.write_csv.unwrap_or(false),
    };
    if analyze.scorer != "lexical" && !analyze.scorer.starts_with("command:") {
        violations.push(format!(
            "analyze.scorer must be \"lexical\" or \"command:<cmd>\", got {:?}",
            analyze.scorer
        ));
    }
    if !(0.0..1.0).contains(&analyze.irrelevant_fraction) {
        violations.push(format!(
            "analyze.irrelevant_fraction must lie in [0,1), got {}",
            analyze.irrelevant_fraction
        ));
    }

    PipelineConfig {
        seed,
        paths,
        encoder,
        prompt_strategy,
        tune,
        finetune,
        finetune_init,
        eval,
        analyze,
        source_path,
    }
}

/// Parse, override, default, and validate a config file. Violations are
/// collected and reported together, never one at a time.
pub fn validate_config(path: &Path) -> Result<PipelineConfig> {
    validate_config_with_env(path, std::env::vars())
}

/// [`validate_config`] with an explicit environment (testable).
pub fn validate_config_with_env(
    path: &Path,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<PipelineConfig> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut tree: toml::Value =
        text.parse()
            .map_err(|e: toml::de::Error| Error::ConfigInvalid {
                violations: vec![format!("{display}: {e}")],
            })?;

    let mut violations = Vec::new();
    if let Err(v) = apply_env_overrides(&mut tree, vars) {
        violations.push(v);
    }
    let raw: RawConfig = match tree.try_into() {
        Ok(raw) => raw,
        Err(e) => {
            violations.push(format!("{display}: {e}"));
            RawConfig::default()
        }
    };
    let config_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let config = resolve(raw, &config_dir, Some(path.to_path_buf()), &mut violations);

    // Referenced dataset paths must resolve at validation time.
    let mut check_path = |label: &str, p: &Path| {
        if !p.as_os_str().is_empty() && !p.exists() {
            violations.push(format!("{label} does not exist: {}", p.display()));
        }
    };
    check_path("paths.qa_train", &config.paths.qa_train);
    if let Some(p) = &config.paths.qa_test {
        check_path("paths.qa_test", p);
    }
    if let Some(p) = &config.paths.nli {
        check_path("paths.nli", p);
    }
    if let Some(p) = &config.paths.corpus {
        check_path("paths.corpus", p);
    }
    if let Some(p) = &config.paths.vocab {
        check_path("paths.vocab", p);
    }

    if violations.is_empty() {
        Ok(config)
    } else {
        Err(Error::ConfigInvalid { violations })
    }
}

/// Hash of the resolved config with the output location excluded: the run
/// identity is the experiment, not where it lands on disk.
pub fn config_hash(config: &PipelineConfig) -> String {
    let mut value = serde_json::to_value(config).expect("config serializes");
    if let Some(paths) = value.get_mut("paths").and_then(|p| p.as_object_mut()) {
        paths.remove("output_dir");
    }
    let canonical = serde_json::to_string(&value).expect("value serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// A produced or consumed file with its content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// One executed stage in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Equivalent single-stage CLI invocation.
    pub command: String,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

/// Lineage of a pipeline run: config snapshot plus every stage's input and
/// output hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(&display, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn artifact(path: &Path) -> Result<Artifact> {
    Ok(Artifact {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Removes the run lock on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<RunLock> {
        let path = run_dir.join("lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::RunLocked {
                path: run_dir.display().to_string(),
            }),
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct RunContext<'c> {
    config: &'c PipelineConfig,
    run_dir: PathBuf,
}

impl RunContext<'_> {
    fn artifact_path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    /// An input produced by an earlier stage: must exist, else the error
    /// names the producer and the missing file.
    fn require(&self, stage: Stage, producer: &str, path: &Path) -> Result<PathBuf> {
        if path.exists() {
            Ok(path.to_path_buf())
        } else {
            Err(Error::MissingArtifact {
                stage: stage.name().to_string(),
                producer: producer.to_string(),
                path: path.display().to_string(),
            })
        }
    }

    fn require_config_path(
        &self,
        stage: Stage,
        label: &str,
        path: Option<&PathBuf>,
    ) -> Result<PathBuf> {
        match path {
            Some(p) if p.exists() => Ok(p.clone()),
            Some(p) => Err(Error::MissingArtifact {
                stage: stage.name().to_string(),
                producer: "(config paths)".to_string(),
                path: p.display().to_string(),
            }),
            None => Err(Error::MissingArtifact {
                stage: stage.name().to_string(),
                producer: "(config paths)".to_string(),
                path: format!("paths.{label} (not configured)"),
            }),
        }
    }
}

const CLAIMS_FILE: &str = "claims.jsonl";
const PAIRS_FILE: &str = "pairs.jsonl";
const PROMPTED_FILE: &str = "prompted.jsonl";
const VOCAB_FILE: &str = "vocab.txt";
const INSTANCES_FILE: &str = "instances.jsonl";
const ENCODER_CKPT: &str = "encoder.ckpt";
const TUNE_LOG: &str = "tune_log.jsonl";
const QUERY_CKPT: &str = "query_tower.ckpt";
const PASSAGE_CKPT: &str = "passage_tower.ckpt";
const FINETUNE_LOG: &str = "finetune_log.jsonl";
const EMBEDDINGS_FILE: &str = "embeddings.bin";
const RESULTS_FILE: &str = "results.jsonl";
const EVAL_REPORT: &str = "eval_report.json";
const NLI_SEPARATION: &str = "nli_separation.json";
const RETRIEVER_SEPARATION: &str = "retriever_separation.json";

/// A claims-file record: question, routed category, claim text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub question: String,
    pub category: crate::claim::QuestionCategory,
    pub claim: String,
}

/// Log line format for training traces: `{"step": …, "loss": …}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLine {
    pub step: usize,
    pub loss: f64,
}

fn write_step_log(path: &Path, log: &crate::trainer::TrainLog) -> Result<()> {
    let lines: Vec<StepLine> = log
        .steps
        .iter()
        .map(|s| StepLine {
            step: s.step,
            loss: s.loss,
        })
        .collect();
    save_jsonl(path, &lines)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let display = path.display().to_string();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Pipeline(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(&display, e))
}

/// Deterministic vocabulary over every configured dataset file: identical
/// across pipeline variants that share the same data.
fn build_vocab(config: &PipelineConfig) -> Result<Tokenizer> {
    if let Some(vocab_path) = &config.paths.vocab {
        return Tokenizer::from_vocab_file(vocab_path);
    }
    let mut texts: Vec<String> = Vec::new();
    let mut add_qa = |path: &Path| -> Result<()> {
        for example in load_qa_dataset(path)? {
            let claim = crate::claim::question_to_claim(&example.question);
            texts.push(example.question.clone());
            texts.push(claim.text);
            for p in example
                .positive_passages
                .iter()
                .chain(&example.negative_passages)
            {
                texts.push(p.body.clone());
            }
        }
        Ok(())
    };
    add_qa(&config.paths.qa_train)?;
    if let Some(qa_test) = &config.paths.qa_test {
        add_qa(qa_test)?;
    }
    if let Some(nli) = &config.paths.nli {
        for example in load_nli_dataset(nli)? {
            texts.push(example.premise);
            texts.push(example.hypothesis);
        }
    }
    if let Some(corpus) = &config.paths.corpus {
        for passage in load_corpus(corpus)?.passages {
            texts.push(passage.body);
        }
    }
    texts.push(crate::prompt::CONNECTIVE.trim().to_string());
    Tokenizer::build_from_texts(
        texts.iter().map(|s| s.as_str()),
        config.encoder.vocab_budget,
    )
}

fn encoder_config(config: &PipelineConfig, vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        layers: config.encoder.layers,
        hidden: config.encoder.hidden,
        heads: config.encoder.heads,
        vocab_size,
        max_len: config.encoder.max_len,
        ff_multiplier: config.encoder.ff_multiplier,
        layer_norm_eps: 1e-5,
    }
}

fn ensure_vocab(ctx: &RunContext<'_>) -> Result<(Tokenizer, PathBuf)> {
    let vocab_path = ctx.artifact_path(VOCAB_FILE);
    if vocab_path.exists() {
        Ok((Tokenizer::from_vocab_file(&vocab_path)?, vocab_path))
    } else {
        let tokenizer = build_vocab(ctx.config)?;
        tokenizer.save_vocab_file(&vocab_path)?;
        Ok((tokenizer, vocab_path))
    }
}

fn stage_transform(ctx: &RunContext<'_>) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let qa_path = ctx.require_config_path(
        Stage::Transform,
        "qa_train",
        Some(&ctx.config.paths.qa_train),
    )?;
    let examples = load_qa_dataset(&qa_path)?;
    let records: Vec<ClaimRecord> = examples
        .iter()
        .map(|e| {
            let claim = crate::claim::question_to_claim(&e.question);
            ClaimRecord {
                question: e.question.clone(),
                category: claim.category,
                claim: claim.text,
            }
        })
        .collect();
    let out = ctx.artifact_path(CLAIMS_FILE);
    save_jsonl(&out, &records)?;
    Ok((vec![qa_path], vec![out]))
}

fn stage_assemble(ctx: &RunContext<'_>) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let qa_path = ctx.require_config_path(
        Stage::Assemble,
        "qa_train",
        Some(&ctx.config.paths.qa_train),
    )?;
    let claims_path = ctx.require(
        Stage::Assemble,
        "transform",
        &ctx.artifact_path(CLAIMS_FILE),
    )?;
    let mut inputs = vec![qa_path.clone(), claims_path];

    let qa_hypothesis = match ctx.config.prompt_strategy {
        PromptStrategy::Prompt => QaHypothesis::Claim,
        // The concat ablation pairs the passage with the raw question.
        PromptStrategy::Concat => QaHypothesis::RawQuestion,
    };
    let mut pairs: Vec<EntailmentPair> = Vec::new();
    for example in load_qa_dataset(&qa_path)? {
        pairs.extend(unify_with_hypothesis(
            &TrainingExample::Qa(example),
            qa_hypothesis,
        ));
    }
    if let Some(nli_path) = &ctx.config.paths.nli {
        let nli_path = ctx.require_config_path(Stage::Assemble, "nli", Some(nli_path))?;
        for example in load_nli_dataset(&nli_path)? {
            pairs.extend(unify_with_hypothesis(
                &TrainingExample::Nli(example),
                qa_hypothesis,
            ));
        }
        inputs.push(nli_path);
    }

    let pairs_path = ctx.artifact_path(PAIRS_FILE);
    save_jsonl(&pairs_path, &pairs)?;
    let prompted: Vec<crate::prompt::PromptedText> = pairs
        .iter()
        .map(|p| crate::prompt::assemble_with(p, ctx.config.prompt_strategy))
        .collect::<Result<_>>()?;
    let prompted_path = ctx.artifact_path(PROMPTED_FILE);
    save_jsonl(&prompted_path, &prompted)?;
    Ok((inputs, vec![pairs_path, prompted_path]))
}

fn stage_tune(ctx: &RunContext<'_>) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let pairs_path = ctx.require(Stage::Tune, "assemble", &ctx.artifact_path(PAIRS_FILE))?;
    let pairs = load_pairs(&pairs_path)?;
    let (tokenizer, vocab_path) = ensure_vocab(ctx)?;
    let mut model: EncoderModel<DefaultScalar> = EncoderModel::new(
        encoder_config(ctx.config, tokenizer.vocab_size()),
        derive_seed(ctx.config.seed, "encoder-init"),
    )?;
    // The exact masked instances the loop trains on, for debugging.
    let (instances, _) = crate::trainer::prepare_instances(
        &pairs,
        &tokenizer,
        ctx.config.prompt_strategy,
        ctx.config.encoder.max_len,
        &ctx.config.tune.mask,
    )?;
    let instances_path = ctx.artifact_path(INSTANCES_FILE);
    save_jsonl(&instances_path, &instances)?;
    let log = entailment_tune(
        &mut model,
        &tokenizer,
        &pairs,
        ctx.config.prompt_strategy,
        &ctx.config.tune,
    )?;
    let ckpt_path = ctx.artifact_path(ENCODER_CKPT);
    model.save(&ckpt_path)?;
    let log_path = ctx.artifact_path(TUNE_LOG);
    write_step_log(&log_path, &log)?;
    Ok((
        vec![pairs_path],
        vec![vocab_path, instances_path, ckpt_path, log_path],
    ))
}

fn stage_finetune(ctx: &RunContext<'_>) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let qa_path = ctx.require_config_path(
        Stage::Finetune,
        "qa_train",
        Some(&ctx.config.paths.qa_train),
    )?;
    let data = load_qa_dataset(&qa_path)?;
    let (tokenizer, vocab_path) = ensure_vocab(ctx)?;
    let mut inputs = vec![qa_path];
    let model: EncoderModel<DefaultScalar> = match ctx.config.finetune_init {
        TowerInit::Tuned => {
            let ckpt = ctx.require(Stage::Finetune, "tune", &ctx.artifact_path(ENCODER_CKPT))?;
            inputs.push(ckpt.clone());
            EncoderModel::load(&ckpt)?
        }
        TowerInit::Fresh => EncoderModel::new(
            encoder_config(ctx.config, tokenizer.vocab_size()),
            derive_seed(ctx.config.seed, "encoder-init"),
        )?,
    };
    let (retriever, log) = finetune(&model, &tokenizer, &data, &ctx.config.finetune)?;
    let query_path = ctx.artifact_path(QUERY_CKPT);
    let passage_path = ctx.artifact_path(PASSAGE_CKPT);
    retriever.query_encoder.save(&query_path)?;
    retriever.passage_encoder.save(&passage_path)?;
    let log_path = ctx.artifact_path(FINETUNE_LOG);
    write_step_log(&log_path, &log)?;
    Ok((inputs, vec![vocab_path, query_path, passage_path, log_path]))
}

fn stage_index(ctx: &RunContext<'_>) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let corpus_path =
        ctx.require_config_path(Stage::Index, "corpus", ctx.config.paths.corpus.as_ref())?;
    let passage_ckpt = ctx.require(Stage::Index, "finetune", &ctx.artifact_path(PASSAGE_CKPT))?;
    let (tokenizer, _) = ensure_vocab(ctx)?;
    let corpus = load_corpus(&corpus_path)?;
    let encoder: EncoderModel<DefaultScalar> = EncoderModel::load(&passage_ckpt)?;
    let matrix = encode_corpus(&encoder, &tokenizer, &corpus, 8)?;
    let out = ctx.artifact_path(EMBEDDINGS_FILE);
    write_embeddings(&out, &matrix)?;
    Ok((vec![corpus_path, passage_ckpt], vec![out]))
}

fn stage_search(ctx: &RunContext<'_>) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let qa_test =
        ctx.require_config_path(Stage::Search, "qa_test", ctx.config.paths.qa_test.as_ref())?;
    let embeddings_path =
        ctx.require(Stage::Search, "index", &ctx.artifact_path(EMBEDDINGS_FILE))?;
    let query_ckpt = ctx.require(Stage::Search, "finetune", &ctx.artifact_path(QUERY_CKPT))?;
    let (tokenizer, _) = ensure_vocab(ctx)?;
    let queries = load_qa_dataset(&qa_test)?;
    let index = read_embeddings::<DefaultScalar>(&embeddings_path)?;
    let encoder: EncoderModel<DefaultScalar> = EncoderModel::load(&query_ckpt)?;
    let results = results_for_queries(&encoder, &tokenizer, &queries, &index, ctx.config.eval.k)?;
    let out = ctx.artifact_path(RESULTS_FILE);
    save_jsonl(&out, &results)?;
    Ok((vec![qa_test, embeddings_path, query_ckpt], vec![out]))
}

fn stage_eval(ctx: &RunContext<'_>) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let qa_test =
        ctx.require_config_path(Stage::Eval, "qa_test", ctx.config.paths.qa_test.as_ref())?;
    let results_path = ctx.require(Stage::Eval, "search", &ctx.artifact_path(RESULTS_FILE))?;
    let queries = load_qa_dataset(&qa_test)?;
    let text = fs::read_to_string(&results_path)
        .map_err(|e| Error::io(results_path.display().to_string(), e))?;
    let results: Vec<SearchResult> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Pipeline(e.to_string())))
        .collect::<Result<_>>()?;
    let mut inputs = vec![qa_test, results_path];
    let relevant = match ctx.config.eval.relevance {
        RelevanceMode::LabeledPositive => relevance_from_labels(&queries)?,
        RelevanceMode::AnswerString => {
            let corpus_path =
                ctx.require_config_path(Stage::Eval, "corpus", ctx.config.paths.corpus.as_ref())?;
            let corpus = load_corpus(&corpus_path)?;
            inputs.push(corpus_path);
            relevance_from_answers(&queries, &corpus)?
        }
    };
    let report = evaluate(
        &results,
        &relevant,
        &ctx.config.eval.hits_cutoffs,
        &ctx.config.eval.mrr_cutoffs,
        ctx.config.eval.relevance,
    )?;
    let out = ctx.artifact_path(EVAL_REPORT);
    write_json(&out, &report)?;
    Ok((inputs, vec![out]))
}

fn stage_analyze(ctx: &RunContext<'_>) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let qa_path = match &ctx.config.paths.qa_test {
        Some(p) => ctx.require_config_path(Stage::Analyze, "qa_test", Some(p))?,
        None => {
            ctx.require_config_path(Stage::Analyze, "qa_train", Some(&ctx.config.paths.qa_train))?
        }
    };
    let examples = load_qa_dataset(&qa_path)?;
    let mut inputs = vec![qa_path];
    let mut outputs = Vec::new();

    let scorer: Box<dyn NliScorer> =
        if let Some(cmd) = ctx.config.analyze.scorer.strip_prefix("command:") {
            Box::new(CommandNliScorer {
                command: cmd.to_string(),
            })
        } else {
            Box::new(LexicalOverlapScorer)
        };
    let nli_report = nli_separation_study(scorer.as_ref(), &examples)?;
    let nli_out = ctx.artifact_path(NLI_SEPARATION);
    write_json(&nli_out, &nli_report)?;
    if ctx.config.analyze.write_csv {
        let csv = ctx.artifact_path("nli_separation_scores.csv");
        write_scores_csv(&nli_report, &csv)?;
        outputs.push(csv);
    }
    outputs.insert(0, nli_out);

    // Retriever study needs the towers, NLI neutral premises, and a
    // held-out corpus partition for irrelevant premises.
    let nli_path = ctx.require_config_path(Stage::Analyze, "nli", ctx.config.paths.nli.as_ref())?;
    let corpus_path =
        ctx.require_config_path(Stage::Analyze, "corpus", ctx.config.paths.corpus.as_ref())?;
    let query_ckpt = ctx.require(Stage::Analyze, "finetune", &ctx.artifact_path(QUERY_CKPT))?;
    let passage_ckpt = ctx.require(Stage::Analyze, "finetune", &ctx.artifact_path(PASSAGE_CKPT))?;
    inputs.extend([
        nli_path.clone(),
        corpus_path.clone(),
        query_ckpt.clone(),
        passage_ckpt.clone(),
    ]);

    let neutral_premises: Vec<String> = load_nli_dataset(&nli_path)?
        .into_iter()
        .filter(|e| e.label == NliLabel::Neutral)
        .map(|e| e.premise)
        .collect();
    let corpus = load_corpus(&corpus_path)?;
    let partition_start =
        ((1.0 - ctx.config.analyze.irrelevant_fraction) * corpus.passages.len() as f64) as usize;
    let irrelevant_pool =
        &corpus.passages[partition_start.min(corpus.passages.len().saturating_sub(1))..];
    let triples = build_relation_triples(
        &examples,
        &neutral_premises,
        irrelevant_pool,
        derive_seed(ctx.config.seed, "analyze-irrelevant"),
    )?;
    let (tokenizer, _) = ensure_vocab(ctx)?;
    let query_encoder: EncoderModel<DefaultScalar> = EncoderModel::load(&query_ckpt)?;
    let passage_encoder: EncoderModel<DefaultScalar> = EncoderModel::load(&passage_ckpt)?;
    let retriever_report = retriever_separation_study(
        &embedder(&query_encoder, &tokenizer),
        &embedder(&passage_encoder, &tokenizer),
        &triples,
    )?;
    let retriever_out = ctx.artifact_path(RETRIEVER_SEPARATION);
    write_json(&retriever_out, &retriever_report)?;
    outputs.push(retriever_out);
    if ctx.config.analyze.write_csv {
        let csv = ctx.artifact_path("retriever_separation_scores.csv");
        write_scores_csv(&retriever_report, &csv)?;
        outputs.push(csv);
    }
    Ok((inputs, outputs))
}

/// Execute the requested stages in dependency order inside the run
/// directory keyed by this config's hash, appending to the manifest.
pub fn run_pipeline(config: &PipelineConfig, stages: &[Stage]) -> Result<RunManifest> {
    if stages.is_empty() {
        return Err(Error::InvalidArgument("no stages requested".to_string()));
    }
    let run_id = config_hash(config);
    let run_dir = config.paths.output_dir.join(&run_id);
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    let _lock = RunLock::acquire(&run_dir)?;

    let manifest_path = run_dir.join("manifest.json");
    let mut manifest = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Pipeline(e.to_string()))?
    } else {
        RunManifest {
            run_id: run_id.clone(),
            config: serde_json::to_value(config).map_err(|e| Error::Pipeline(e.to_string()))?,
            stages: Vec::new(),
        }
    };

    let mut ordered: Vec<Stage> = stages.to_vec();
    ordered.sort();
    let requested: BTreeSet<Stage> = ordered.iter().copied().collect();
    let ordered: Vec<Stage> = Stage::ALL
        .iter()
        .copied()
        .filter(|s| requested.contains(s))
        .collect();

    let ctx = RunContext { config, run_dir };
    let config_display = config
        .source_path
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "<config>".to_string());

    for stage in ordered {
        let started = now_ms();
        let (input_paths, output_paths) = match stage {
            Stage::Transform => stage_transform(&ctx)?,
            Stage::Assemble => stage_assemble(&ctx)?,
            Stage::Tune => stage_tune(&ctx)?,
            Stage::Finetune => stage_finetune(&ctx)?,
            Stage::Index => stage_index(&ctx)?,
            Stage::Search => stage_search(&ctx)?,
            Stage::Eval => stage_eval(&ctx)?,
            Stage::Analyze => stage_analyze(&ctx)?,
        };
        let inputs = input_paths
            .iter()
            .map(|p| artifact(p))
            .collect::<Result<Vec<_>>>()?;
        let outputs = output_paths
            .iter()
            .map(|p| artifact(p))
            .collect::<Result<Vec<_>>>()?;
        manifest.stages.push(StageRecord {
            stage: stage.name().to_string(),
            command: format!(
                "enttune run --config {config_display} --stages {}",
                stage.name()
            ),
            inputs,
            outputs,
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
        });
        write_json(&manifest_path, &manifest)?;
    }
    Ok(manifest)
}
