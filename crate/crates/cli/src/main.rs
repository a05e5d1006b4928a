//! `enttune` — train and evaluate an entailment-tuned dense retriever.
//!
//! Subcommands mirror the pipeline stages (`transform`, `assemble`, `tune`,
//! `finetune`, `index`, `search`, `eval`, `analyze`) plus the composite
//! `run` driven by a TOML config. Failures exit nonzero with one JSON
//! object on stderr: `{"error": {"kind": …, "message": …}}`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use enttune_core::analysis::{
    build_relation_triples, embedder, nli_separation_study, retriever_separation_study,
    write_scores_csv, CommandNliScorer, LexicalOverlapScorer, NliScorer,
};
use enttune_core::claim::question_to_claim;
use enttune_core::contrastive::{finetune, FinetuneConfig};
use enttune_core::data::{load_corpus, load_nli_dataset, load_qa_dataset, save_jsonl, NliLabel};
use enttune_core::encoder::{EncoderConfig, EncoderModel};
use enttune_core::masking::{MaskConfig, MaskScope};
use enttune_core::pipeline::{run_pipeline, validate_config, ClaimRecord, Stage, StepLine};
use enttune_core::prompt::{assemble_with, load_pairs, PromptStrategy};
use enttune_core::retrieval::{
    encode_corpus, evaluate, read_embeddings, relevance_from_answers, relevance_from_labels,
    results_for_queries, write_embeddings, RelevanceMode,
};
use enttune_core::tokenizer::Tokenizer;
use enttune_core::trainer::{entailment_tune_with_snapshots, TuneConfig};
use enttune_core::{derive_seed, DefaultScalar, Error, Result};

#[derive(Parser)]
#[command(
    name = "enttune",
    version,
    about = "Entailment-tuned dense retrieval pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Prompt,
    Concat,
}

impl From<StrategyArg> for PromptStrategy {
    fn from(value: StrategyArg) -> Self {
        match value {
            StrategyArg::Prompt => PromptStrategy::Prompt,
            StrategyArg::Concat => PromptStrategy::Concat,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    HypothesisOnly,
    FullPrompt,
}

#[derive(Clone, Copy, ValueEnum)]
enum RelevanceArg {
    LabeledPositive,
    AnswerString,
}

#[derive(Args)]
struct EncoderArgs {
    /// Transformer layers.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Hidden dimension.
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Maximum sequence length in tokens.
    #[arg(long, default_value_t = 256)]
    max_len: usize,
}

impl EncoderArgs {
    fn config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            vocab_size,
            max_len: self.max_len,
            ff_multiplier: 4,
            layer_norm_eps: 1e-5,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite questions into existence claims.
    Transform {
        /// QA JSON-lines input.
        #[arg(long)]
        input: PathBuf,
        /// Claims JSON-lines output ({question, category, claim}).
        #[arg(long)]
        output: PathBuf,
    },
    /// Place entailment pairs into the unified prompt (or the [SEP] concat).
    Assemble {
        /// EntailmentPair JSON-lines input.
        #[arg(long)]
        pairs: PathBuf,
        /// PromptedText JSON-lines output.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "prompt")]
        strategy: StrategyArg,
    },
    /// Entailment-tune an encoder with masked hypothesis prediction.
    Tune {
        /// EntailmentPair JSON-lines input.
        #[arg(long)]
        pairs: PathBuf,
        /// Directory for encoder.ckpt, vocab.txt, and tune_log.jsonl.
        #[arg(long)]
        output_dir: PathBuf,
        /// Vocabulary file (one token per line); built from the pairs when
        /// omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Start from an existing checkpoint instead of a fresh model.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "prompt")]
        strategy: StrategyArg,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[arg(long, default_value_t = 2e-5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 100)]
        warmup_steps: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0.9)]
        adam_beta1: f64,
        #[arg(long, default_value_t = 0.999)]
        adam_beta2: f64,
        #[arg(long, default_value_t = 1e-8)]
        adam_epsilon: f64,
        #[arg(long, default_value_t = 1.0)]
        max_grad_norm: f64,
        /// Masking probability over the scoped tokens.
        #[arg(long, default_value_t = 0.8)]
        beta: f64,
        #[arg(long, value_enum, default_value = "hypothesis-only")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Also write encoder.epoch-N.ckpt after every epoch.
        #[arg(long)]
        save_every_epoch: bool,
    },
    /// Contrastively fine-tune into query/passage towers.
    Finetune {
        /// QA JSON-lines training data.
        #[arg(long)]
        qa: PathBuf,
        /// Encoder checkpoint to clone the towers from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Directory for query_tower.ckpt, passage_tower.ckpt, and the log.
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-5)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1)]
        negatives_per_query: usize,
        #[arg(long, default_value_t = 100)]
        warmup_steps: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Encode a corpus into an embedding file.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        /// Passage-tower checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
    },
    /// Top-k search over an embedding file.
    Search {
        /// Embedding file produced by `index`.
        #[arg(long)]
        index: PathBuf,
        /// Query-tower checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// QA JSON-lines whose questions are the queries.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// SearchResult JSON-lines output.
        #[arg(long)]
        output: PathBuf,
    },
    /// Compute hits@k and MRR@N from search results.
    Eval {
        /// SearchResult JSON-lines from `search`.
        #[arg(long)]
        results: PathBuf,
        /// QA JSON-lines the queries came from.
        #[arg(long)]
        queries: PathBuf,
        /// EvalReport JSON output.
        #[arg(long)]
        output: PathBuf,
        /// Corpus file (required for answer_string relevance).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "labeled-positive")]
        relevance: RelevanceArg,
        #[arg(long, value_delimiter = ',', default_value = "1,5,20,50,100")]
        hits_cutoffs: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "10,100")]
        mrr_cutoffs: Vec<usize>,
    },
    /// Entailment-probability or retriever-score separation studies.
    Analyze {
        #[command(subcommand)]
        study: AnalyzeCommand,
    },
    /// Run pipeline stages from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of
        /// transform,assemble,tune,finetune,index,search,eval,analyze;
        /// all stages when omitted.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Entailment-probability separation between positive and negative
    /// passages.
    Nli {
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `lexical` or `command:<shell command>`.
        #[arg(long, default_value = "lexical")]
        scorer: String,
        /// Also write raw scores as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Retriever-score separation across entail/neutral/irrelevant premises.
    Retriever {
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        nli: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        query_checkpoint: PathBuf,
        #[arg(long)]
        passage_checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Fraction of the corpus tail used as the irrelevant pool.
        #[arg(long, default_value_t = 0.2)]
        irrelevant_fraction: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn write_json_file<T: serde::Serialize>(path: &PathBuf, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Pipeline(e.to_string()))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Error::Pipeline(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Transform { input, output } => {
            let examples = load_qa_dataset(&input)?;
            let records: Vec<ClaimRecord> = examples
                .iter()
                .map(|e| {
                    let claim = question_to_claim(&e.question);
                    ClaimRecord {
                        question: e.question.clone(),
                        category: claim.category,
                        claim: claim.text,
                    }
                })
                .collect();
            save_jsonl(&output, &records)?;
            println!("wrote {} claims to {}", records.len(), output.display());
        }
        Command::Assemble {
            pairs,
            output,
            strategy,
        } => {
            let pairs = load_pairs(&pairs)?;
            let prompted = pairs
                .iter()
                .map(|p| assemble_with(p, strategy.into()))
                .collect::<Result<Vec<_>>>()?;
            save_jsonl(&output, &prompted)?;
            println!("wrote {} prompts to {}", prompted.len(), output.display());
        }
        Command::Tune {
            pairs,
            output_dir,
            vocab,
            init_checkpoint,
            strategy,
            encoder,
            learning_rate,
            warmup_steps,
            batch_size,
            epochs,
            weight_decay,
            adam_beta1,
            adam_beta2,
            adam_epsilon,
            max_grad_norm,
            beta,
            scope,
            seed,
            save_every_epoch,
        } => {
            std::fs::create_dir_all(&output_dir)
                .map_err(|e| Error::Pipeline(format!("{}: {e}", output_dir.display())))?;
            let pairs = load_pairs(&pairs)?;
            let tokenizer = match &vocab {
                Some(path) => Tokenizer::from_vocab_file(path)?,
                None => {
                    let texts: Vec<String> = pairs
                        .iter()
                        .flat_map(|p| {
                            [
                                p.premise.clone(),
                                p.hypothesis.clone(),
                                enttune_core::prompt::CONNECTIVE.trim().to_string(),
                            ]
                        })
                        .collect();
                    Tokenizer::build_from_texts(texts.iter().map(|s| s.as_str()), 30_000)?
                }
            };
            let mut model: EncoderModel<DefaultScalar> = match init_checkpoint {
                Some(path) => EncoderModel::load(&path)?,
                None => EncoderModel::new(
                    encoder.config(tokenizer.vocab_size()),
                    derive_seed(seed, "encoder-init"),
                )?,
            };
            let config = TuneConfig {
                learning_rate,
                warmup_steps,
                batch_size,
                epochs,
                weight_decay,
                adam_betas: (adam_beta1, adam_beta2),
                adam_epsilon,
                max_grad_norm,
                mask: MaskConfig {
                    beta,
                    scope: match scope {
                        ScopeArg::HypothesisOnly => MaskScope::HypothesisOnly,
                        ScopeArg::FullPrompt => MaskScope::FullPrompt,
                    },
                    seed: derive_seed(seed, "mask"),
                },
                seed: derive_seed(seed, "tune"),
            };
            let snapshots = save_every_epoch.then_some(output_dir.as_path());
            let log = entailment_tune_with_snapshots(
                &mut model,
                &tokenizer,
                &pairs,
                strategy.into(),
                &config,
                snapshots,
            )?;
            tokenizer.save_vocab_file(&output_dir.join("vocab.txt"))?;
            model.save(&output_dir.join("encoder.ckpt"))?;
            let lines: Vec<StepLine> = log
                .steps
                .iter()
                .map(|s| StepLine {
                    step: s.step,
                    loss: s.loss,
                })
                .collect();
            save_jsonl(&output_dir.join("tune_log.jsonl"), &lines)?;
            println!(
                "tuned {} epochs over {} pairs; final epoch mean loss {:.4}",
                epochs,
                pairs.len(),
                log.epoch_mean_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Finetune {
            qa,
            checkpoint,
            vocab,
            output_dir,
            epochs,
            learning_rate,
            batch_size,
            negatives_per_query,
            warmup_steps,
            seed,
        } => {
            std::fs::create_dir_all(&output_dir)
                .map_err(|e| Error::Pipeline(format!("{}: {e}", output_dir.display())))?;
            let data = load_qa_dataset(&qa)?;
            let tokenizer = Tokenizer::from_vocab_file(&vocab)?;
            let model: EncoderModel<DefaultScalar> = EncoderModel::load(&checkpoint)?;
            let config = FinetuneConfig {
                epochs,
                learning_rate,
                batch_size,
                negatives_per_query,
                warmup_steps,
                seed: derive_seed(seed, "finetune"),
                ..FinetuneConfig::default()
            };
            let (retriever, log) = finetune(&model, &tokenizer, &data, &config)?;
            retriever
                .query_encoder
                .save(&output_dir.join("query_tower.ckpt"))?;
            retriever
                .passage_encoder
                .save(&output_dir.join("passage_tower.ckpt"))?;
            let lines: Vec<StepLine> = log
                .steps
                .iter()
                .map(|s| StepLine {
                    step: s.step,
                    loss: s.loss,
                })
                .collect();
            save_jsonl(&output_dir.join("finetune_log.jsonl"), &lines)?;
            println!(
                "fine-tuned towers over {} examples ({} steps)",
                data.len(),
                log.steps.len()
            );
        }
        Command::Index {
            corpus,
            checkpoint,
            vocab,
            output,
            batch_size,
        } => {
            let corpus = load_corpus(&corpus)?;
            let tokenizer = Tokenizer::from_vocab_file(&vocab)?;
            let encoder: EncoderModel<DefaultScalar> = EncoderModel::load(&checkpoint)?;
            let matrix = encode_corpus(&encoder, &tokenizer, &corpus, batch_size)?;
            write_embeddings(&output, &matrix)?;
            println!(
                "indexed {} passages at dim {} into {}",
                matrix.len(),
                matrix.dim(),
                output.display()
            );
        }
        Command::Search {
            index,
            checkpoint,
            vocab,
            queries,
            k,
            output,
        } => {
            let matrix = read_embeddings::<DefaultScalar>(&index)?;
            let tokenizer = Tokenizer::from_vocab_file(&vocab)?;
            let encoder: EncoderModel<DefaultScalar> = EncoderModel::load(&checkpoint)?;
            let examples = load_qa_dataset(&queries)?;
            let results = results_for_queries(&encoder, &tokenizer, &examples, &matrix, k)?;
            save_jsonl(&output, &results)?;
            println!("searched {} queries (top-{k})", results.len());
        }
        Command::Eval {
            results,
            queries,
            output,
            corpus,
            relevance,
            hits_cutoffs,
            mrr_cutoffs,
        } => {
            let text = std::fs::read_to_string(&results)
                .map_err(|e| Error::Pipeline(format!("{}: {e}", results.display())))?;
            let parsed: Vec<enttune_core::retrieval::SearchResult> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(|e| Error::Pipeline(e.to_string())))
                .collect::<Result<_>>()?;
            let examples = load_qa_dataset(&queries)?;
            let (relevant, mode) = match relevance {
                RelevanceArg::LabeledPositive => (
                    relevance_from_labels(&examples)?,
                    RelevanceMode::LabeledPositive,
                ),
                RelevanceArg::AnswerString => {
                    let corpus_path = corpus.ok_or_else(|| {
                        Error::InvalidArgument(
                            "--corpus is required for answer-string relevance".to_string(),
                        )
                    })?;
                    (
                        relevance_from_answers(&examples, &load_corpus(&corpus_path)?)?,
                        RelevanceMode::AnswerString,
                    )
                }
            };
            let report = evaluate(&parsed, &relevant, &hits_cutoffs, &mrr_cutoffs, mode)?;
            write_json_file(&output, &report)?;
            for (k, v) in &report.hits_at_k {
                println!("hits@{k}: {v:.4}");
            }
            for (n, v) in &report.mrr_at {
                println!("mrr@{n}: {v:.4}");
            }
        }
        Command::Analyze { study } => match study {
            AnalyzeCommand::Nli {
                qa,
                output,
                scorer,
                csv,
            } => {
                let examples = load_qa_dataset(&qa)?;
                let scorer: Box<dyn NliScorer> = match scorer.strip_prefix("command:") {
                    Some(cmd) => Box::new(CommandNliScorer {
                        command: cmd.to_string(),
                    }),
                    None if scorer == "lexical" => Box::new(LexicalOverlapScorer),
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown scorer {scorer:?}; use lexical or command:<cmd>"
                        )))
                    }
                };
                let report = nli_separation_study(scorer.as_ref(), &examples)?;
                write_json_file(&output, &report)?;
                if let Some(csv_path) = csv {
                    write_scores_csv(&report, &csv_path)?;
                }
                for group in &report.groups {
                    println!(
                        "{}: mean {:.4} over {} pairs",
                        group.name,
                        group.mean,
                        group.scores.len()
                    );
                }
            }
            AnalyzeCommand::Retriever {
                qa,
                nli,
                corpus,
                query_checkpoint,
                passage_checkpoint,
                vocab,
                output,
                irrelevant_fraction,
                seed,
                csv,
            } => {
                let examples = load_qa_dataset(&qa)?;
                let neutral: Vec<String> = load_nli_dataset(&nli)?
                    .into_iter()
                    .filter(|e| e.label == NliLabel::Neutral)
                    .map(|e| e.premise)
                    .collect();
                let corpus = load_corpus(&corpus)?;
                let start = ((1.0 - irrelevant_fraction) * corpus.passages.len() as f64) as usize;
                let pool = &corpus.passages[start.min(corpus.passages.len().saturating_sub(1))..];
                let triples = build_relation_triples(
                    &examples,
                    &neutral,
                    pool,
                    derive_seed(seed, "analyze-irrelevant"),
                )?;
                let tokenizer = Tokenizer::from_vocab_file(&vocab)?;
                let query: EncoderModel<DefaultScalar> = EncoderModel::load(&query_checkpoint)?;
                let passage: EncoderModel<DefaultScalar> = EncoderModel::load(&passage_checkpoint)?;
                let report = retriever_separation_study(
                    &embedder(&query, &tokenizer),
                    &embedder(&passage, &tokenizer),
                    &triples,
                )?;
                write_json_file(&output, &report)?;
                if let Some(csv_path) = csv {
                    write_scores_csv(&report, &csv_path)?;
                }
                for group in &report.groups {
                    println!("{}: mean {:.4}", group.name, group.mean);
                }
            }
        },
        Command::Run { config, stages } => {
            let config = validate_config(&config)?;
            let stages = match stages {
                Some(names) => names
                    .iter()
                    .map(|n| n.parse::<Stage>())
                    .collect::<Result<Vec<_>>>()?,
                None => Stage::ALL.to_vec(),
            };
            let manifest = run_pipeline(&config, &stages)?;
            println!(
                "run {} complete: {} stage(s) recorded in manifest",
                manifest.run_id,
                manifest.stages.len()
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        let payload = serde_json::json!({
            "error": {
                "kind": error.kind(),
                "message": error.to_string(),
            }
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
