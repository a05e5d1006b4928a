//! Supervised contrastive fine-tuning into a dual-tower retriever.
//!
//! Both towers start as clones of the (entailment-tuned) encoder and are
//! trained jointly in one merged parameter store. Per batch, each query
//! scores its positive against the other queries' positives (in-batch
//! negatives) plus its own hard negatives; the loss is the softmax
//! cross-entropy of Eq-style NLL over those scores.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::QAExample;
use crate::derive_seed;
use crate::encoder::{clone_parameters, cls_embedding, frame_text, EncoderModel};
use crate::error::{Error, Result};
use crate::math::{ParamStore, RowTarget, Tape};
use crate::optim::{clip_global_norm, warmup_constant_schedule, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tokenizer::Tokenizer;
use crate::trainer::{StepRecord, TrainLog};

/// Inner product of two equal-dimension vectors.
pub fn similarity<S: Scalar>(u: &[S], v: &[S]) -> Result<S> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    Ok(u.iter().zip(v).map(|(&a, &b)| a * b).sum())
}

/// `−log( e^{sim_pos} / (e^{sim_pos} + Σ_j e^{sim_negs_j}) )`, computed
/// with a max-shift for numerical stability. Empty negatives give 0 by the
/// formula's degenerate case.
pub fn nll_contrastive_loss(sim_pos: f64, sim_negs: &[f64]) -> f64 {
    let max = sim_negs.iter().copied().fold(sim_pos, f64::max);
    let denom: f64 = (sim_pos - max).exp() + sim_negs.iter().map(|&s| (s - max).exp()).sum::<f64>();
    -(sim_pos - max - denom.ln())
}

/// Fine-tuning arguments. Optimizer settings mirror the tuning stage; the
/// data-facing knobs default to the desk-scale retriever convention
/// (batch 32, one hard negative per query, 40 epochs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub negatives_per_query: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 40,
            learning_rate: 2e-5,
            batch_size: 32,
            negatives_per_query: 1,
            warmup_steps: 100,
            weight_decay: 0.01,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            max_grad_norm: 1.0,
            seed: 42,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.epochs == 0 {
            violations.push("epochs must be at least 1".to_string());
        }
        if self.learning_rate <= 0.0 {
            violations.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            violations.push("batch_size must be at least 1".to_string());
        }
        if self.max_grad_norm <= 0.0 {
            violations.push(format!(
                "max_grad_norm must be positive, got {}",
                self.max_grad_norm
            ));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid { violations })
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            betas: self.adam_betas,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// Separate query and passage encoders sharing one architecture.
#[derive(Debug, Clone)]
pub struct DualTowerRetriever<S: Scalar> {
    pub query_encoder: EncoderModel<S>,
    pub passage_encoder: EncoderModel<S>,
}

/// Greedy batches of `batch_size` examples with no duplicate question in a
/// batch; duplicates spill into later batches.
fn build_batches(order: &[usize], examples: &[QAExample], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut pending: Vec<usize> = order.to_vec();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut leftover = Vec::new();
        for &idx in pending.iter() {
            if batch.len() >= batch_size {
                leftover.push(idx);
            } else if seen.insert(examples[idx].question.as_str()) {
                batch.push(idx);
            } else {
                leftover.push(idx);
            }
        }
        if batch.is_empty() {
            break;
        }
        batches.push(batch);
        pending = leftover;
    }
    batches
}

/// Contrastively fine-tune `model` into a dual-tower retriever.
///
/// Towers are initialized as clones of the input model and trained jointly.
/// A batch of one query with no hard negatives has a degenerate loss and is
/// skipped (counted in the log).
pub fn finetune<S: Scalar>(
    model: &EncoderModel<S>,
    tokenizer: &Tokenizer,
    data: &[QAExample],
    config: &FinetuneConfig,
) -> Result<(DualTowerRetriever<S>, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyTrainingSet("no training examples".to_string()));
    }
    crate::data::validate_training_examples(data)?;

    let encoder_config = model.config().clone();
    let mut store: ParamStore<S> = ParamStore::new();
    let query_index = clone_parameters(
        model.store(),
        model.index(),
        &encoder_config,
        &mut store,
        "query.",
    );
    let passage_index = clone_parameters(
        model.store(),
        model.index(),
        &encoder_config,
        &mut store,
        "passage.",
    );

    let max_len = encoder_config.max_len;
    let frame = |text: &str| frame_text(tokenizer, text, max_len);

    let mut optimizer = AdamW::new(&store, config.adamw());
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng =
            StdRng::seed_from_u64(derive_seed(config.seed, &format!("finetune-epoch/{epoch}")));
        order.shuffle(&mut rng);

        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0usize;
        for batch in build_batches(&order, data, config.batch_size) {
            let no_hard_negatives = batch.len() == 1 && data[batch[0]].negative_passages.is_empty();
            if no_hard_negatives {
                log.skipped_batches += 1;
                continue;
            }
            step += 1;
            let batch_loss;
            let mut grads = {
                let mut tape = Tape::new(&store);
                // Passage rows: positives first (aligned with queries), then
                // each query's hard negatives.
                let mut passage_rows = Vec::new();
                let mut positive_col = Vec::with_capacity(batch.len());
                for &idx in &batch {
                    let ids = frame(&data[idx].positive_passages[0].body)?;
                    positive_col.push(passage_rows.len());
                    passage_rows.push(cls_embedding(
                        &mut tape,
                        &encoder_config,
                        &passage_index,
                        &ids,
                    )?);
                }
                let mut hard_neg_cols: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
                for &idx in &batch {
                    let mut cols = Vec::new();
                    for negative in data[idx]
                        .negative_passages
                        .iter()
                        .take(config.negatives_per_query)
                    {
                        let ids = frame(&negative.body)?;
                        cols.push(passage_rows.len());
                        passage_rows.push(cls_embedding(
                            &mut tape,
                            &encoder_config,
                            &passage_index,
                            &ids,
                        )?);
                    }
                    hard_neg_cols.push(cols);
                }
                let mut query_rows = Vec::with_capacity(batch.len());
                for &idx in &batch {
                    let ids = frame(&data[idx].question)?;
                    query_rows.push(cls_embedding(
                        &mut tape,
                        &encoder_config,
                        &query_index,
                        &ids,
                    )?);
                }
                let queries = tape.concat_rows(&query_rows);
                let passages = tape.concat_rows(&passage_rows);
                let scores = tape.matmul_nt(queries, passages);

                let targets: Vec<RowTarget> = (0..batch.len())
                    .map(|i| {
                        let mut negatives: Vec<usize> = (0..batch.len())
                            .filter(|&j| j != i)
                            .map(|j| positive_col[j])
                            .collect();
                        negatives.extend(&hard_neg_cols[i]);
                        RowTarget {
                            row: i,
                            positive: positive_col[i],
                            negatives,
                        }
                    })
                    .collect();
                let loss = tape.contrastive_nll(scores, &targets);
                batch_loss = tape.value(loss).get(0, 0).as_f64();
                tape.backward(loss)?
            };
            let (grad_norm, clipped) = clip_global_norm(&mut grads, config.max_grad_norm);
            let lr_scale = warmup_constant_schedule(step, config.warmup_steps);
            optimizer.step(&mut store, &grads, lr_scale);

            log.steps.push(StepRecord {
                step,
                loss: batch_loss,
                grad_norm,
                clipped_grad_norm: clipped,
            });
            epoch_loss_sum += batch_loss;
            epoch_batches += 1;
        }
        if epoch_batches > 0 {
            log.epoch_mean_loss
                .push(epoch_loss_sum / epoch_batches as f64);
        }
        log.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
    }

    // Split the merged store back into standalone towers.
    let split = |index: &crate::encoder::EncoderIndex| -> EncoderModel<S> {
        let mut tower_store = ParamStore::new();
        let tower_index = clone_parameters(&store, index, &encoder_config, &mut tower_store, "");
        EncoderModel::from_parts(encoder_config.clone(), tower_store, tower_index)
    };
    let retriever = DualTowerRetriever {
        query_encoder: split(&query_index),
        passage_encoder: split(&passage_index),
    };
    Ok((retriever, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PassageRecord;
    use crate::encoder::EncoderConfig;

    #[test]
    fn similarity_reference_values() {
        assert_eq!(similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(matches!(
            similarity(&[1.0], &[1.0, 2.0]).unwrap_err(),
            Error::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn contrastive_loss_hand_values() {
        // −ln(e/(e+2)) with sim_pos=1, negs=[0,0].
        let expected = -(1.0f64.exp() / (1.0f64.exp() + 2.0)).ln();
        assert!((nll_contrastive_loss(1.0, &[0.0, 0.0]) - expected).abs() < 1e-12);
        assert!((expected - 0.5514).abs() < 1e-4);

        // sim_pos equal to each of m negatives: ln(m+1).
        for m in 1..6 {
            let negs = vec![0.7; m];
            let loss = nll_contrastive_loss(0.7, &negs);
            assert!((loss - ((m + 1) as f64).ln()).abs() < 1e-12);
        }

        // Empty negatives: 0 by the formula.
        assert_eq!(nll_contrastive_loss(3.5, &[]), 0.0);
    }

    #[test]
    fn contrastive_loss_properties() {
        let negs = [0.3, -0.2, 1.1];
        let base = nll_contrastive_loss(0.5, &negs);
        assert!(base >= 0.0);
        // Monotone: raising the positive lowers the loss, raising a
        // negative raises it.
        assert!(nll_contrastive_loss(0.6, &negs) < base);
        assert!(nll_contrastive_loss(0.5, &[0.4, -0.2, 1.1]) > base);
        // Shift invariance.
        let shifted: Vec<f64> = negs.iter().map(|v| v + 123.456).collect();
        assert!((nll_contrastive_loss(0.5 + 123.456, &shifted) - base).abs() < 1e-9);
    }

    fn passage(id: &str, body: &str) -> PassageRecord {
        PassageRecord {
            id: id.to_string(),
            title: None,
            body: body.to_string(),
            meta: None,
        }
    }

    /// Queries and positives share a rare marker token; negatives do not.
    fn separable_dataset(n: usize) -> Vec<QAExample> {
        let markers = ["falcon", "willow", "ember", "quartz", "cobalt", "maple"];
        (0..n)
            .map(|i| {
                let marker = markers[i % markers.len()];
                let variant = i / markers.len();
                QAExample {
                    question: format!("where is the {marker} hall number {variant}?"),
                    answers: vec![],
                    positive_passages: vec![passage(
                        &format!("pos-{i}"),
                        &format!("the {marker} hall number {variant} stands by the river ."),
                    )],
                    negative_passages: vec![passage(
                        &format!("neg-{i}"),
                        "an unrelated pamphlet discusses tax season paperwork .",
                    )],
                }
            })
            .collect()
    }

    fn build_tokenizer(data: &[QAExample]) -> Tokenizer {
        let mut texts = Vec::new();
        for ex in data {
            texts.push(ex.question.clone());
            for p in ex.positive_passages.iter().chain(&ex.negative_passages) {
                texts.push(p.body.clone());
            }
        }
        Tokenizer::build_from_texts(texts.iter().map(|s| s.as_str()), 500).unwrap()
    }

    #[test]
    fn finetune_separates_positives_from_negatives() {
        let data = separable_dataset(12);
        let (train, held_out) = data.split_at(9);
        let tokenizer = build_tokenizer(&data);
        let model: EncoderModel<f32> =
            EncoderModel::new(EncoderConfig::tiny(tokenizer.vocab_size()), 11).unwrap();
        let config = FinetuneConfig {
            epochs: 12,
            learning_rate: 2e-3,
            batch_size: 3,
            warmup_steps: 4,
            seed: 7,
            ..FinetuneConfig::default()
        };
        let (retriever, log) = finetune(&model, &tokenizer, train, &config).unwrap();
        assert!(!log.steps.is_empty());
        for record in &log.steps {
            assert!(record.clipped_grad_norm <= config.max_grad_norm + 1e-6);
        }

        let mut pos_mean = 0.0;
        let mut neg_mean = 0.0;
        for ex in held_out {
            let q = retriever
                .query_encoder
                .embed(&tokenizer, &ex.question)
                .unwrap();
            let p = retriever
                .passage_encoder
                .embed(&tokenizer, &ex.positive_passages[0].body)
                .unwrap();
            let n = retriever
                .passage_encoder
                .embed(&tokenizer, &ex.negative_passages[0].body)
                .unwrap();
            pos_mean += similarity(&q, &p).unwrap() as f64;
            neg_mean += similarity(&q, &n).unwrap() as f64;
        }
        pos_mean /= held_out.len() as f64;
        neg_mean /= held_out.len() as f64;
        assert!(
            pos_mean > neg_mean,
            "positives not separated: pos {pos_mean} vs neg {neg_mean}"
        );
    }

    #[test]
    fn two_example_batch_gives_each_query_an_in_batch_negative() {
        let data = separable_dataset(2);
        let batches = build_batches(&[0, 1], &data, 2);
        assert_eq!(batches, vec![vec![0, 1]]);
        // With two queries in a batch, each sees the other's positive.
        let tokenizer = build_tokenizer(&data);
        let model: EncoderModel<f32> =
            EncoderModel::new(EncoderConfig::tiny(tokenizer.vocab_size()), 1).unwrap();
        let config = FinetuneConfig {
            epochs: 1,
            batch_size: 2,
            ..FinetuneConfig::default()
        };
        let (_, log) = finetune(&model, &tokenizer, &data, &config).unwrap();
        assert_eq!(log.steps.len(), 1);
        assert_eq!(log.skipped_batches, 0);
    }

    #[test]
    fn duplicate_questions_never_share_a_batch() {
        let mut data = separable_dataset(3);
        data[1].question = data[0].question.clone();
        let batches = build_batches(&[0, 1, 2], &data, 3);
        for batch in &batches {
            let mut questions: Vec<&str> =
                batch.iter().map(|&i| data[i].question.as_str()).collect();
            questions.sort();
            questions.dedup();
            assert_eq!(questions.len(), batch.len());
        }
        let total: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn single_query_without_negatives_skipped() {
        let mut data = separable_dataset(1);
        data[0].negative_passages.clear();
        let tokenizer = build_tokenizer(&data);
        let model: EncoderModel<f32> =
            EncoderModel::new(EncoderConfig::tiny(tokenizer.vocab_size()), 1).unwrap();
        let config = FinetuneConfig {
            epochs: 2,
            batch_size: 4,
            ..FinetuneConfig::default()
        };
        let (_, log) = finetune(&model, &tokenizer, &data, &config).unwrap();
        assert_eq!(log.steps.len(), 0);
        assert_eq!(log.skipped_batches, 2);
    }

    #[test]
    fn finetune_deterministic_for_fixed_seed() {
        let data = separable_dataset(4);
        let tokenizer = build_tokenizer(&data);
        let model: EncoderModel<f32> =
            EncoderModel::new(EncoderConfig::tiny(tokenizer.vocab_size()), 2).unwrap();
        let config = FinetuneConfig {
            epochs: 2,
            learning_rate: 1e-3,
            batch_size: 2,
            seed: 3,
            ..FinetuneConfig::default()
        };
        let run = || finetune(&model, &tokenizer, &data, &config).unwrap().1;
        let (a, b) = (run(), run());
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.epoch_mean_loss, b.epoch_mean_loss);
    }
}
