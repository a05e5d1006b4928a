//! Masked-hypothesis-prediction training loop.
//!
//! Pairs are assembled into prompts, tokenized, and masked once up front;
//! each epoch is one reshuffled pass over the surviving instances. The loss
//! is the negative log-likelihood of the true tokens at the masked
//! positions, averaged over all masked positions in a batch so its scale is
//! invariant to the masking rate and the batch size.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::encoder::{mlm_log_probs, EncoderModel};
use crate::error::{Error, Result};
use crate::masking::{mask_hypothesis, tokenize_with_span, MaskConfig, PromptedInstance};
use crate::math::{Mat, Tape};
use crate::optim::{clip_global_norm, warmup_constant_schedule, AdamW, AdamWConfig};
use crate::prompt::{assemble_with, EntailmentPair, PromptStrategy};
use crate::scalar::Scalar;
use crate::tokenizer::Tokenizer;

/// Training arguments for entailment tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub max_grad_norm: f64,
    pub mask: MaskConfig,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            learning_rate: 2e-5,
            warmup_steps: 100,
            batch_size: 128,
            epochs: 10,
            weight_decay: 0.01,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            max_grad_norm: 1.0,
            mask: MaskConfig::default(),
            seed: 42,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.learning_rate <= 0.0 {
            violations.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            violations.push("batch_size must be at least 1".to_string());
        }
        if self.epochs == 0 {
            violations.push("epochs must be at least 1".to_string());
        }
        if self.weight_decay < 0.0 {
            violations.push(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.max_grad_norm <= 0.0 {
            violations.push(format!(
                "max_grad_norm must be positive, got {}",
                self.max_grad_norm
            ));
        }
        if let Err(e) = self.mask.validate() {
            violations.push(e.to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid { violations })
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            betas: self.adam_betas,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

/// Step- and epoch-level training trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Instances dropped at preparation (did not fit / nothing masked) and
    /// batches skipped as degenerate.
    pub rejected_instances: usize,
    pub skipped_batches: usize,
}

/// Sum of negative log-probabilities of the true token at each masked
/// position. Positions outside `mask_positions` contribute nothing.
pub fn mlm_loss<S: Scalar>(log_probs: &Mat<S>, instance: &PromptedInstance) -> Result<S> {
    if instance.mask_positions.is_empty() {
        return Err(Error::NothingMasked);
    }
    let max_pos = *instance.mask_positions.iter().max().expect("non-empty");
    if max_pos >= log_probs.rows() {
        return Err(Error::DimensionMismatch {
            left: max_pos + 1,
            right: log_probs.rows(),
        });
    }
    let mut total = S::zero();
    for (&pos, &label) in instance.mask_positions.iter().zip(&instance.labels) {
        if label as usize >= log_probs.cols() {
            return Err(Error::TokenOutOfRange {
                id: label,
                vocab_size: log_probs.cols(),
            });
        }
        total -= log_probs.get(pos, label as usize);
    }
    Ok(total)
}

/// Assemble, tokenize, and mask pairs into training instances. Instances
/// the tokenizer or masker rejects are dropped and counted; each instance
/// masks with a seed derived from the mask seed and its position.
pub fn prepare_instances(
    pairs: &[EntailmentPair],
    tokenizer: &Tokenizer,
    strategy: PromptStrategy,
    max_len: usize,
    mask: &MaskConfig,
) -> Result<(Vec<PromptedInstance>, usize)> {
    mask.validate()?;
    let mut instances = Vec::with_capacity(pairs.len());
    let mut rejected = 0;
    for (i, pair) in pairs.iter().enumerate() {
        let prompted = assemble_with(pair, strategy)?;
        let tokenized = match tokenize_with_span(&prompted, tokenizer, max_len) {
            Ok(t) => t,
            Err(Error::HypothesisDoesNotFit { .. }) => {
                rejected += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut rng = StdRng::seed_from_u64(derive_seed(mask.seed, &format!("mask/{i}")));
        match mask_hypothesis(&tokenized, tokenizer.mask_id, mask, &mut rng) {
            Ok(instance) => instances.push(instance),
            Err(Error::NothingMasked) => rejected += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((instances, rejected))
}

/// Run the entailment-tuning loop: masked-hypothesis prediction over the
/// unified pair pool, AdamW with linear warmup then a constant rate, and
/// per-step global-norm clipping. The model is updated in place.
pub fn entailment_tune<S: Scalar>(
    model: &mut EncoderModel<S>,
    tokenizer: &Tokenizer,
    pairs: &[EntailmentPair],
    strategy: PromptStrategy,
    config: &TuneConfig,
) -> Result<TrainLog> {
    entailment_tune_with_snapshots(model, tokenizer, pairs, strategy, config, None)
}

/// [`entailment_tune`] that additionally writes `encoder.epoch-N.ckpt`
/// into `snapshot_dir` after every epoch. The end-of-tuning checkpoint
/// remains the caller's job.
pub fn entailment_tune_with_snapshots<S: Scalar>(
    model: &mut EncoderModel<S>,
    tokenizer: &Tokenizer,
    pairs: &[EntailmentPair],
    strategy: PromptStrategy,
    config: &TuneConfig,
    snapshot_dir: Option<&std::path::Path>,
) -> Result<TrainLog> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingSet("no entailment pairs".to_string()));
    }
    let (instances, rejected) = prepare_instances(
        pairs,
        tokenizer,
        strategy,
        model.config().max_len,
        &config.mask,
    )?;
    if instances.is_empty() {
        return Err(Error::EmptyTrainingSet(
            "all instances were rejected during tokenization/masking".to_string(),
        ));
    }

    let mut optimizer = AdamW::new(model.store(), config.adamw());
    let mut log = TrainLog {
        rejected_instances: rejected,
        ..TrainLog::default()
    };
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let mut order: Vec<usize> = (0..instances.len()).collect();
        let mut rng = StdRng::seed_from_u64(derive_seed(config.seed, &format!("epoch/{epoch}")));
        order.shuffle(&mut rng);

        let mut epoch_loss_sum = 0.0;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let batch_loss;
            let mut grads = {
                let mut tape = Tape::new(model.store());
                let mut nlls = Vec::with_capacity(batch.len());
                let mut total_masked = 0usize;
                for &idx in batch {
                    let instance = &instances[idx];
                    let log_probs = mlm_log_probs(
                        &mut tape,
                        model.config(),
                        model.index(),
                        &instance.token_ids,
                    )?;
                    let labels: Vec<usize> = instance.labels.iter().map(|&l| l as usize).collect();
                    nlls.push(tape.nll_at(log_probs, &instance.mask_positions, &labels));
                    total_masked += instance.mask_positions.len();
                }
                let summed = tape.sum_scalars(&nlls);
                let loss = tape.scale(summed, S::of_f64(1.0 / total_masked as f64));
                batch_loss = tape.value(loss).get(0, 0).as_f64();
                tape.backward(loss)?
            };
            let (grad_norm, clipped) = clip_global_norm(&mut grads, config.max_grad_norm);
            let lr_scale = warmup_constant_schedule(step, config.warmup_steps);
            optimizer.step(model.store_mut(), &grads, lr_scale);

            log.steps.push(StepRecord {
                step,
                loss: batch_loss,
                grad_norm,
                clipped_grad_norm: clipped,
            });
            epoch_loss_sum += batch_loss;
            epoch_batches += 1;
        }
        log.epoch_mean_loss
            .push(epoch_loss_sum / epoch_batches as f64);
        log.epoch_seconds.push(epoch_start.elapsed().as_secs_f64());
        if let Some(dir) = snapshot_dir {
            model.save(&dir.join(format!("encoder.epoch-{epoch}.ckpt")))?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::masking::MaskScope;
    use crate::prompt::PairOrigin;

    fn uniform_log_probs(rows: usize, vocab: usize) -> Mat<f64> {
        let lp = (1.0 / vocab as f64).ln();
        Mat::from_vec(rows, vocab, vec![lp; rows * vocab])
    }

    #[test]
    fn mlm_loss_hand_computed_values() {
        // Model certain of the truth: loss 0.
        let mut certain = Mat::from_vec(2, 4, vec![-50.0; 8]);
        certain.set(0, 1, 0.0);
        certain.set(1, 2, 0.0);
        let instance = PromptedInstance {
            token_ids: vec![0, 0],
            hypothesis_span: (0, 2),
            mask_positions: vec![0, 1],
            labels: vec![1, 2],
        };
        let loss: f64 = mlm_loss(&certain, &instance).unwrap();
        assert!(loss.abs() < 1e-12);

        // Uniform over vocab 4, two masked positions: 2·ln 4.
        let uniform = uniform_log_probs(2, 4);
        let loss = mlm_loss(&uniform, &instance).unwrap();
        assert!((loss - 2.0 * 4.0f64.ln()).abs() < 1e-12);

        // Probability 0.5 at one masked position: ln 2.
        let mut half = uniform_log_probs(1, 4);
        half.set(0, 3, 0.5f64.ln());
        let one = PromptedInstance {
            token_ids: vec![0],
            hypothesis_span: (0, 1),
            mask_positions: vec![0],
            labels: vec![3],
        };
        let loss = mlm_loss(&half, &one).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_rejects_empty_mask() {
        let lp = uniform_log_probs(2, 4);
        let instance = PromptedInstance {
            token_ids: vec![0, 0],
            hypothesis_span: (0, 2),
            mask_positions: vec![],
            labels: vec![],
        };
        assert!(matches!(
            mlm_loss(&lp, &instance).unwrap_err(),
            Error::NothingMasked
        ));
    }

    #[test]
    fn mlm_loss_gradient_zero_at_unmasked_positions() {
        // Differentiate the tape NLL against log-softmax inputs and check
        // rows not in mask_positions receive zero gradient.
        use crate::math::{ParamStore, Tape};
        let mut store: ParamStore<f64> = ParamStore::new();
        let logits = store.add(
            "logits",
            Mat::from_fn(4, 5, |r, c| ((r * 5 + c) as f64 * 0.37).sin()),
        );
        let mut tape = Tape::new(&store);
        let lp = tape.log_softmax_rows(logits.into());
        let loss = tape.nll_at(lp, &[1, 3], &[2, 0]);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap();
        for c in 0..5 {
            assert_eq!(g.get(0, c), 0.0);
            assert_eq!(g.get(2, c), 0.0);
            assert!(g.get(1, c).abs() > 0.0);
            assert!(g.get(3, c).abs() > 0.0);
        }
    }

    fn toy_pairs() -> Vec<EntailmentPair> {
        let facts = [
            (
                "the falcon museum opened in 1901",
                "There exists a known time when the falcon museum opened.",
            ),
            (
                "the willow bridge closed in 1950",
                "There exists a known time when the willow bridge closed.",
            ),
            (
                "the ember garden expanded in 1975",
                "There exists a known time when the ember garden expanded.",
            ),
            (
                "the quartz archive moved in 1988",
                "There exists a known time when the quartz archive moved.",
            ),
        ];
        facts
            .iter()
            .map(|(p, h)| EntailmentPair::new(*p, *h, PairOrigin::Retrieval).unwrap())
            .collect()
    }

    fn toy_tokenizer(pairs: &[EntailmentPair]) -> Tokenizer {
        let mut texts: Vec<String> = Vec::new();
        for p in pairs {
            texts.push(format!("{} entails that {}", p.premise, p.hypothesis));
        }
        Tokenizer::build_from_texts(texts.iter().map(|s| s.as_str()), 500).unwrap()
    }

    #[test]
    fn tuning_reduces_loss_on_memorizable_pairs() {
        let pairs = toy_pairs();
        let tokenizer = toy_tokenizer(&pairs);
        let mut model: EncoderModel<f32> =
            EncoderModel::new(EncoderConfig::tiny(tokenizer.vocab_size()), 3).unwrap();
        let config = TuneConfig {
            learning_rate: 5e-3,
            warmup_steps: 5,
            batch_size: 4,
            epochs: 30,
            mask: MaskConfig {
                beta: 0.8,
                scope: MaskScope::HypothesisOnly,
                seed: 9,
            },
            seed: 17,
            ..TuneConfig::default()
        };
        let log = entailment_tune(
            &mut model,
            &tokenizer,
            &pairs,
            PromptStrategy::Prompt,
            &config,
        )
        .unwrap();
        assert_eq!(log.epoch_mean_loss.len(), 30);
        let first = log.epoch_mean_loss[0];
        let last = *log.epoch_mean_loss.last().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        for record in &log.steps {
            assert!(record.clipped_grad_norm <= config.max_grad_norm + 1e-6);
        }
    }

    #[test]
    fn tuning_is_deterministic_for_fixed_seed() {
        let pairs = toy_pairs();
        let tokenizer = toy_tokenizer(&pairs);
        let config = TuneConfig {
            learning_rate: 1e-3,
            warmup_steps: 2,
            batch_size: 2,
            epochs: 3,
            seed: 5,
            mask: MaskConfig {
                beta: 0.8,
                scope: MaskScope::HypothesisOnly,
                seed: 5,
            },
            ..TuneConfig::default()
        };
        let run = || {
            let mut model: EncoderModel<f32> =
                EncoderModel::new(EncoderConfig::tiny(tokenizer.vocab_size()), 3).unwrap();
            entailment_tune(
                &mut model,
                &tokenizer,
                &pairs,
                PromptStrategy::Prompt,
                &config,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        // Wall-clock differs between runs; the trace must not.
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.epoch_mean_loss, b.epoch_mean_loss);
    }

    #[test]
    fn all_rejected_is_empty_training_set() {
        let pairs = toy_pairs();
        let tokenizer = toy_tokenizer(&pairs);
        let mut model: EncoderModel<f32> =
            EncoderModel::new(EncoderConfig::tiny(tokenizer.vocab_size()), 3).unwrap();
        let config = TuneConfig {
            mask: MaskConfig {
                beta: 0.0,
                ..MaskConfig::default()
            },
            ..TuneConfig::default()
        };
        let err = entailment_tune(
            &mut model,
            &tokenizer,
            &pairs,
            PromptStrategy::Prompt,
            &config,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyTrainingSet(_)));
    }

    #[test]
    fn zero_epochs_rejected_by_validation() {
        let config = TuneConfig {
            epochs: 0,
            ..TuneConfig::default()
        };
        assert!(matches!(
            config.validate().unwrap_err(),
            Error::ConfigInvalid { .. }
        ));
    }
}
