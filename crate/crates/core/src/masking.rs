//! Tokenization of prompted text and the masked-hypothesis scheme.
//!
//! Masking is i.i.d. per token at rate `beta` and replaces a chosen token
//! with `[MASK]` unconditionally — there is no random-token or keep branch.
//! Special and connective tokens are never maskable in any scope.

use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::PromptedText;
use crate::tokenizer::Tokenizer;

/// Which part of the prompt is eligible for masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    /// Only hypothesis tokens may be masked (the default; the strongest
    /// setting in the masking ablation).
    HypothesisOnly,
    /// Premise and hypothesis tokens may be masked; the prompt frame
    /// (special and connective tokens) stays intact.
    FullPrompt,
}

/// Masking configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Per-token masking probability in `[0, 1]`. Much higher than
    /// conventional MLM pre-training; default 0.8.
    pub beta: f64,
    pub scope: MaskScope,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            beta: 0.8,
            scope: MaskScope::HypothesisOnly,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in [0,1], got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Role of each token position within the assembled prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    Special,
    Premise,
    Connective,
    Hypothesis,
}

/// A tokenized prompt with per-position roles.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPrompt {
    pub token_ids: Vec<u32>,
    pub roles: Vec<TokenRole>,
    /// Token-position span `[start, end)` of the hypothesis.
    pub hypothesis_span: (usize, usize),
}

/// A trainable instance: token ids with mask positions and their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedInstance {
    pub token_ids: Vec<u32>,
    #[serde(rename = "hyp_span")]
    pub hypothesis_span: (usize, usize),
    pub mask_positions: Vec<usize>,
    pub labels: Vec<u32>,
}

impl PromptedInstance {
    /// Number of real (non-padding) positions; sequences are stored
    /// unpadded, so this is the token count.
    pub fn attention_length(&self) -> usize {
        self.token_ids.len()
    }
}

fn spans_overlap(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Tokenize a prompted text into `[CLS] <tokens> [SEP]`, assigning each
/// word its role by intersecting word extents with the premise and
/// hypothesis byte spans.
///
/// When the sequence exceeds `max_len`, premise tokens are dropped from the
/// end of the premise block (head preserved) until it fits: the hypothesis
/// is the prediction target and always survives, as does the connective.
/// If the hypothesis plus the prompt frame cannot fit while keeping at
/// least one premise token, the instance is rejected.
pub fn tokenize_with_span(
    prompted: &PromptedText,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<TokenizedPrompt> {
    let (word_ids, offsets) = tokenizer.encode_with_offsets(&prompted.text);
    let mut token_ids = Vec::with_capacity(word_ids.len() + 2);
    let mut roles = Vec::with_capacity(word_ids.len() + 2);
    token_ids.push(tokenizer.cls_id);
    roles.push(TokenRole::Special);
    for (&id, &extent) in word_ids.iter().zip(&offsets) {
        let role = if spans_overlap(extent, prompted.premise_span) {
            TokenRole::Premise
        } else if spans_overlap(extent, prompted.hypothesis_span) {
            TokenRole::Hypothesis
        } else {
            TokenRole::Connective
        };
        token_ids.push(id);
        roles.push(role);
    }
    token_ids.push(tokenizer.sep_id);
    roles.push(TokenRole::Special);

    if token_ids.len() > max_len {
        let premise_count = roles.iter().filter(|r| **r == TokenRole::Premise).count();
        let frame_len = token_ids.len() - premise_count;
        // Keep at least one premise token; otherwise there is nothing to
        // predict the hypothesis from.
        if frame_len + 1 > max_len {
            return Err(Error::HypothesisDoesNotFit {
                needed: frame_len + 1,
                max_len,
            });
        }
        let keep = max_len - frame_len;
        let premise_end = roles
            .iter()
            .rposition(|r| *r == TokenRole::Premise)
            .expect("premise_count > 0");
        let premise_start = premise_end + 1 - premise_count;
        let drop_from = premise_start + keep;
        let dropped = premise_count - keep;
        token_ids.drain(drop_from..drop_from + dropped);
        roles.drain(drop_from..drop_from + dropped);
    }

    let hyp_start = roles.iter().position(|r| *r == TokenRole::Hypothesis);
    let hyp_end = roles.iter().rposition(|r| *r == TokenRole::Hypothesis);
    let (start, end) = match (hyp_start, hyp_end) {
        (Some(s), Some(e)) => (s, e + 1),
        _ => return Err(Error::HypothesisDoesNotFit { needed: 0, max_len }),
    };
    Ok(TokenizedPrompt {
        token_ids,
        roles,
        hypothesis_span: (start, end),
    })
}

/// Apply i.i.d. masking at rate `config.beta` over the positions the scope
/// allows, recording original ids as labels. Rejects instances where
/// nothing ended up masked — there would be nothing to predict.
pub fn mask_hypothesis(
    prompt: &TokenizedPrompt,
    mask_token_id: u32,
    config: &MaskConfig,
    rng: &mut StdRng,
) -> Result<PromptedInstance> {
    config.validate()?;
    let maskable: Vec<usize> = prompt
        .roles
        .iter()
        .enumerate()
        .filter(|(_, role)| match config.scope {
            MaskScope::HypothesisOnly => **role == TokenRole::Hypothesis,
            MaskScope::FullPrompt => {
                **role == TokenRole::Hypothesis || **role == TokenRole::Premise
            }
        })
        .map(|(i, _)| i)
        .collect();
    if maskable.is_empty() {
        return Err(Error::NothingMasked);
    }

    let mut token_ids = prompt.token_ids.clone();
    let mut mask_positions = Vec::new();
    let mut labels = Vec::new();
    for &pos in &maskable {
        if rng.gen::<f64>() < config.beta {
            mask_positions.push(pos);
            labels.push(token_ids[pos]);
            token_ids[pos] = mask_token_id;
        }
    }
    if mask_positions.is_empty() {
        return Err(Error::NothingMasked);
    }
    Ok(PromptedInstance {
        token_ids,
        hypothesis_span: prompt.hypothesis_span,
        mask_positions,
        labels,
    })
}
