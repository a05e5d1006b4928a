//! Unified entailment prompting.
//!
//! Retrieval data and NLI data are brought into one shape — premise and
//! hypothesis — then spliced into the prompt
//! `"<premise> entails that <hypothesis>"`. A `[SEP]`-concatenation variant
//! is kept as an ablation baseline.

use serde::{Deserialize, Serialize};

use crate::claim::question_to_claim;
use crate::data::{NLIExample, NliLabel, QAExample};
use crate::error::{Error, Result};

/// The words joining premise and hypothesis in the unified prompt.
pub const CONNECTIVE: &str = " entails that ";

/// Separator used by the concatenation baseline.
pub const CONCAT_SEPARATOR: &str = " [SEP] ";

/// How premise and hypothesis are joined into one input text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    /// `"<premise> entails that <hypothesis>"`.
    Prompt,
    /// `"<premise> [SEP] <hypothesis>"`.
    Concat,
}

/// Where an entailment pair came from, kept for audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairOrigin {
    Nli,
    Retrieval,
}

/// A premise/hypothesis pair in entailment relationship.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentPair {
    pub premise: String,
    pub hypothesis: String,
    pub origin: PairOrigin,
}

impl EntailmentPair {
    pub fn new(
        premise: impl Into<String>,
        hypothesis: impl Into<String>,
        origin: PairOrigin,
    ) -> Result<Self> {
        let premise = premise.into();
        let hypothesis = hypothesis.into();
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(EntailmentPair {
            premise,
            hypothesis,
            origin,
        })
    }
}

/// A fully assembled prompt with byte spans locating premise and hypothesis.
///
/// Slicing `text` by either span recovers the corresponding input verbatim;
/// the spans are disjoint and never overlap the connective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptedText {
    pub text: String,
    pub premise_span: (usize, usize),
    pub hypothesis_span: (usize, usize),
}

impl PromptedText {
    pub fn premise(&self) -> &str {
        &self.text[self.premise_span.0..self.premise_span.1]
    }

    pub fn hypothesis(&self) -> &str {
        &self.text[self.hypothesis_span.0..self.hypothesis_span.1]
    }
}

/// A training example from either source dataset.
#[derive(Debug, Clone)]
pub enum TrainingExample {
    Qa(QAExample),
    Nli(NLIExample),
}

/// Bring one example into entailment-pair form.
///
/// A QA example yields one pair per positive passage, with the question's
/// existence claim as the shared hypothesis. An NLI example yields one pair
/// iff its label is `entail` — the masked-prediction objective asks the
/// model to produce the hypothesis *from* the premise, which only makes
/// sense when the premise licenses it.
pub fn unify(example: &TrainingExample) -> Vec<EntailmentPair> {
    unify_with_hypothesis(example, QaHypothesis::Claim)
}

/// Which text fills the hypothesis slot for retrieval data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QaHypothesis {
    /// The question's existence claim (unified prompting).
    Claim,
    /// The raw question, used by the `[SEP]`-concatenation ablation.
    RawQuestion,
}

pub fn unify_with_hypothesis(
    example: &TrainingExample,
    qa_hypothesis: QaHypothesis,
) -> Vec<EntailmentPair> {
    match example {
        TrainingExample::Qa(qa) => {
            let hypothesis = match qa_hypothesis {
                QaHypothesis::Claim => question_to_claim(&qa.question).text,
                QaHypothesis::RawQuestion => qa.question.clone(),
            };
            qa.positive_passages
                .iter()
                .filter(|p| !p.body.is_empty())
                .map(|p| EntailmentPair {
                    premise: p.body.clone(),
                    hypothesis: hypothesis.clone(),
                    origin: PairOrigin::Retrieval,
                })
                .collect()
        }
        TrainingExample::Nli(nli) => match nli.label {
            NliLabel::Entail => vec![EntailmentPair {
                premise: nli.premise.clone(),
                hypothesis: nli.hypothesis.clone(),
                origin: PairOrigin::Nli,
            }],
            NliLabel::Neutral | NliLabel::Contradict => Vec::new(),
        },
    }
}

fn join_with(pair: &EntailmentPair, connective: &str) -> Result<PromptedText> {
    if pair.premise.is_empty() || pair.hypothesis.is_empty() {
        return Err(Error::EmptyText);
    }
    let premise_span = (0, pair.premise.len());
    let hyp_start = pair.premise.len() + connective.len();
    let text = format!("{}{}{}", pair.premise, connective, pair.hypothesis);
    let hypothesis_span = (hyp_start, text.len());
    Ok(PromptedText {
        text,
        premise_span,
        hypothesis_span,
    })
}

/// Splice a pair into the unified prompt `"<premise> entails that <hypothesis>"`.
pub fn assemble(pair: &EntailmentPair) -> Result<PromptedText> {
    join_with(pair, CONNECTIVE)
}

/// Splice a pair into the concatenation baseline `"<premise> [SEP] <hypothesis>"`.
pub fn assemble_concat(pair: &EntailmentPair) -> Result<PromptedText> {
    join_with(pair, CONCAT_SEPARATOR)
}

/// Assemble with the configured strategy.
pub fn assemble_with(pair: &EntailmentPair, strategy: PromptStrategy) -> Result<PromptedText> {
    match strategy {
        PromptStrategy::Prompt => assemble(pair),
        PromptStrategy::Concat => assemble_concat(pair),
    }
}

/// Load entailment pairs from a JSON-lines file.
pub fn load_pairs(path: &std::path::Path) -> Result<Vec<EntailmentPair>> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: EntailmentPair = serde_json::from_str(line).map_err(|e| Error::Schema {
            path: display.clone(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        if pair.premise.is_empty() || pair.hypothesis.is_empty() {
            return Err(Error::Schema {
                path: display.clone(),
                line: i + 1,
                detail: "premise and hypothesis must be non-empty".to_string(),
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}
