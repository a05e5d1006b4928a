//! Rule-based transformation of interrogative questions into narrative
//! existence claims.
//!
//! Questions are dispatched on their leading token into six categories
//! (When, Why, Who, Where, Does, How) plus an explicit Other fallback, and
//! each category fills a fixed declarative template. The transformation is
//! mechanical and content-preserving: no grammar correction is applied to
//! the remainder of the question.

use serde::{Deserialize, Serialize};

use crate::data::normalize_ws;

/// Category a question is routed to by its leading token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionCategory {
    When,
    Why,
    Who,
    Where,
    Does,
    How,
    Other,
}

impl QuestionCategory {
    pub const ALL: [QuestionCategory; 7] = [
        QuestionCategory::When,
        QuestionCategory::Why,
        QuestionCategory::Who,
        QuestionCategory::Where,
        QuestionCategory::Does,
        QuestionCategory::How,
        QuestionCategory::Other,
    ];
}

/// A declarative claim asserting the existence of the entity or event the
/// source question asks about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistenceClaim {
    pub text: String,
    pub category: QuestionCategory,
    pub source_question: String,
}

/// Auxiliaries stripped when they directly follow the matched wh-word.
const AUXILIARIES: [&str; 13] = [
    "did", "do", "does", "was", "were", "is", "are", "will", "can", "could", "has", "have", "had",
];

/// Classify a question by its leading token, case-insensitively.
///
/// Total function: anything that does not start with one of the six
/// category words (including multi-word openers like "in what year") falls
/// to [`QuestionCategory::Other`].
pub fn classify_question(question: &str) -> QuestionCategory {
    let normalized = normalize_ws(question);
    let first = normalized.split_whitespace().next().unwrap_or("");
    match first.to_lowercase().as_str() {
        "when" => QuestionCategory::When,
        "why" => QuestionCategory::Why,
        "who" => QuestionCategory::Who,
        "where" => QuestionCategory::Where,
        "does" => QuestionCategory::Does,
        "how" => QuestionCategory::How,
        _ => QuestionCategory::Other,
    }
}

/// Strip terminal question marks (and surrounding whitespace) from a
/// normalized question.
fn strip_terminal_question_mark(text: &str) -> String {
    text.trim_end().trim_end_matches('?').trim_end().to_string()
}

/// The question minus its matched wh-word and, when present, the
/// immediately following auxiliary.
fn remainder(normalized: &str) -> String {
    let mut tokens = normalized.split_whitespace();
    let _wh = tokens.next();
    let rest: Vec<&str> = tokens.collect();
    let rest = match rest.first() {
        Some(first) if AUXILIARIES.contains(&first.to_lowercase().as_str()) => &rest[1..],
        _ => &rest[..],
    };
    strip_terminal_question_mark(&rest.join(" "))
}

fn with_template(prefix: &str, rest: &str) -> String {
    if rest.is_empty() {
        format!("{prefix}.")
    } else {
        format!("{prefix} {rest}.")
    }
}

/// Convert a question into an [`ExistenceClaim`] via the category template
/// table. The claim preserves every content word of the source question
/// and always ends with a period, never a question mark.
pub fn question_to_claim(question: &str) -> ExistenceClaim {
    let normalized = normalize_ws(question);
    let category = classify_question(&normalized);
    let text = match category {
        QuestionCategory::When => {
            with_template("There exists a known time when", &remainder(&normalized))
        }
        QuestionCategory::Why => {
            with_template("There exists a known reason why", &remainder(&normalized))
        }
        QuestionCategory::Who => {
            with_template("There exists a known person who", &remainder(&normalized))
        }
        QuestionCategory::Where => {
            with_template("There exists a known place where", &remainder(&normalized))
        }
        QuestionCategory::How => {
            with_template("There exists a known way how", &remainder(&normalized))
        }
        QuestionCategory::Does => with_template(
            "It is known whether",
            &strip_terminal_question_mark(&normalized),
        ),
        QuestionCategory::Other => with_template(
            "There exists a known answer to the question:",
            &strip_terminal_question_mark(&normalized),
        ),
    };
    ExistenceClaim {
        text,
        category,
        source_question: normalized,
    }
}

/// Tokens of the source question that must survive into the claim: every
/// token except the matched wh/aux prefix and stopwords.
pub fn content_words(question: &str) -> Vec<String> {
    const STOPWORDS: [&str; 24] = [
        "a", "an", "the", "of", "in", "on", "at", "to", "for", "and", "or", "is", "are", "was",
        "were", "do", "does", "did", "has", "have", "had", "will", "can", "could",
    ];
    let normalized = normalize_ws(question);
    let category = classify_question(&normalized);
    let tokens: Vec<&str> = normalized.split_whitespace().collect();
    let body = match category {
        // For the five wh templates the matched prefix is dropped from the
        // claim; Does/Other embed the whole question.
        QuestionCategory::When
        | QuestionCategory::Why
        | QuestionCategory::Who
        | QuestionCategory::Where
        | QuestionCategory::How => {
            let mut rest = &tokens[1..];
            if let Some(first) = rest.first() {
                if AUXILIARIES.contains(&first.to_lowercase().as_str()) {
                    rest = &rest[1..];
                }
            }
            rest
        }
        QuestionCategory::Does | QuestionCategory::Other => &tokens[..],
    };
    body.iter()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_string()
        })
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(&t.to_lowercase().as_str()))
        .collect()
}

/// Check that every content word of `question` appears as a token of
/// `claim_text` (punctuation-trimmed comparison). This is the executable
/// reading of the information-invariance property.
pub fn preserves_content(question: &str, claim_text: &str) -> bool {
    let claim_tokens: Vec<String> = claim_text
        .split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_string()
        })
        .collect();
    content_words(question)
        .iter()
        .all(|w| claim_tokens.iter().any(|t| t == w))
}
