//! Dataset ingestion: QA-retrieval and NLI records from JSON-lines files.
//!
//! All free text is whitespace-normalized on load (runs of whitespace
//! collapsed to single spaces, ends stripped) so downstream chunking and
//! round-trip properties are well defined.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Collapse runs of whitespace to single spaces and strip both ends.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A passage with a stable id, optional title, and a body of roughly one
/// hundred words per chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub body: String,
    /// Opaque provenance carried through untouched (e.g. how a negative was
    /// mined). Never interpreted by the pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

/// A question with its answers, positive passages, and negative passages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub question: String,
    #[serde(default)]
    pub answers: Vec<String>,
    #[serde(default)]
    pub positive_passages: Vec<PassageRecord>,
    #[serde(default)]
    pub negative_passages: Vec<PassageRecord>,
}

/// Three-way NLI relationship.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entail,
    Neutral,
    Contradict,
}

impl NliLabel {
    /// Parse a label string, accepting the long-form aliases used by common
    /// NLI corpora: `entailment`, `neutral`, `contradiction`. Anything else
    /// is rejected.
    pub fn parse(raw: &str) -> Option<NliLabel> {
        match raw {
            "entail" | "entailment" => Some(NliLabel::Entail),
            "neutral" => Some(NliLabel::Neutral),
            "contradict" | "contradiction" => Some(NliLabel::Contradict),
            _ => None,
        }
    }
}

/// A premise/hypothesis pair with a three-way label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NLIExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

/// An ordered collection of passages with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub passages: Vec<PassageRecord>,
}

impl Corpus {
    /// Build a corpus, rejecting duplicate passage ids. Iteration order is
    /// the order passages were supplied in.
    pub fn from_passages(passages: Vec<PassageRecord>) -> Result<Corpus> {
        let mut seen = BTreeSet::new();
        for passage in &passages {
            if !seen.insert(passage.id.as_str()) {
                return Err(Error::DuplicatePassageId {
                    id: passage.id.clone(),
                });
            }
        }
        Ok(Corpus { passages })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

fn read_jsonl<T, F>(path: &Path, mut parse: F) -> Result<Vec<T>>
where
    F: FnMut(usize, &str) -> Result<T>,
{
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse(idx + 1, &line)?);
    }
    Ok(records)
}

fn classify_json_error(path: &str, line: usize, err: serde_json::Error) -> Error {
    if err.is_syntax() || err.is_eof() {
        Error::MalformedLine {
            path: path.to_string(),
            line,
            detail: err.to_string(),
        }
    } else {
        Error::Schema {
            path: path.to_string(),
            line,
            detail: err.to_string(),
        }
    }
}

fn normalize_passage(p: &mut PassageRecord, path: &str, line: usize) -> Result<()> {
    p.id = normalize_ws(&p.id);
    p.body = normalize_ws(&p.body);
    if let Some(title) = p.title.take() {
        let title = normalize_ws(&title);
        if !title.is_empty() {
            p.title = Some(title);
        }
    }
    if p.body.is_empty() {
        return Err(Error::Schema {
            path: path.to_string(),
            line,
            detail: format!("passage {:?} has an empty body", p.id),
        });
    }
    Ok(())
}

/// Load QA examples from a JSON-lines file, preserving record order.
///
/// Each line must hold one record of the shape
/// `{"question": str, "answers": [str], "positive_passages": [...],
/// "negative_passages": [...]}`. Errors carry the offending line number.
pub fn load_qa_dataset(path: &Path) -> Result<Vec<QAExample>> {
    let display = path.display().to_string();
    read_jsonl(path, |line_no, line| {
        let mut example: QAExample =
            serde_json::from_str(line).map_err(|e| classify_json_error(&display, line_no, e))?;
        example.question = normalize_ws(&example.question);
        if example.question.is_empty() {
            return Err(Error::Schema {
                path: display.clone(),
                line: line_no,
                detail: "field \"question\" is empty after whitespace normalization".to_string(),
            });
        }
        for answer in &mut example.answers {
            *answer = normalize_ws(answer);
        }
        for passage in example
            .positive_passages
            .iter_mut()
            .chain(example.negative_passages.iter_mut())
        {
            normalize_passage(passage, &display, line_no)?;
        }
        Ok(example)
    })
}

/// Check the training invariant that every example has at least one
/// positive passage.
pub fn validate_training_examples(examples: &[QAExample]) -> Result<()> {
    for (idx, example) in examples.iter().enumerate() {
        if example.positive_passages.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "training example {} ({:?}) has no positive passage",
                idx, example.question
            )));
        }
    }
    Ok(())
}

/// Load NLI examples from a JSON-lines file. Labels are parsed through the
/// alias table; unknown label strings are schema errors naming the value.
pub fn load_nli_dataset(path: &Path) -> Result<Vec<NLIExample>> {
    #[derive(Deserialize)]
    struct RawNli {
        premise: String,
        hypothesis: String,
        label: String,
    }

    let display = path.display().to_string();
    read_jsonl(path, |line_no, line| {
        let raw: RawNli =
            serde_json::from_str(line).map_err(|e| classify_json_error(&display, line_no, e))?;
        let label = NliLabel::parse(&raw.label).ok_or_else(|| Error::Schema {
            path: display.clone(),
            line: line_no,
            detail: format!("unknown label {:?}", raw.label),
        })?;
        let premise = normalize_ws(&raw.premise);
        let hypothesis = normalize_ws(&raw.hypothesis);
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(Error::Schema {
                path: display.clone(),
                line: line_no,
                detail: "premise and hypothesis must be non-empty".to_string(),
            });
        }
        Ok(NLIExample {
            premise,
            hypothesis,
            label,
        })
    })
}

/// Load a passage corpus from a JSON-lines file of [`PassageRecord`]s,
/// enforcing id uniqueness.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let display = path.display().to_string();
    let passages = read_jsonl(path, |line_no, line| {
        let mut passage: PassageRecord =
            serde_json::from_str(line).map_err(|e| classify_json_error(&display, line_no, e))?;
        normalize_passage(&mut passage, &display, line_no)?;
        Ok(passage)
    })?;
    Corpus::from_passages(passages)
}

/// Write records as JSON-lines.
pub fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| Error::Pipeline(e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| Error::io(&display, e))?;
    }
    writer.flush().map_err(|e| Error::io(&display, e))
}

/// Split a document into fixed-size word chunks.
///
/// Every chunk except possibly the last holds exactly `words_per_chunk`
/// whitespace tokens; joining the chunk bodies with single spaces
/// reproduces the whitespace-normalized input. An empty input yields an
/// empty sequence.
pub fn chunk_document(text: &str, words_per_chunk: usize) -> Result<Vec<PassageRecord>> {
    if words_per_chunk == 0 {
        return Err(Error::InvalidArgument(
            "words_per_chunk must be at least 1".to_string(),
        ));
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    Ok(words
        .chunks(words_per_chunk)
        .enumerate()
        .map(|(i, chunk)| PassageRecord {
            id: format!("chunk-{i:06}"),
            title: None,
            body: chunk.join(" "),
            meta: None,
        })
        .collect())
}
