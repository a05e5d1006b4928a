//! Entailment/relevance separation studies.
//!
//! Two diagnostics over a trained (or mock) stack:
//! * NLI separation — does an entailment scorer assign higher
//!   entailment probability to positive passages than to negatives, with
//!   the question's existence claim as the hypothesis?
//! * Retriever separation — how far apart does a dual-tower retriever
//!   score entail / neutral / irrelevant premises against one hypothesis?

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::claim::question_to_claim;
use crate::contrastive::similarity;
use crate::data::{PassageRecord, QAExample};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::Tokenizer;

/// Scores the probability that `premise` entails `hypothesis`, in `[0, 1]`.
/// Deterministic per input.
pub trait NliScorer {
    fn score_entailment(&self, premise: &str, hypothesis: &str) -> Result<f64>;
}

/// Deterministic lexical heuristic: the fraction of hypothesis content
/// tokens that appear in the premise. A stand-in scorer for tests and dry
/// runs, not a real NLI model.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalOverlapScorer;

const OVERLAP_STOPWORDS: [&str; 16] = [
    "a", "an", "the", "of", "in", "on", "at", "to", "is", "are", "was", "were", "that", "there",
    "exists", "known",
];

impl NliScorer for LexicalOverlapScorer {
    fn score_entailment(&self, premise: &str, hypothesis: &str) -> Result<f64> {
        let normalize = |w: &str| {
            w.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        };
        let premise_tokens: Vec<String> = premise.split_whitespace().map(&normalize).collect();
        let hypothesis_tokens: Vec<String> = hypothesis
            .split_whitespace()
            .map(normalize)
            .filter(|w| !w.is_empty() && !OVERLAP_STOPWORDS.contains(&w.as_str()))
            .collect();
        if hypothesis_tokens.is_empty() {
            return Ok(0.0);
        }
        let found = hypothesis_tokens
            .iter()
            .filter(|t| premise_tokens.contains(t))
            .count();
        Ok(found as f64 / hypothesis_tokens.len() as f64)
    }
}

/// Adapter for an external NLI classifier: pipes one JSON object
/// `{"premise": …, "hypothesis": …}` to the command's stdin and reads a
/// JSON object `{"entail_probability": …}` from its stdout. The model
/// choice stays a plug-in, not a dependency.
#[derive(Debug, Clone)]
pub struct CommandNliScorer {
    pub command: String,
}

impl NliScorer for CommandNliScorer {
    fn score_entailment(&self, premise: &str, hypothesis: &str) -> Result<f64> {
        use std::process::{Command, Stdio};
        let fail = |detail: String| Error::ScorerFailure {
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
            detail,
        };
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let payload = serde_json::json!({ "premise": premise, "hypothesis": hypothesis });
        child
            .stdin
            .as_mut()
            .expect("stdin piped")
            .write_all(payload.to_string().as_bytes())
            .map_err(|e| fail(e.to_string()))?;
        let output = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !output.status.success() {
            return Err(fail(format!(
                "scorer command exited with {}",
                output.status
            )));
        }
        let parsed: serde_json::Value =
            serde_json::from_slice(&output.stdout).map_err(|e| fail(e.to_string()))?;
        let score = parsed
            .get("entail_probability")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| fail("missing entail_probability".to_string()))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(fail(format!("score {score} outside [0,1]")));
        }
        Ok(score)
    }
}

/// One hypothesis with premises in the three studied relationships.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTriple {
    pub hypothesis: String,
    pub entail_premise: String,
    pub neutral_premise: String,
    pub irrelevant_premise: String,
}

/// Scores of one group of pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub name: String,
    pub scores: Vec<f64>,
    pub mean: f64,
}

/// Difference of group means, `left` minus `right`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanGap {
    pub left: String,
    pub right: String,
    pub difference: f64,
}

/// Histogram over the union of all group scores: `edges.len() == bins + 1`,
/// `counts[group][bin]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<Vec<usize>>,
}

/// Per-group samples, means, pairwise mean gaps, and a shared histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub groups: Vec<GroupScores>,
    pub mean_gaps: Vec<MeanGap>,
    pub histogram: Histogram,
}

const HISTOGRAM_BINS: usize = 10;

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn build_report(groups: Vec<(String, Vec<f64>)>) -> SeparationReport {
    let groups: Vec<GroupScores> = groups
        .into_iter()
        .map(|(name, scores)| GroupScores {
            mean: mean(&scores),
            name,
            scores,
        })
        .collect();
    let mut mean_gaps = Vec::new();
    for i in 0..groups.len() {
        for j in (i + 1)..groups.len() {
            mean_gaps.push(MeanGap {
                left: groups[i].name.clone(),
                right: groups[j].name.clone(),
                difference: groups[i].mean - groups[j].mean,
            });
        }
    }
    let all: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.scores.iter().copied())
        .collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if all.is_empty() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|i| lo + width * i as f64)
        .collect();
    let counts = groups
        .iter()
        .map(|g| {
            let mut bins = vec![0usize; HISTOGRAM_BINS];
            for &score in &g.scores {
                let bin = (((score - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                bins[bin] += 1;
            }
            bins
        })
        .collect();
    SeparationReport {
        groups,
        mean_gaps,
        histogram: Histogram { edges, counts },
    }
}

/// Score positive and negative passages of each example against the
/// question's existence claim. Every scored pair lands in exactly one
/// group: `positive` or `negative`.
pub fn nli_separation_study(
    scorer: &dyn NliScorer,
    examples: &[QAExample],
) -> Result<SeparationReport> {
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for example in examples {
        let claim = question_to_claim(&example.question).text;
        for passage in &example.positive_passages {
            positive.push(scorer.score_entailment(&passage.body, &claim)?);
        }
        for passage in &example.negative_passages {
            negative.push(scorer.score_entailment(&passage.body, &claim)?);
        }
    }
    Ok(build_report(vec![
        ("positive".to_string(), positive),
        ("negative".to_string(), negative),
    ]))
}

/// Build relation triples from QA examples: the entail premise is the
/// first positive passage, neutral premises cycle through NLI
/// neutral-labeled premises, and irrelevant premises are sampled with a
/// fixed seed from a held-out corpus partition.
pub fn build_relation_triples(
    examples: &[QAExample],
    neutral_premises: &[String],
    irrelevant_pool: &[PassageRecord],
    seed: u64,
) -> Result<Vec<RelationTriple>> {
    if neutral_premises.is_empty() {
        return Err(Error::InvalidArgument(
            "no neutral premises available".to_string(),
        ));
    }
    if irrelevant_pool.is_empty() {
        return Err(Error::InvalidArgument(
            "no irrelevant passages available".to_string(),
        ));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut triples = Vec::new();
    for (i, example) in examples.iter().enumerate() {
        let Some(positive) = example.positive_passages.first() else {
            continue;
        };
        triples.push(RelationTriple {
            hypothesis: question_to_claim(&example.question).text,
            entail_premise: positive.body.clone(),
            neutral_premise: neutral_premises[i % neutral_premises.len()].clone(),
            irrelevant_premise: irrelevant_pool[rng.gen_range(0..irrelevant_pool.len())]
                .body
                .clone(),
        });
    }
    Ok(triples)
}

/// Retriever-score separation across entail / neutral / irrelevant
/// premises. `embed_query` embeds hypotheses, `embed_passage` the premises.
pub fn retriever_separation_study(
    embed_query: &dyn Fn(&str) -> Result<Vec<f64>>,
    embed_passage: &dyn Fn(&str) -> Result<Vec<f64>>,
    triples: &[RelationTriple],
) -> Result<SeparationReport> {
    let mut entail = Vec::with_capacity(triples.len());
    let mut neutral = Vec::with_capacity(triples.len());
    let mut irrelevant = Vec::with_capacity(triples.len());
    for triple in triples {
        let hypothesis = embed_query(&triple.hypothesis)?;
        entail.push(similarity(
            &hypothesis,
            &embed_passage(&triple.entail_premise)?,
        )?);
        neutral.push(similarity(
            &hypothesis,
            &embed_passage(&triple.neutral_premise)?,
        )?);
        irrelevant.push(similarity(
            &hypothesis,
            &embed_passage(&triple.irrelevant_premise)?,
        )?);
    }
    Ok(build_report(vec![
        ("entail".to_string(), entail),
        ("neutral".to_string(), neutral),
        ("irrelevant".to_string(), irrelevant),
    ]))
}

/// Closure adapter embedding through an encoder at `f64` for study code.
pub fn embedder<'a, S: Scalar>(
    model: &'a EncoderModel<S>,
    tokenizer: &'a Tokenizer,
) -> impl Fn(&str) -> Result<Vec<f64>> + 'a {
    move |text: &str| {
        Ok(model
            .embed(tokenizer, text)?
            .into_iter()
            .map(|v| v.as_f64())
            .collect())
    }
}

/// Raw scores as CSV (`group,score`) for external plotting.
pub fn write_scores_csv(report: &SeparationReport, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "group,score").map_err(|e| Error::io(&display, e))?;
    for group in &report.groups {
        for score in &group.scores {
            writeln!(writer, "{},{}", group.name, score).map_err(|e| Error::io(&display, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(&display, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PassageRecord;

    struct ConstScorer {
        positive: f64,
        negative: f64,
    }

    impl NliScorer for ConstScorer {
        fn score_entailment(&self, premise: &str, _hypothesis: &str) -> Result<f64> {
            Ok(if premise.contains("gold") {
                self.positive
            } else {
                self.negative
            })
        }
    }

    fn passage(id: &str, body: &str) -> PassageRecord {
        PassageRecord {
            id: id.to_string(),
            title: None,
            body: body.to_string(),
            meta: None,
        }
    }

    fn examples(n: usize) -> Vec<QAExample> {
        (0..n)
            .map(|i| QAExample {
                question: format!("when did event {i} happen?"),
                answers: vec![],
                positive_passages: vec![passage(&format!("p{i}"), &format!("gold passage {i}"))],
                negative_passages: vec![passage(&format!("n{i}"), &format!("plain passage {i}"))],
            })
            .collect()
    }

    #[test]
    fn constant_scorer_mean_difference() {
        let report = nli_separation_study(
            &ConstScorer {
                positive: 0.9,
                negative: 0.1,
            },
            &examples(5),
        )
        .unwrap();
        assert_eq!(report.groups.len(), 2);
        assert_eq!(report.groups[0].scores.len(), 5);
        assert!((report.mean_gaps[0].difference - 0.8).abs() < 1e-12);

        let flat = nli_separation_study(
            &ConstScorer {
                positive: 0.5,
                negative: 0.5,
            },
            &examples(5),
        )
        .unwrap();
        assert_eq!(flat.mean_gaps[0].difference, 0.0);
    }

    #[test]
    fn randomized_scorer_means_within_three_sigma() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};

        // Scorer draws from two known means with bounded noise; the
        // estimator of each group mean must land within 3σ/√n.
        struct NoisyScorer {
            rng: std::cell::RefCell<StdRng>,
        }
        impl NliScorer for NoisyScorer {
            fn score_entailment(&self, premise: &str, _h: &str) -> Result<f64> {
                let mut rng = self.rng.borrow_mut();
                let noise: f64 = rng.gen_range(-0.1..0.1);
                Ok(if premise.contains("gold") {
                    0.8 + noise
                } else {
                    0.2 + noise
                })
            }
        }
        let n = 400;
        let report = nli_separation_study(
            &NoisyScorer {
                rng: std::cell::RefCell::new(StdRng::seed_from_u64(8)),
            },
            &examples(n),
        )
        .unwrap();
        // Uniform(-0.1, 0.1): σ = 0.2/√12 ≈ 0.0577.
        let sigma_mean = 0.0577 / (n as f64).sqrt();
        assert!((report.groups[0].mean - 0.8).abs() < 3.0 * sigma_mean);
        assert!((report.groups[1].mean - 0.2).abs() < 3.0 * sigma_mean);
    }

    #[test]
    fn scorer_failure_carries_pair() {
        struct Failing;
        impl NliScorer for Failing {
            fn score_entailment(&self, premise: &str, hypothesis: &str) -> Result<f64> {
                Err(Error::ScorerFailure {
                    premise: premise.to_string(),
                    hypothesis: hypothesis.to_string(),
                    detail: "boom".to_string(),
                })
            }
        }
        let err = nli_separation_study(&Failing, &examples(1)).unwrap_err();
        assert!(matches!(err, Error::ScorerFailure { .. }));
    }

    /// Bag-of-shared-token mock embedding: a fixed vocabulary of dims, 1.0
    /// where the text contains that word.
    fn bag_embedding(text: &str) -> Result<Vec<f64>> {
        let vocab = [
            "falcon", "museum", "opened", "1901", "river", "harbor", "budget",
        ];
        let tokens: Vec<String> = text
            .split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| c.is_ascii_punctuation())
                    .to_lowercase()
            })
            .collect();
        Ok(vocab
            .iter()
            .map(|w| {
                if tokens.iter().any(|t| t == w) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect())
    }

    #[test]
    fn mock_encoder_separates_overlapping_from_irrelevant() {
        let triples = vec![RelationTriple {
            hypothesis: "There exists a known time when the falcon museum opened.".to_string(),
            entail_premise: "the falcon museum opened in 1901 .".to_string(),
            neutral_premise: "the falcon museum sits by the river .".to_string(),
            irrelevant_premise: "the committee debated the budget .".to_string(),
        }];
        let report = retriever_separation_study(&bag_embedding, &bag_embedding, &triples).unwrap();
        let by_name = |name: &str| report.groups.iter().find(|g| g.name == name).unwrap().mean;
        assert!(by_name("entail") > by_name("irrelevant"));
        assert!(by_name("neutral") > by_name("irrelevant"));
    }

    #[test]
    fn degenerate_triple_gives_equal_means() {
        let same = "the falcon museum opened in 1901 .";
        let triples = vec![RelationTriple {
            hypothesis: "There exists a known time when the falcon museum opened.".to_string(),
            entail_premise: same.to_string(),
            neutral_premise: same.to_string(),
            irrelevant_premise: same.to_string(),
        }];
        let report = retriever_separation_study(&bag_embedding, &bag_embedding, &triples).unwrap();
        assert_eq!(report.groups[0].mean, report.groups[1].mean);
        assert_eq!(report.groups[1].mean, report.groups[2].mean);
    }

    #[test]
    fn permuting_triples_leaves_means_unchanged() {
        let triples: Vec<RelationTriple> = (0..4)
            .map(|i| RelationTriple {
                hypothesis: format!("There exists a known time when event {i} opened."),
                entail_premise: format!("the falcon museum opened in 1901 number {i}"),
                neutral_premise: format!("the falcon museum sits by the river number {i}"),
                irrelevant_premise: format!("the committee debated the budget number {i}"),
            })
            .collect();
        let a = retriever_separation_study(&bag_embedding, &bag_embedding, &triples).unwrap();
        let mut reversed = triples.clone();
        reversed.reverse();
        let b = retriever_separation_study(&bag_embedding, &bag_embedding, &reversed).unwrap();
        for (ga, gb) in a.groups.iter().zip(&b.groups) {
            assert!((ga.mean - gb.mean).abs() < 1e-12);
        }
    }

    #[test]
    fn lexical_scorer_bounds_and_determinism() {
        let scorer = LexicalOverlapScorer;
        let a = scorer
            .score_entailment(
                "the falcon museum opened in 1901",
                "the falcon museum opened.",
            )
            .unwrap();
        let b = scorer
            .score_entailment(
                "the falcon museum opened in 1901",
                "the falcon museum opened.",
            )
            .unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(a, 1.0);
        let none = scorer
            .score_entailment("completely different words", "the falcon museum opened.")
            .unwrap();
        assert_eq!(none, 0.0);
    }

    #[test]
    fn triples_builder_uses_fixed_seed_and_pools() {
        let qa = examples(6);
        let neutrals = vec![
            "overlapping text one".to_string(),
            "overlapping text two".to_string(),
        ];
        let pool: Vec<PassageRecord> = (0..5)
            .map(|i| passage(&format!("irr{i}"), &format!("filler body {i}")))
            .collect();
        let a = build_relation_triples(&qa, &neutrals, &pool, 3).unwrap();
        let b = build_relation_triples(&qa, &neutrals, &pool, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0].neutral_premise, "overlapping text one");
        assert_eq!(a[1].neutral_premise, "overlapping text two");
        assert!(build_relation_triples(&qa, &[], &pool, 3).is_err());
        assert!(build_relation_triples(&qa, &neutrals, &[], 3).is_err());
    }
}
