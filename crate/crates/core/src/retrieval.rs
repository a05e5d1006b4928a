//! Corpus encoding, exact inner-product top-k search, and retrieval
//! metrics.
//!
//! Search is exact at desk scale: a bounded selection over all inner
//! products, with ties broken by ascending passage id for reproducibility.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, QAExample};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::Tokenizer;

/// Passage embeddings, one row per passage, aligned with `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<S> {
    ids: Vec<String>,
    dim: usize,
    /// Row-major `n × dim`.
    vectors: Vec<S>,
}

impl<S: Scalar> EmbeddingMatrix<S> {
    pub fn new(ids: Vec<String>, dim: usize, vectors: Vec<S>) -> Result<EmbeddingMatrix<S>> {
        if ids.len() * dim != vectors.len() {
            return Err(Error::DimensionMismatch {
                left: ids.len() * dim,
                right: vectors.len(),
            });
        }
        Ok(EmbeddingMatrix { ids, dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// One scored passage in a ranked result list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub passage_id: String,
    pub score: f64,
}

/// Ranked retrieval output for one query: scores non-increasing, ids
/// unique, at most `k` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query_id: String,
    pub hits: Vec<SearchHit>,
}

/// Encode every corpus passage, preserving order. `batch_size` only groups
/// the work; outputs are identical for any batch size.
pub fn encode_corpus<S: Scalar>(
    passage_encoder: &EncoderModel<S>,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    batch_size: usize,
) -> Result<EmbeddingMatrix<S>> {
    if corpus.is_empty() {
        return Err(Error::EmptyTrainingSet(
            "corpus has no passages".to_string(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch_size must be at least 1".to_string(),
        ));
    }
    let dim = passage_encoder.embedding_dim();
    let mut vectors = Vec::with_capacity(corpus.len() * dim);
    let mut ids = Vec::with_capacity(corpus.len());
    for chunk in corpus.passages.chunks(batch_size) {
        for passage in chunk {
            let embedding = passage_encoder.embed(tokenizer, &passage.body)?;
            if embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    left: embedding.len(),
                    right: dim,
                });
            }
            vectors.extend(embedding);
            ids.push(passage.id.clone());
        }
    }
    EmbeddingMatrix::new(ids, dim, vectors)
}

/// Exact top-k by inner product: the k highest-scoring passages in
/// descending score order, ties broken by ascending passage id. `k` larger
/// than the corpus returns everything.
pub fn search<S: Scalar>(
    index: &EmbeddingMatrix<S>,
    query: &[S],
    k: usize,
) -> Result<Vec<SearchHit>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".to_string()));
    }
    if query.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            left: query.len(),
            right: index.dim(),
        });
    }

    // (score, row) ordered worst-first so the binary heap evicts the
    // current worst; `row` carries the id for tie comparisons.
    struct Entry<'a, S> {
        score: S,
        id: &'a str,
    }
    impl<S: Scalar> Entry<'_, S> {
        /// Ascending by retrieval goodness: lower score first; on equal
        /// scores the lexicographically larger id first (it loses the tie).
        fn worse_than(&self, other: &Self) -> Ordering {
            match self
                .score
                .partial_cmp(&other.score)
                .unwrap_or(Ordering::Equal)
            {
                Ordering::Equal => self.id.cmp(other.id).reverse(),
                ordering => ordering,
            }
        }
    }

    let mut worst_first: Vec<Entry<'_, S>> = Vec::with_capacity(k + 1);
    for i in 0..index.len() {
        let mut score = S::zero();
        for (&q, &v) in query.iter().zip(index.row(i)) {
            score += q * v;
        }
        let entry = Entry {
            score,
            id: &index.ids()[i],
        };
        let pos = worst_first
            .binary_search_by(|probe| probe.worse_than(&entry))
            .unwrap_or_else(|p| p);
        worst_first.insert(pos, entry);
        if worst_first.len() > k {
            worst_first.remove(0);
        }
    }
    Ok(worst_first
        .into_iter()
        .rev()
        .map(|e| SearchHit {
            passage_id: e.id.to_string(),
            score: e.score.as_f64(),
        })
        .collect())
}

/// Per-query relevant passage ids.
pub type RelevanceMap = BTreeMap<String, BTreeSet<String>>;

fn relevant_for<'a>(
    relevant: &'a RelevanceMap,
    result: &SearchResult,
) -> Result<&'a BTreeSet<String>> {
    let set = relevant
        .get(&result.query_id)
        .ok_or_else(|| Error::UnknownQueryId {
            id: result.query_id.clone(),
        })?;
    if set.is_empty() {
        return Err(Error::NoRelevantPassages {
            id: result.query_id.clone(),
        });
    }
    Ok(set)
}

/// 1-based rank of the first relevant passage in a result list.
pub fn first_relevant_rank(result: &SearchResult, relevant: &BTreeSet<String>) -> Option<usize> {
    result
        .hits
        .iter()
        .position(|hit| relevant.contains(&hit.passage_id))
        .map(|p| p + 1)
}

/// Fraction of queries whose top-k contains at least one relevant passage.
pub fn hits_at_k(results: &[SearchResult], relevant: &RelevanceMap, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no results to evaluate".to_string()));
    }
    let mut hits = 0usize;
    for result in results {
        let set = relevant_for(relevant, result)?;
        if matches!(first_relevant_rank(result, set), Some(rank) if rank <= k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Mean over queries of the reciprocal rank of the first relevant passage
/// within the top `n`, zero when absent.
pub fn mrr_at(results: &[SearchResult], relevant: &RelevanceMap, n: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no results to evaluate".to_string()));
    }
    let mut total = 0.0;
    for result in results {
        let set = relevant_for(relevant, result)?;
        if let Some(rank) = first_relevant_rank(result, set) {
            if rank <= n {
                total += 1.0 / rank as f64;
            }
        }
    }
    Ok(total / results.len() as f64)
}

/// How relevance was established for an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceMode {
    /// A passage is relevant iff it is a labeled positive of the query.
    LabeledPositive,
    /// A passage is relevant iff its body contains a gold answer string
    /// (token-level containment after normalization).
    AnswerString,
}

/// hits@k curve, MRR figures, and per-query first-relevant ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub relevance_mode: RelevanceMode,
    pub hits_at_k: BTreeMap<usize, f64>,
    pub mrr_at: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub first_relevant_rank: Option<usize>,
}

/// Evaluate results against a relevance map at the given cutoffs.
pub fn evaluate(
    results: &[SearchResult],
    relevant: &RelevanceMap,
    hits_cutoffs: &[usize],
    mrr_cutoffs: &[usize],
    mode: RelevanceMode,
) -> Result<EvalReport> {
    let mut hits = BTreeMap::new();
    for &k in hits_cutoffs {
        hits.insert(k, hits_at_k(results, relevant, k)?);
    }
    let mut mrr = BTreeMap::new();
    for &n in mrr_cutoffs {
        mrr.insert(n, mrr_at(results, relevant, n)?);
    }
    let mut per_query = Vec::with_capacity(results.len());
    for result in results {
        let set = relevant_for(relevant, result)?;
        per_query.push(QueryOutcome {
            query_id: result.query_id.clone(),
            first_relevant_rank: first_relevant_rank(result, set),
        });
    }
    Ok(EvalReport {
        relevance_mode: mode,
        hits_at_k: hits,
        mrr_at: mrr,
        per_query,
    })
}

fn lower_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token-level containment of a normalized answer in a passage body (the
/// open-domain QA hit convention).
pub fn contains_answer(body: &str, answer: &str) -> bool {
    let body_tokens = lower_tokens(body);
    let answer_tokens = lower_tokens(answer);
    if answer_tokens.is_empty() || answer_tokens.len() > body_tokens.len() {
        return false;
    }
    body_tokens
        .windows(answer_tokens.len())
        .any(|window| window == answer_tokens.as_slice())
}

/// Relevance map from labeled positives. Query ids are assigned positional
/// (`q0`, `q1`, …) to match [`results_for_queries`].
pub fn relevance_from_labels(examples: &[QAExample]) -> Result<RelevanceMap> {
    let mut map = RelevanceMap::new();
    for (i, example) in examples.iter().enumerate() {
        let ids: BTreeSet<String> = example
            .positive_passages
            .iter()
            .map(|p| p.id.clone())
            .collect();
        if ids.is_empty() {
            return Err(Error::NoRelevantPassages {
                id: format!("q{i}"),
            });
        }
        map.insert(format!("q{i}"), ids);
    }
    Ok(map)
}

/// Relevance map by answer-string containment over the corpus.
pub fn relevance_from_answers(examples: &[QAExample], corpus: &Corpus) -> Result<RelevanceMap> {
    let mut map = RelevanceMap::new();
    for (i, example) in examples.iter().enumerate() {
        let ids: BTreeSet<String> = corpus
            .passages
            .iter()
            .filter(|p| {
                example
                    .answers
                    .iter()
                    .any(|answer| contains_answer(&p.body, answer))
            })
            .map(|p| p.id.clone())
            .collect();
        if ids.is_empty() {
            return Err(Error::NoRelevantPassages {
                id: format!("q{i}"),
            });
        }
        map.insert(format!("q{i}"), ids);
    }
    Ok(map)
}

/// Encode and search every example's question, assigning positional query
/// ids `q0`, `q1`, ….
pub fn results_for_queries<S: Scalar>(
    query_encoder: &EncoderModel<S>,
    tokenizer: &Tokenizer,
    examples: &[QAExample],
    index: &EmbeddingMatrix<S>,
    k: usize,
) -> Result<Vec<SearchResult>> {
    let mut results = Vec::with_capacity(examples.len());
    for (i, example) in examples.iter().enumerate() {
        let query = query_encoder.embed(tokenizer, &example.question)?;
        results.push(SearchResult {
            query_id: format!("q{i}"),
            hits: search(index, &query, k)?,
        });
    }
    Ok(results)
}

const EMBEDDING_MAGIC: &[u8; 8] = b"ETEMB001";
const EMBEDDING_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    version: u32,
    n: usize,
    d: usize,
}

/// Write an embedding file: header `{version, n, d}`, row-major `f32`
/// payload, then the id table.
pub fn write_embeddings<S: Scalar>(path: &Path, matrix: &EmbeddingMatrix<S>) -> Result<()> {
    let display = path.display().to_string();
    let header = EmbeddingHeader {
        version: EMBEDDING_VERSION,
        n: matrix.len(),
        d: matrix.dim(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Pipeline(e.to_string()))?;
    let ids_bytes = serde_json::to_vec(matrix.ids()).map_err(|e| Error::Pipeline(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(EMBEDDING_MAGIC)
        .and_then(|_| writer.write_all(&(header_bytes.len() as u32).to_le_bytes()))
        .and_then(|_| writer.write_all(&header_bytes))
        .map_err(|e| Error::io(&display, e))?;
    for &v in &matrix.vectors {
        writer
            .write_all(&(v.as_f64() as f32).to_le_bytes())
            .map_err(|e| Error::io(&display, e))?;
    }
    writer
        .write_all(&(ids_bytes.len() as u32).to_le_bytes())
        .and_then(|_| writer.write_all(&ids_bytes))
        .map_err(|e| Error::io(&display, e))?;
    writer.flush().map_err(|e| Error::io(&display, e))
}

/// Read an embedding file written by [`write_embeddings`].
pub fn read_embeddings<S: Scalar>(path: &Path) -> Result<EmbeddingMatrix<S>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|e| Error::io(&display, e))?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::Pipeline(format!("{display}: not an embedding file")));
    }
    let mut len = [0u8; 4];
    reader
        .read_exact(&mut len)
        .map_err(|e| Error::io(&display, e))?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    reader
        .read_exact(&mut header_bytes)
        .map_err(|e| Error::io(&display, e))?;
    let header: EmbeddingHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Pipeline(e.to_string()))?;
    if header.version != EMBEDDING_VERSION {
        return Err(Error::Pipeline(format!(
            "unsupported embedding file version {}",
            header.version
        )));
    }
    let mut vectors = Vec::with_capacity(header.n * header.d);
    let mut buf = [0u8; 4];
    for _ in 0..header.n * header.d {
        reader
            .read_exact(&mut buf)
            .map_err(|e| Error::io(&display, e))?;
        vectors.push(S::of_f64(f32::from_le_bytes(buf) as f64));
    }
    reader
        .read_exact(&mut len)
        .map_err(|e| Error::io(&display, e))?;
    let mut ids_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    reader
        .read_exact(&mut ids_bytes)
        .map_err(|e| Error::io(&display, e))?;
    let ids: Vec<String> =
        serde_json::from_slice(&ids_bytes).map_err(|e| Error::Pipeline(e.to_string()))?;
    if ids.len() != header.n {
        return Err(Error::Pipeline(format!(
            "id table length {} does not match header n {}",
            ids.len(),
            header.n
        )));
    }
    EmbeddingMatrix::new(ids, header.d, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn matrix(rows: Vec<(&str, Vec<f64>)>) -> EmbeddingMatrix<f64> {
        let dim = rows[0].1.len();
        let ids = rows.iter().map(|(id, _)| id.to_string()).collect();
        let vectors = rows.into_iter().flat_map(|(_, v)| v).collect();
        EmbeddingMatrix::new(ids, dim, vectors).unwrap()
    }

    /// Full argsort with the same tie rule, used as the oracle.
    fn brute_force(index: &EmbeddingMatrix<f64>, query: &[f64], k: usize) -> Vec<SearchHit> {
        let mut scored: Vec<(f64, &str)> = (0..index.len())
            .map(|i| {
                let score: f64 = query.iter().zip(index.row(i)).map(|(q, v)| q * v).sum();
                (score, index.ids()[i].as_str())
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.1.cmp(b.1))
        });
        scored
            .into_iter()
            .take(k)
            .map(|(score, id)| SearchHit {
                passage_id: id.to_string(),
                score,
            })
            .collect()
    }

    #[test]
    fn unit_vector_match_ranks_first() {
        let index = matrix(vec![
            ("a", vec![1.0, 0.0, 0.0]),
            ("b", vec![0.0, 1.0, 0.0]),
            ("c", vec![0.0, 0.0, 1.0]),
        ]);
        let hits = search(&index, &[0.0, 1.0, 0.0], 2).unwrap();
        assert_eq!(hits[0].passage_id, "b");
        assert_eq!(hits[0].score, 1.0);
        assert_eq!(hits.len(), 2);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let index = matrix(vec![
            ("b", vec![1.0, 0.0]),
            ("a", vec![1.0, 0.0]),
            ("c", vec![0.5, 0.0]),
        ]);
        let hits = search(&index, &[1.0, 0.0], 3).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| h.passage_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn k_exceeding_corpus_returns_all() {
        let index = matrix(vec![("a", vec![1.0]), ("b", vec![2.0])]);
        let hits = search(&index, &[1.0], 10).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].passage_id, "b");
    }

    #[test]
    fn search_matches_brute_force_on_random_instances() {
        let mut rng = StdRng::seed_from_u64(21);
        for round in 0..60 {
            let n = rng.gen_range(1..120);
            let d = rng.gen_range(1..32);
            // Quantized coordinates force plenty of exact ties.
            let rows: Vec<(String, Vec<f64>)> = (0..n)
                .map(|i| {
                    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-2..3) as f64).collect();
                    (format!("p{i:03}"), v)
                })
                .collect();
            let ids: Vec<String> = rows.iter().map(|(id, _)| id.clone()).collect();
            let vectors: Vec<f64> = rows.iter().flat_map(|(_, v)| v.clone()).collect();
            let index = EmbeddingMatrix::new(ids, d, vectors).unwrap();
            let query: Vec<f64> = (0..d).map(|_| rng.gen_range(-2..3) as f64).collect();
            let k = rng.gen_range(1..=n + 2);
            assert_eq!(
                search(&index, &query, k).unwrap(),
                brute_force(&index, &query, k),
                "round {round}: n={n} d={d} k={k}"
            );
        }
    }

    fn result(query_id: &str, ids: &[&str]) -> SearchResult {
        SearchResult {
            query_id: query_id.to_string(),
            hits: ids
                .iter()
                .enumerate()
                .map(|(i, id)| SearchHit {
                    passage_id: id.to_string(),
                    score: -(i as f64),
                })
                .collect(),
        }
    }

    fn relevance(entries: &[(&str, &[&str])]) -> RelevanceMap {
        entries
            .iter()
            .map(|(q, ids)| {
                (
                    q.to_string(),
                    ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
                )
            })
            .collect()
    }

    #[test]
    fn hits_and_mrr_reference_cases() {
        let results = vec![result("q0", &["x", "y", "gold", "z"])];
        let relevant = relevance(&[("q0", &["gold"])]);
        assert_eq!(hits_at_k(&results, &relevant, 1).unwrap(), 0.0);
        assert_eq!(hits_at_k(&results, &relevant, 5).unwrap(), 1.0);

        // Two queries with first-relevant ranks 2 and 4 at N=10.
        let results = vec![
            result("q0", &["x", "gold", "y"]),
            result("q1", &["a", "b", "c", "gold2"]),
        ];
        let relevant = relevance(&[("q0", &["gold"]), ("q1", &["gold2"])]);
        assert_eq!(mrr_at(&results, &relevant, 10).unwrap(), 0.375);

        // First relevant at rank 11 contributes 0 at N=10.
        let long: Vec<String> = (0..10).map(|i| format!("f{i}")).collect();
        let mut ids: Vec<&str> = long.iter().map(|s| s.as_str()).collect();
        ids.push("gold");
        let results = vec![result("q0", &ids)];
        let relevant = relevance(&[("q0", &["gold"])]);
        assert_eq!(mrr_at(&results, &relevant, 10).unwrap(), 0.0);
        assert_eq!(mrr_at(&results, &relevant, 11).unwrap(), 1.0 / 11.0);

        // All positives ranked first.
        let results = vec![result("q0", &["gold", "x"]), result("q1", &["gold2", "y"])];
        let relevant = relevance(&[("q0", &["gold"]), ("q1", &["gold2"])]);
        for k in [1, 5, 20, 100] {
            assert_eq!(hits_at_k(&results, &relevant, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn unknown_query_id_is_an_error() {
        let results = vec![result("mystery", &["a"])];
        let relevant = relevance(&[("q0", &["a"])]);
        assert!(matches!(
            hits_at_k(&results, &relevant, 1).unwrap_err(),
            Error::UnknownQueryId { id } if id == "mystery"
        ));
    }

    #[test]
    fn metrics_match_recount_oracle_on_random_configurations() {
        let mut rng = StdRng::seed_from_u64(33);
        for _ in 0..60 {
            let queries = rng.gen_range(1..12);
            let corpus: Vec<String> = (0..30).map(|i| format!("p{i}")).collect();
            let mut results = Vec::new();
            let mut relevant = RelevanceMap::new();
            for q in 0..queries {
                let mut order: Vec<&String> = corpus.iter().collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                let depth = rng.gen_range(1..order.len());
                results.push(SearchResult {
                    query_id: format!("q{q}"),
                    hits: order[..depth]
                        .iter()
                        .enumerate()
                        .map(|(i, id)| SearchHit {
                            passage_id: id.to_string(),
                            score: -(i as f64),
                        })
                        .collect(),
                });
                let n_rel = rng.gen_range(1..5);
                let set: BTreeSet<String> = (0..n_rel)
                    .map(|_| corpus[rng.gen_range(0..corpus.len())].clone())
                    .collect();
                relevant.insert(format!("q{q}"), set);
            }
            for k in [1, 3, 10] {
                // Independent recount: per query, scan prefix for any
                // relevant id.
                let mut expected_hits = 0usize;
                let mut expected_mrr = 0.0;
                for result in &results {
                    let set = &relevant[&result.query_id];
                    let mut first = None;
                    for (i, hit) in result.hits.iter().enumerate() {
                        if set.contains(&hit.passage_id) {
                            first = Some(i + 1);
                            break;
                        }
                    }
                    if let Some(rank) = first {
                        if rank <= k {
                            expected_hits += 1;
                            expected_mrr += 1.0 / rank as f64;
                        }
                    }
                }
                let expected_hits = expected_hits as f64 / results.len() as f64;
                let expected_mrr = expected_mrr / results.len() as f64;
                assert_eq!(hits_at_k(&results, &relevant, k).unwrap(), expected_hits);
                assert_eq!(mrr_at(&results, &relevant, k).unwrap(), expected_mrr);
            }
        }
    }

    #[test]
    fn metric_bounds_and_monotonicity() {
        let results = vec![
            result("q0", &["a", "b", "c", "gold"]),
            result("q1", &["gold2", "x"]),
        ];
        let relevant = relevance(&[("q0", &["gold"]), ("q1", &["gold2"])]);
        let mut previous = 0.0;
        for k in 1..6 {
            let h = hits_at_k(&results, &relevant, k).unwrap();
            assert!((0.0..=1.0).contains(&h));
            assert!(h >= previous);
            previous = h;
        }
        let mut previous = 0.0;
        for n in 1..6 {
            let m = mrr_at(&results, &relevant, n).unwrap();
            assert!((0.0..=1.0).contains(&m));
            assert!(m >= previous);
            previous = m;
        }
    }

    #[test]
    fn permuting_corpus_rows_leaves_metrics_unchanged() {
        let mut rng = StdRng::seed_from_u64(5);
        let rows: Vec<(String, Vec<f64>)> = (0..40)
            .map(|i| {
                (
                    format!("p{i:02}"),
                    (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let query: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let build = |rows: &[(String, Vec<f64>)]| {
            EmbeddingMatrix::new(
                rows.iter().map(|(id, _)| id.clone()).collect(),
                8,
                rows.iter().flat_map(|(_, v)| v.clone()).collect(),
            )
            .unwrap()
        };
        let base = search(&build(&rows), &query, 10).unwrap();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(0, 17);
        let permuted = search(&build(&shuffled), &query, 10).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn answer_containment_token_level() {
        assert!(contains_answer("The wall fell in 1989 .", "1989"));
        assert!(contains_answer(
            "Neil Armstrong walked there",
            "neil armstrong"
        ));
        assert!(!contains_answer("the year was 19890", "1989"));
        assert!(!contains_answer("nothing here", "absent"));
        assert!(!contains_answer("short", "much longer answer text"));
    }

    #[test]
    fn embedding_file_round_trip() {
        let index = matrix(vec![
            ("a", vec![0.25, -1.5, 3.0]),
            ("b", vec![0.0, 2.5, -0.125]),
        ]);
        let file = tempfile::NamedTempFile::new().unwrap();
        write_embeddings(file.path(), &index).unwrap();
        let reloaded: EmbeddingMatrix<f64> = read_embeddings(file.path()).unwrap();
        assert_eq!(reloaded.ids(), index.ids());
        assert_eq!(reloaded.dim(), index.dim());
        // Values chosen representable in f32.
        assert_eq!(reloaded.vectors, index.vectors);
    }

    #[test]
    fn encode_corpus_batching_consistency_and_duplicates() {
        use crate::data::PassageRecord;
        use crate::encoder::{EncoderConfig, EncoderModel};
        use crate::tokenizer::Tokenizer;

        let bodies = [
            "the falcon museum opened in the year 1901",
            "the willow bridge closed for repairs",
            "the falcon museum opened in the year 1901",
            "an unrelated pamphlet discusses taxes",
            "the ember garden expanded twice",
        ];
        let tokenizer = Tokenizer::build_from_texts(bodies.iter().copied(), 500).unwrap();
        let encoder: EncoderModel<f32> =
            EncoderModel::new(EncoderConfig::tiny(tokenizer.vocab_size()), 4).unwrap();
        let corpus = Corpus::from_passages(
            bodies
                .iter()
                .enumerate()
                .map(|(i, body)| PassageRecord {
                    id: format!("p{i}"),
                    title: None,
                    body: body.to_string(),
                    meta: None,
                })
                .collect(),
        )
        .unwrap();

        let single = encode_corpus(&encoder, &tokenizer, &corpus, 1).unwrap();
        let batched = encode_corpus(&encoder, &tokenizer, &corpus, 8).unwrap();
        assert_eq!(single.ids(), batched.ids());
        for i in 0..single.len() {
            for (a, b) in single.row(i).iter().zip(batched.row(i)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        assert_eq!(single.len(), 5);
        assert_eq!(single.dim(), encoder.embedding_dim());
        // Duplicate passages embed to identical rows.
        assert_eq!(single.row(0), single.row(2));
    }
}
