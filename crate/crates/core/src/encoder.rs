//! A small trainable transformer encoder.
//!
//! Pre-norm multi-head self-attention blocks over token + position
//! embeddings, a tied-embedding MLM head for masked prediction, and a
//! CLS-pooled single-vector embedding for retrieval. The forward pass is
//! expressed as free functions over a [`Tape`] and a parameter index, so
//! the same code serves a standalone model and the towers of a merged
//! dual-encoder store.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PromptedInstance;
use crate::math::{Mat, ParamId, ParamStore, Source, Tape};
use crate::scalar::Scalar;
use crate::tokenizer::Tokenizer;

/// Architecture hyperparameters. The embedding dimension is fixed for a
/// model's lifetime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Feed-forward inner dimension as a multiple of `hidden`.
    pub ff_multiplier: usize,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale default: 4 layers, hidden 256, 4 heads, 256-token limit.
    pub fn desk_default(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 4,
            hidden: 256,
            heads: 4,
            vocab_size,
            max_len: 256,
            ff_multiplier: 4,
            layer_norm_eps: 1e-5,
        }
    }

    /// Tiny configuration for oracle tests: 2 layers, hidden 32.
    pub fn tiny(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            vocab_size,
            max_len: 64,
            ff_multiplier: 4,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidArgument(
                "layers, hidden, heads, and vocab_size must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Parameter ids of one attention block.
#[derive(Debug, Clone)]
pub struct LayerIndex {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub ff_in_w: ParamId,
    pub ff_in_b: ParamId,
    pub ff_out_w: ParamId,
    pub ff_out_b: ParamId,
}

/// Parameter ids of a full encoder within some [`ParamStore`].
#[derive(Debug, Clone)]
pub struct EncoderIndex {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<LayerIndex>,
    pub final_gamma: ParamId,
    pub final_beta: ParamId,
    pub mlm_bias: ParamId,
}

/// Canonical parameter names and shapes, in registration order.
fn parameter_shapes(config: &EncoderConfig) -> Vec<(String, usize, usize)> {
    let d = config.hidden;
    let ff = config.ff_multiplier * d;
    let mut shapes = vec![
        ("embeddings.token".to_string(), config.vocab_size, d),
        ("embeddings.position".to_string(), config.max_len, d),
    ];
    for l in 0..config.layers {
        let p = |suffix: &str| format!("layer.{l}.{suffix}");
        shapes.extend([
            (p("ln1.gamma"), 1, d),
            (p("ln1.beta"), 1, d),
            (p("attn.q.weight"), d, d),
            (p("attn.q.bias"), 1, d),
            (p("attn.k.weight"), d, d),
            (p("attn.k.bias"), 1, d),
            (p("attn.v.weight"), d, d),
            (p("attn.v.bias"), 1, d),
            (p("attn.out.weight"), d, d),
            (p("attn.out.bias"), 1, d),
            (p("ln2.gamma"), 1, d),
            (p("ln2.beta"), 1, d),
            (p("ff.in.weight"), d, ff),
            (p("ff.in.bias"), 1, ff),
            (p("ff.out.weight"), ff, d),
            (p("ff.out.bias"), 1, d),
        ]);
    }
    shapes.extend([
        ("final_ln.gamma".to_string(), 1, d),
        ("final_ln.beta".to_string(), 1, d),
        ("mlm.bias".to_string(), 1, config.vocab_size),
    ]);
    shapes
}

fn index_from_ids(config: &EncoderConfig, ids: &[ParamId]) -> EncoderIndex {
    let mut iter = ids.iter().copied();
    let mut next = || iter.next().expect("id list matches parameter_shapes");
    let token_embedding = next();
    let position_embedding = next();
    let layers = (0..config.layers)
        .map(|_| LayerIndex {
            ln1_gamma: next(),
            ln1_beta: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_gamma: next(),
            ln2_beta: next(),
            ff_in_w: next(),
            ff_in_b: next(),
            ff_out_w: next(),
            ff_out_b: next(),
        })
        .collect();
    EncoderIndex {
        token_embedding,
        position_embedding,
        layers,
        final_gamma: next(),
        final_beta: next(),
        mlm_bias: next(),
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with(".gamma")
}

fn is_bias_like(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".gamma")
}

/// Register freshly initialized encoder parameters under `prefix` and
/// return their index. Weights are N(0, 0.02²), gains one, biases zero.
pub fn init_parameters<S: Scalar>(
    store: &mut ParamStore<S>,
    config: &EncoderConfig,
    prefix: &str,
    seed: u64,
) -> EncoderIndex {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut normal = move || -> f64 {
        // Box-Muller; u1 in (0, 1] avoids ln(0).
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut ids = Vec::new();
    for (name, rows, cols) in parameter_shapes(config) {
        let value = if is_gain(&name) {
            Mat::from_fn(rows, cols, |_, _| S::one())
        } else if is_bias_like(&name) {
            Mat::zeros(rows, cols)
        } else {
            Mat::from_fn(rows, cols, |_, _| S::of_f64(normal() * 0.02))
        };
        ids.push(store.add(format!("{prefix}{name}"), value));
    }
    index_from_ids(config, &ids)
}

/// Copy an existing encoder's parameters into `store` under `prefix`.
pub fn clone_parameters<S: Scalar>(
    source_store: &ParamStore<S>,
    source_index: &EncoderIndex,
    config: &EncoderConfig,
    store: &mut ParamStore<S>,
    prefix: &str,
) -> EncoderIndex {
    let names = parameter_shapes(config);
    let source_ids = source_index.param_ids();
    let mut ids = Vec::with_capacity(source_ids.len());
    for ((name, _, _), src_id) in names.into_iter().zip(source_ids) {
        let value = source_store.value(src_id).clone();
        ids.push(store.add(format!("{prefix}{name}"), value));
    }
    index_from_ids(config, &ids)
}

impl EncoderIndex {
    /// All parameter ids in canonical registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        for layer in &self.layers {
            ids.extend([
                layer.ln1_gamma,
                layer.ln1_beta,
                layer.wq,
                layer.bq,
                layer.wk,
                layer.bk,
                layer.wv,
                layer.bv,
                layer.wo,
                layer.bo,
                layer.ln2_gamma,
                layer.ln2_beta,
                layer.ff_in_w,
                layer.ff_in_b,
                layer.ff_out_w,
                layer.ff_out_b,
            ]);
        }
        ids.extend([self.final_gamma, self.final_beta, self.mlm_bias]);
        ids
    }
}

fn check_ids(config: &EncoderConfig, token_ids: &[u32]) -> Result<()> {
    if token_ids.is_empty() {
        return Err(Error::EmptyText);
    }
    if token_ids.len() > config.max_len {
        return Err(Error::SequenceTooLong {
            len: token_ids.len(),
            max_len: config.max_len,
        });
    }
    for &id in token_ids {
        if id as usize >= config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: config.vocab_size,
            });
        }
    }
    Ok(())
}

/// Final hidden states (`T×d`, layer-normed) for a token sequence.
pub fn forward_hidden<S: Scalar>(
    tape: &mut Tape<'_, S>,
    config: &EncoderConfig,
    index: &EncoderIndex,
    token_ids: &[u32],
) -> Result<Source> {
    check_ids(config, token_ids)?;
    let seq_len = token_ids.len();
    let positions: Vec<usize> = (0..seq_len).collect();
    let indices: Vec<usize> = token_ids.iter().map(|&id| id as usize).collect();
    let eps = S::of_f64(config.layer_norm_eps);

    let tok = tape.gather_rows(index.token_embedding.into(), &indices);
    let pos = tape.gather_rows(index.position_embedding.into(), &positions);
    let mut hidden = tape.add(tok, pos);

    let head_dim = config.head_dim();
    let attn_scale = S::of_f64(1.0 / (head_dim as f64).sqrt());
    for layer in &index.layers {
        // Pre-norm attention block with residual.
        let normed = tape.layer_norm(hidden, layer.ln1_gamma.into(), layer.ln1_beta.into(), eps);
        let q_lin = tape.matmul(normed, layer.wq.into());
        let q = tape.add_row(q_lin, layer.bq.into());
        let k_lin = tape.matmul(normed, layer.wk.into());
        let k = tape.add_row(k_lin, layer.bk.into());
        let v_lin = tape.matmul(normed, layer.wv.into());
        let v = tape.add_row(v_lin, layer.bv.into());

        let mut head_outputs = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let qh = tape.cols(q, lo, hi);
            let kh = tape.cols(k, lo, hi);
            let vh = tape.cols(v, lo, hi);
            let scores = tape.matmul_nt(qh, kh);
            let scaled = tape.scale(scores, attn_scale);
            let attn = tape.softmax_rows(scaled);
            head_outputs.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat_cols(&head_outputs);
        let proj = tape.matmul(merged, layer.wo.into());
        let attn_out = tape.add_row(proj, layer.bo.into());
        hidden = tape.add(hidden, attn_out);

        // Pre-norm feed-forward block with residual.
        let normed2 = tape.layer_norm(hidden, layer.ln2_gamma.into(), layer.ln2_beta.into(), eps);
        let ff_lin = tape.matmul(normed2, layer.ff_in_w.into());
        let ff_pre = tape.add_row(ff_lin, layer.ff_in_b.into());
        let ff_act = tape.gelu(ff_pre);
        let ff_proj = tape.matmul(ff_act, layer.ff_out_w.into());
        let ff_out = tape.add_row(ff_proj, layer.ff_out_b.into());
        hidden = tape.add(hidden, ff_out);
    }
    Ok(tape.layer_norm(
        hidden,
        index.final_gamma.into(),
        index.final_beta.into(),
        eps,
    ))
}

/// Per-position log-probabilities over the vocabulary (`T×V`). The decoder
/// is the transposed token embedding plus a learned output bias.
pub fn mlm_log_probs<S: Scalar>(
    tape: &mut Tape<'_, S>,
    config: &EncoderConfig,
    index: &EncoderIndex,
    token_ids: &[u32],
) -> Result<Source> {
    let hidden = forward_hidden(tape, config, index, token_ids)?;
    let logits = tape.matmul_nt(hidden, index.token_embedding.into());
    let shifted = tape.add_row(logits, index.mlm_bias.into());
    Ok(tape.log_softmax_rows(shifted))
}

/// CLS-pooled embedding (`1×d`): the hidden state of the leading
/// sequence-start token.
pub fn cls_embedding<S: Scalar>(
    tape: &mut Tape<'_, S>,
    config: &EncoderConfig,
    index: &EncoderIndex,
    token_ids: &[u32],
) -> Result<Source> {
    let hidden = forward_hidden(tape, config, index, token_ids)?;
    Ok(tape.row(hidden, 0))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ETCKPT01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: EncoderConfig,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

/// A trainable text encoder owning its parameters.
#[derive(Debug, Clone)]
pub struct EncoderModel<S: Scalar> {
    config: EncoderConfig,
    store: ParamStore<S>,
    index: EncoderIndex,
}

impl<S: Scalar> EncoderModel<S> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<EncoderModel<S>> {
        config.validate()?;
        let mut store = ParamStore::new();
        let index = init_parameters(&mut store, &config, "", seed);
        Ok(EncoderModel {
            config,
            store,
            index,
        })
    }

    /// Assemble a model from an existing store and index (e.g. a tower
    /// split out of a merged dual-encoder store).
    pub fn from_parts(
        config: EncoderConfig,
        store: ParamStore<S>,
        index: EncoderIndex,
    ) -> EncoderModel<S> {
        EncoderModel {
            config,
            store,
            index,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn index(&self) -> &EncoderIndex {
        &self.index
    }

    /// Embedding dimension of [`EncoderModel::embed`] outputs.
    pub fn embedding_dim(&self) -> usize {
        self.config.hidden
    }

    /// Per-position log-probability vectors for a masked instance. Each row
    /// sums to one after exponentiation.
    pub fn mlm_logits(&self, instance: &PromptedInstance) -> Result<Mat<S>> {
        let mut tape = Tape::new(&self.store);
        let out = mlm_log_probs(&mut tape, &self.config, &self.index, &instance.token_ids)?;
        Ok(tape.value(out).clone())
    }

    /// Embed pre-tokenized ids; the CLS row of the final hidden states.
    pub fn embed_ids(&self, token_ids: &[u32]) -> Result<Vec<S>> {
        let mut tape = Tape::new(&self.store);
        let out = cls_embedding(&mut tape, &self.config, &self.index, token_ids)?;
        Ok(tape.value(out).row(0).to_vec())
    }

    /// Embed a text: `[CLS] <words> [SEP]` through the encoder, CLS pooled.
    pub fn embed(&self, tokenizer: &Tokenizer, text: &str) -> Result<Vec<S>> {
        let ids = frame_text(tokenizer, text, self.config.max_len)?;
        self.embed_ids(&ids)
    }

    /// Serialize config and named tensors. The payload stores every value
    /// as a little-endian `f64`, which round-trips `f32` and `f64` models
    /// bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let tensors: Vec<TensorMeta> = self
            .store
            .iter()
            .map(|(name, mat)| TensorMeta {
                name: name.to_string(),
                rows: mat.rows(),
                cols: mat.cols(),
            })
            .collect();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        let header_bytes =
            serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let file = File::create(path).map_err(|e| Error::io(&display, e))?;
        let mut writer = BufWriter::new(file);
        writer
            .write_all(CHECKPOINT_MAGIC)
            .and_then(|_| writer.write_all(&(header_bytes.len() as u32).to_le_bytes()))
            .and_then(|_| writer.write_all(&header_bytes))
            .map_err(|e| Error::io(&display, e))?;
        for (_, mat) in self.store.iter() {
            for &v in mat.data() {
                writer
                    .write_all(&v.as_f64().to_le_bytes())
                    .map_err(|e| Error::io(&display, e))?;
            }
        }
        writer.flush().map_err(|e| Error::io(&display, e))
    }

    /// Load a checkpoint saved by [`EncoderModel::save`] (or any container
    /// in the same format with compatible shapes — the hook for dropping in
    /// externally pretrained weights).
    pub fn load(path: &Path) -> Result<EncoderModel<S>> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&display, e))?;
        let mut reader = BufReader::new(file);
        let mut magic = [0u8; 8];
        reader
            .read_exact(&mut magic)
            .map_err(|e| Error::io(&display, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{display}: not an encoder checkpoint"
            )));
        }
        let mut len_bytes = [0u8; 4];
        reader
            .read_exact(&mut len_bytes)
            .map_err(|e| Error::io(&display, e))?;
        let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
        reader
            .read_exact(&mut header_bytes)
            .map_err(|e| Error::io(&display, e))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header_bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        header.config.validate()?;

        // Tensors are keyed by name so containers may order them freely.
        let mut tensors = std::collections::HashMap::new();
        for meta in &header.tensors {
            let mut data = Vec::with_capacity(meta.rows * meta.cols);
            let mut buf = [0u8; 8];
            for _ in 0..meta.rows * meta.cols {
                reader
                    .read_exact(&mut buf)
                    .map_err(|e| Error::io(&display, e))?;
                data.push(S::of_f64(f64::from_le_bytes(buf)));
            }
            tensors.insert(meta.name.clone(), Mat::from_vec(meta.rows, meta.cols, data));
        }

        let mut store = ParamStore::new();
        let mut ids = Vec::new();
        for (name, rows, cols) in parameter_shapes(&header.config) {
            let mat = tensors.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor {name:?} in {display}"))
            })?;
            if mat.rows() != rows || mat.cols() != cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {}x{}, expected {rows}x{cols}",
                    mat.rows(),
                    mat.cols()
                )));
            }
            ids.push(store.add(name, mat));
        }
        let index = index_from_ids(&header.config, &ids);
        Ok(EncoderModel {
            config: header.config,
            store,
            index,
        })
    }
}

/// Frame a text for embedding: `[CLS] <words> [SEP]`, truncated from the
/// right to fit `max_len`. Empty text is an error.
pub fn frame_text(tokenizer: &Tokenizer, text: &str, max_len: usize) -> Result<Vec<u32>> {
    let words = tokenizer.encode(text);
    if words.is_empty() {
        return Err(Error::EmptyText);
    }
    let budget = max_len.saturating_sub(2);
    let mut ids = Vec::with_capacity(words.len().min(budget) + 2);
    ids.push(tokenizer.cls_id);
    ids.extend(words.into_iter().take(budget));
    ids.push(tokenizer.sep_id);
    Ok(ids)
}
