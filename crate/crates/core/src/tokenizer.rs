//! Word-level tokenizer with a fixed special-token set.
//!
//! Vocabulary lives in a plain-text one-token-per-line file. Tokens are
//! whitespace-delimited words; out-of-vocabulary words map to `[UNK]`.
//! Because inputs are whitespace-normalized upstream, `decode(encode(t))`
//! is the identity on in-vocabulary text.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";

const SPECIAL_TOKENS: [&str; 5] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, MASK_TOKEN];

/// Token/id vocabulary with the special tokens required by masking and
/// sequence framing.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    pub pad_id: u32,
    pub unk_id: u32,
    pub cls_id: u32,
    pub sep_id: u32,
    pub mask_id: u32,
}

impl Tokenizer {
    fn from_tokens(tokens: Vec<String>) -> Result<Tokenizer> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, token) in tokens.iter().enumerate() {
            if token.is_empty() {
                return Err(Error::Vocabulary(format!("empty token at index {i}")));
            }
            if ids.insert(token.clone(), i as u32).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {token:?}")));
            }
        }
        let lookup = |t: &str| -> Result<u32> {
            ids.get(t).copied().ok_or_else(|| {
                Error::Vocabulary(format!("special token {t:?} missing from vocabulary"))
            })
        };
        let tokenizer = Tokenizer {
            pad_id: lookup(PAD_TOKEN)?,
            unk_id: lookup(UNK_TOKEN)?,
            cls_id: lookup(CLS_TOKEN)?,
            sep_id: lookup(SEP_TOKEN)?,
            mask_id: lookup(MASK_TOKEN)?,
            tokens,
            ids,
        };
        Ok(tokenizer)
    }

    /// Load a vocabulary from a one-token-per-line file. The five special
    /// tokens must be present.
    pub fn from_vocab_file(path: &Path) -> Result<Tokenizer> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(&display, e))?;
        let tokens: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&display, e))?
            .into_iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().to_string())
            .collect();
        Tokenizer::from_tokens(tokens)
    }

    /// Build a vocabulary from raw texts: specials first, then words by
    /// descending frequency (ties broken alphabetically), capped at
    /// `max_size` entries. Deterministic for a fixed input order.
    pub fn build_from_texts<'a, I>(texts: I, max_size: usize) -> Result<Tokenizer>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for text in texts {
            for word in text.split_whitespace() {
                if !SPECIAL_TOKENS.contains(&word) {
                    *counts.entry(word).or_insert(0) += 1;
                }
            }
        }
        let mut by_freq: Vec<(&str, u64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let budget = max_size.saturating_sub(SPECIAL_TOKENS.len());
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(by_freq.into_iter().take(budget).map(|(w, _)| w.to_string()))
            .collect();
        Tokenizer::from_tokens(tokens)
    }

    pub fn save_vocab_file(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(&display, e))?;
        let mut writer = BufWriter::new(file);
        for token in &self.tokens {
            writeln!(writer, "{token}").map_err(|e| Error::io(&display, e))?;
        }
        writer.flush().map_err(|e| Error::io(&display, e))
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad_id
            || id == self.unk_id
            || id == self.cls_id
            || id == self.sep_id
            || id == self.mask_id
    }

    /// Encode whitespace-delimited words to ids, `[UNK]` for unknowns.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.ids.get(w).copied().unwrap_or(self.unk_id))
            .collect()
    }

    /// Encode and report each word's byte extent in the input.
    pub fn encode_with_offsets(&self, text: &str) -> (Vec<u32>, Vec<(usize, usize)>) {
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        let mut rest = text;
        let mut base = 0;
        while let Some(start_rel) = rest.find(|c: char| !c.is_whitespace()) {
            let start = base + start_rel;
            let word_rest = &rest[start_rel..];
            let end_rel = word_rest
                .find(char::is_whitespace)
                .unwrap_or(word_rest.len());
            let word = &word_rest[..end_rel];
            ids.push(self.ids.get(word).copied().unwrap_or(self.unk_id));
            offsets.push((start, start + word.len()));
            base = start + word.len();
            rest = &text[base..];
        }
        (ids, offsets)
    }

    /// Decode ids back to space-joined tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token_of(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_tokenizer() -> Tokenizer {
        Tokenizer::build_from_texts(["the dog runs fast", "the cat runs"], 100).unwrap()
    }

    #[test]
    fn special_ids_distinct() {
        let tok = toy_tokenizer();
        let ids = [tok.pad_id, tok.unk_id, tok.cls_id, tok.sep_id, tok.mask_id];
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                assert_ne!(ids[i], ids[j]);
            }
        }
    }

    #[test]
    fn encode_decode_identity_in_vocab() {
        let tok = toy_tokenizer();
        let text = "the cat runs fast";
        assert_eq!(tok.decode(&tok.encode(text)), text);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tok = toy_tokenizer();
        let ids = tok.encode("the zebra runs");
        assert_eq!(ids[1], tok.unk_id);
    }

    #[test]
    fn frequency_then_alphabetical_order() {
        let tok = Tokenizer::build_from_texts(["b b a a c"], 100).unwrap();
        // a and b tie at 2; alphabetical puts a first, then b, then c.
        assert_eq!(tok.token_of(5), Some("a"));
        assert_eq!(tok.token_of(6), Some("b"));
        assert_eq!(tok.token_of(7), Some("c"));
    }

    #[test]
    fn max_size_caps_vocabulary() {
        let tok = Tokenizer::build_from_texts(["a b c d e f g h"], 7).unwrap();
        assert_eq!(tok.vocab_size(), 7);
        assert_eq!(tok.id_of("c"), None);
    }

    #[test]
    fn offsets_cover_exact_words() {
        let tok = toy_tokenizer();
        let text = "the  dog   runs";
        let (ids, offsets) = tok.encode_with_offsets(text);
        assert_eq!(ids.len(), 3);
        let words: Vec<&str> = offsets.iter().map(|&(s, e)| &text[s..e]).collect();
        assert_eq!(words, vec!["the", "dog", "runs"]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let tok = toy_tokenizer();
        let file = tempfile::NamedTempFile::new().unwrap();
        tok.save_vocab_file(file.path()).unwrap();
        let reloaded = Tokenizer::from_vocab_file(file.path()).unwrap();
        assert_eq!(reloaded.vocab_size(), tok.vocab_size());
        assert_eq!(reloaded.encode("the dog"), tok.encode("the dog"));
    }

    #[test]
    fn missing_special_token_rejected() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(b"[PAD]\n[UNK]\n[CLS]\n[SEP]\nword\n")
            .unwrap();
        let err = Tokenizer::from_vocab_file(file.path()).unwrap_err();
        assert!(matches!(err, Error::Vocabulary(msg) if msg.contains("[MASK]")));
    }

    #[test]
    fn duplicate_token_rejected() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(b"[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\nx\nx\n")
            .unwrap();
        assert!(Tokenizer::from_vocab_file(file.path()).is_err());
    }
}
