//! Word-level vocabulary and fixed-length encoding.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
/// Number of reserved ids; the first ordinary token has this id.
pub const RESERVED: usize = 5;

const RESERVED_NAMES: [&str; RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < RESERVED
}

/// Lowercases and splits text into words: maximal alphanumeric runs, with
/// every other non-whitespace character standing alone.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_ordinary(words: Vec<String>) -> Result<Vocabulary> {
        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::with_capacity(words.len());
        for w in words {
            if w.is_empty() || w.chars().any(char::is_whitespace) || RESERVED_NAMES.contains(&w.as_str()) {
                return Err(Error::InvalidConfig(format!("invalid vocabulary token `{w}`")));
            }
            let id = tokens.len() as TokenId;
            if index.insert(w.clone(), id).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary token `{w}`")));
            }
            tokens.push(w);
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Ids of every word in `text`, unknown words mapping to UNK.
    pub fn lookup(&self, text: &str) -> Vec<TokenId> {
        normalize(text).iter().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Appends any of `words` not yet present, in the order given.
    pub fn extended<S: AsRef<str>>(mut self, words: &[S]) -> Vocabulary {
        for w in words {
            for tok in normalize(w.as_ref()) {
                if !self.index.contains_key(&tok) {
                    let id = self.tokens.len() as TokenId;
                    self.index.insert(tok.clone(), id);
                    self.tokens.push(tok);
                }
            }
        }
        self
    }

    /// One ordinary token per line; line `n` (from zero) holds id `n + 5`.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for tok in &self.tokens[RESERVED..] {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Inverse of [`Vocabulary::write_to`]; `path` is only used in errors.
    pub fn read_from<R: BufRead>(r: R, path: &Path) -> Result<Vocabulary> {
        let words = r.lines().collect::<std::io::Result<Vec<_>>>().map_err(|e| Error::io(path, e))?;
        Vocabulary::from_ordinary(words)
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::read_from(std::io::BufReader::new(file), path)
    }
}

/// Builds a vocabulary of at most `max_size` ids (reserved ids included) from
/// tokens occurring at least `min_freq` times, most frequent first with ties
/// broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(texts: &[S], max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    if max_size <= RESERVED {
        return Err(Error::InvalidConfig(format!("vocabulary max_size must exceed {RESERVED}")));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for w in normalize(t.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(ref w, n)| n >= min_freq.max(1) && !RESERVED_NAMES.contains(&w.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED);
    Vocabulary::from_ordinary(ranked.into_iter().map(|(w, _)| w).collect())
}

/// A fixed-length encoded sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub attention_mask: Vec<u8>,
    pub mask_position: Option<usize>,
}

impl TokenSequence {
    /// Lays out `CLS content SEP PAD...` to exactly `max_len` ids. The content
    /// must already fit in `max_len - 2`.
    pub(crate) fn from_content(content: &[TokenId], max_len: usize) -> TokenSequence {
        debug_assert!(content.len() + 2 <= max_len);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend_from_slice(content);
        ids.push(SEP);
        let real = ids.len();
        ids.resize(max_len, PAD);
        let mut attention_mask = vec![1u8; real];
        attention_mask.resize(max_len, 0);
        TokenSequence {
            ids,
            attention_mask,
            mask_position: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().take_while(|&&m| m == 1).count()
    }
}

/// Encodes `text` as `CLS tokens SEP PAD...` of length exactly `max_len`,
/// truncating content tokens from the right.
pub fn encode(vocab: &Vocabulary, text: &str, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::InvalidConfig(format!("max_len {max_len} < 3")));
    }
    let mut content = vocab.lookup(text);
    content.truncate(max_len - 2);
    Ok(TokenSequence::from_content(&content, max_len))
}

/// Space-joined tokens with all reserved ids omitted.
pub fn decode(vocab: &Vocabulary, ids: &[TokenId]) -> Result<String> {
    let mut words = Vec::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::TokenOutOfRange { id, size: vocab.len() })?;
        if !is_reserved(id) {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}
