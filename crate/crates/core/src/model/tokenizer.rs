// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level tokenizer with optional vocabulary-file override.
//!
//! The byte tokenizer maps each UTF-8 byte to the id of the same value. When
//! the vocabulary has room for it, id 256 is the end-of-sequence token.
//!
//! A vocabulary file holds one `id<TAB>token` mapping per line. Tokens may use
//! the escapes `\n`, `\t` and `\\`; the literal token `<eos>` marks the
//! end-of-sequence id. Encoding is greedy longest-match.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const BYTE_EOS: u32 = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum Tokenizer {
    Bytes {
        vocab_size: usize,
    },
    Vocab {
        id_to_token: Vec<Option<String>>,
        token_to_id: HashMap<String, u32>,
        max_token_len: usize,
        eos: Option<u32>,
    },
}

impl Tokenizer {
    pub fn bytes(vocab_size: usize) -> Self {
        Self::Bytes { vocab_size }
    }

    pub fn from_vocab_file(path: &Path, vocab_size: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_vocab(&text, vocab_size)
    }

    pub fn parse_vocab(text: &str, vocab_size: usize) -> Result<Self> {
        let mut id_to_token = vec![None; vocab_size];
        let mut token_to_id = HashMap::new();
        let mut eos = None;
        let mut max_token_len = 0;
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Tokenize(format!("vocab line {}: {msg}", lineno + 1));
            let (id, raw) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected id<TAB>token"))?;
            let id: u32 = id.trim().parse().map_err(|_| bad("id is not an integer"))?;
            if id as usize >= vocab_size {
                return Err(bad("id exceeds vocab_size"));
            }
            if raw == "<eos>" {
                eos = Some(id);
                continue;
            }
            let token = unescape(raw).ok_or_else(|| bad("bad escape"))?;
            if token.is_empty() {
                return Err(bad("empty token"));
            }
            if id_to_token[id as usize].is_some() || token_to_id.contains_key(&token) {
                return Err(bad("duplicate mapping"));
            }
            max_token_len = max_token_len.max(token.len());
            token_to_id.insert(token.clone(), id);
            id_to_token[id as usize] = Some(token);
        }
        Ok(Self::Vocab {
            id_to_token,
            token_to_id,
            max_token_len,
            eos,
        })
    }

    pub fn eos(&self) -> Option<u32> {
        match self {
            Self::Bytes { vocab_size } => (*vocab_size > BYTE_EOS as usize).then_some(BYTE_EOS),
            Self::Vocab { eos, .. } => *eos,
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Self::Bytes { vocab_size } => {
                let ids: Vec<u32> = text.bytes().map(u32::from).collect();
                if let Some(bad) = ids.iter().find(|id| **id as usize >= *vocab_size) {
                    return Err(Error::Tokenize(format!(
                        "byte {bad} does not fit a vocabulary of {vocab_size}"
                    )));
                }
                Ok(ids)
            }
            Self::Vocab {
                token_to_id,
                max_token_len,
                ..
            } => {
                let mut ids = Vec::new();
                let mut pos = 0;
                'outer: while pos < text.len() {
                    let limit = (pos + max_token_len).min(text.len());
                    for end in (pos + 1..=limit).rev() {
                        if !text.is_char_boundary(end) {
                            continue;
                        }
                        if let Some(id) = token_to_id.get(&text[pos..end]) {
                            ids.push(*id);
                            pos = end;
                            continue 'outer;
                        }
                    }
                    return Err(Error::Tokenize(format!(
                        "no vocabulary entry matches at byte {pos}"
                    )));
                }
                Ok(ids)
            }
        }
    }

    /// Raw bytes for one token id; specials and unmapped ids decode to nothing.
    pub fn token_bytes(&self, id: u32) -> &[u8] {
        match self {
            Self::Bytes { .. } => {
                if id < 256 {
                    &BYTE_TABLE[id as usize..id as usize + 1]
                } else {
                    &[]
                }
            }
            Self::Vocab { id_to_token, .. } => id_to_token
                .get(id as usize)
                .and_then(|t| t.as_deref())
                .map(str::as_bytes)
                .unwrap_or(&[]),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .flat_map(|id| self.token_bytes(*id).iter().copied())
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

static BYTE_TABLE: [u8; 256] = {
    let mut t = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        t[i] = i as u8;
        i += 1;
    }
    t
};

fn unescape(raw: &str) -> Option<String> {
    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next()? {
                'n' => out.push('\n'),
                't' => out.push('\t'),
                '\\' => out.push('\\'),
                _ => return None,
            }
        } else {
            out.push(c);
        }
    }
    Some(out)
}

/// Incremental detokenizer for streaming.
///
/// Concatenating every piece returned by [`push`](Self::push) followed by
/// [`finish`](Self::finish) yields exactly [`Tokenizer::decode`] of the same
/// ids, including lossy replacement of invalid UTF-8.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    pending: Vec<u8>,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tokenizer: &Tokenizer, id: u32) -> String {
        self.pending.extend_from_slice(tokenizer.token_bytes(id));
        let mut out = String::new();
        loop {
            match std::str::from_utf8(&self.pending) {
                Ok(s) => {
                    out.push_str(s);
                    self.pending.clear();
                    break;
                }
                Err(e) => {
                    let valid = e.valid_up_to();
                    out.push_str(
                        std::str::from_utf8(&self.pending[..valid]).expect("valid prefix"),
                    );
                    match e.error_len() {
                        Some(bad) => {
                            out.push(char::REPLACEMENT_CHARACTER);
                            self.pending.drain(..valid + bad);
                        }
                        None => {
                            self.pending.drain(..valid);
                            break;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn finish(self) -> String {
        String::from_utf8_lossy(&self.pending).into_owned()
    }
}
