//! Word-level tokenizer with a fixed special-token block, plus the sentence
//! splitter used by the injectors.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Range;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Keeps the `max_size − 5` most frequent normalized tokens; ties are
    /// broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if max_size <= NUM_SPECIAL {
            return Err(Error::Config(format!(
                "vocab max_size must exceed {NUM_SPECIAL}, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in normalize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIAL);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { index, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Maps ids back to tokens; out-of-range ids decode as `[UNK]`.
    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK as usize]))
            .collect()
    }

    /// One non-special token per line, in id order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for t in &self.tokens[NUM_SPECIAL..] {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut words = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(Error::Data {
                    line: n + 1,
                    msg: format!("invalid vocab token {line:?}"),
                });
            }
            words.push(line);
        }
        let vocab = Self::from_tokens(words);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Data {
                line: 0,
                msg: "duplicate vocab token".into(),
            });
        }
        Ok(vocab)
    }
}

/// Byte spans of sentences: text runs ending in `.`, `!` or `?` that are
/// followed by whitespace or the end of input. A trailing run without a
/// terminator counts as a sentence. Spans exclude surrounding whitespace.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, ch)) = chars.next() {
        if start.is_none() {
            if ch.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        let at_boundary = chars.peek().is_none_or(|&(_, next)| next.is_whitespace());
        if matches!(ch, '.' | '!' | '?') && at_boundary {
            spans.push(start.take().unwrap()..i + ch.len_utf8());
        }
    }
    if let Some(s) = start {
        spans.push(s..text.trim_end().len());
    }
    spans
}

pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_spans(text).into_iter().map(|r| &text[r]).collect()
}
