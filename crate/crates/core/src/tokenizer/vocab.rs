use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::TokenizerError;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;

const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Frozen token ↔ id bijection. Ids 0–2 are `[PAD]`, `[CLS]`, `[UNK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids of one ad copy, `[CLS]` first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub source_text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercases and splits on whitespace and punctuation. Punctuation is
/// dropped, except `-` and `'` between two alphanumerics, which stay inside
/// the word ("e-commerce", "zzzz-unseen").
pub fn split_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut words = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let joiner = (c == '-' || c == '\'')
            && i > 0
            && chars[i - 1].is_alphanumeric()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || joiner {
            current.push(c);
        } else if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

impl Vocabulary {
    /// Content tokens are ordered by descending frequency, then
    /// lexicographically; tokens seen fewer than `min_freq` times are dropped.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for word in split_words(text.as_ref()) {
                *counts.entry(word).or_default() += 1;
            }
        }
        let mut content: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_freq && !RESERVED.contains(&tok.as_str()))
            .collect();
        content.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(content.into_iter().map(|(t, _)| t)).collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercase, split, map to ids, prepend `[CLS]`, keep the first `max_len` ids.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        let ids = std::iter::once(CLS)
            .chain(split_words(text).iter().map(|w| self.id(w)))
            .take(max_len.max(1))
            .collect();
        TokenSequence { ids, source_text: text.to_string() }
    }

    /// Space-joined tokens after `[CLS]`.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.ids
            .iter()
            .skip(1)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, TokenizerError> {
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        for (line_no, line) in input.lines().enumerate() {
            let line = line?;
            let bad = |reason: &str| TokenizerError::InvalidVocabFile { line: line_no, reason: reason.to_string() };
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(bad("token must be non-empty without whitespace"));
            }
            if line_no < RESERVED.len() && line != RESERVED[line_no] {
                return Err(bad(&format!("expected reserved token {}", RESERVED[line_no])));
            }
            if seen.insert(line.clone(), line_no).is_some() {
                return Err(bad("duplicate token"));
            }
            tokens.push(line);
        }
        if tokens.len() < RESERVED.len() {
            return Err(TokenizerError::InvalidVocabFile { line: tokens.len(), reason: "missing reserved tokens".into() });
        }
        Ok(Self::from_tokens(tokens))
    }
}
