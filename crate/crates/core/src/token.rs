//! Reference tokenizer and vocabulary.
//!
//! Text is split by greedy maximal munch over four character classes:
//! identifier runs (`[A-Za-z0-9_]+`), runs of non-newline whitespace, a
//! single `\n`, and any other single character. Concatenating the surfaces
//! of a tokenized text always reproduces the text byte for byte.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenError {
    #[error("unknown token surface {0:?} (vocabulary is frozen)")]
    UnknownToken(String),
    #[error("malformed vocabulary line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Index of a surface string in a [`Vocabulary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Per-token layout flags, derived from the surface string alone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenMeta {
    pub is_whitespace: bool,
    pub contains_newline: bool,
}

impl TokenMeta {
    pub fn of_surface(surface: &str) -> Self {
        TokenMeta {
            is_whitespace: !surface.is_empty() && surface.chars().all(char::is_whitespace),
            contains_newline: surface.contains('\n'),
        }
    }
}

/// Bijective map between token ids and distinct surface strings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    meta: Vec<TokenMeta>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn get(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id.index()).map(String::as_str)
    }

    /// Layout flags for `id`. Ids outside the vocabulary get default flags.
    pub fn meta(&self, id: TokenId) -> TokenMeta {
        self.meta.get(id.index()).copied().unwrap_or_default()
    }

    /// Returns the id of `surface`, appending it if unseen.
    pub fn intern(&mut self, surface: &str) -> TokenId {
        if let Some(id) = self.index.get(surface) {
            return *id;
        }
        let id = TokenId(u32::try_from(self.surfaces.len()).expect("vocabulary overflow"));
        self.surfaces.push(surface.to_owned());
        self.meta.push(TokenMeta::of_surface(surface));
        self.index.insert(surface.to_owned(), id);
        id
    }

    /// True if every id of `self` maps to the same surface in `other`.
    pub fn is_prefix_of(&self, other: &Vocabulary) -> bool {
        self.surfaces.len() <= other.surfaces.len()
            && self
                .surfaces
                .iter()
                .zip(&other.surfaces)
                .all(|(a, b)| a == b)
    }

    /// Tokenizes against a frozen vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, TokenError> {
        let mut seq = TokenSequence::new();
        for surface in split_surfaces(text) {
            let id = self
                .get(surface)
                .ok_or_else(|| TokenError::UnknownToken(surface.to_owned()))?;
            seq.push(id, self.meta(id));
        }
        Ok(seq)
    }

    /// Tokenizes in build mode, interning unseen surfaces.
    pub fn tokenize_extend(&mut self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::new();
        for surface in split_surfaces(text) {
            let id = self.intern(surface);
            seq.push(id, self.meta(id));
        }
        seq
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for id in ids {
            if let Some(s) = self.surface(*id) {
                out.push_str(s);
            }
        }
        out
    }

    /// Builds a sequence for `ids`, attaching metadata from this vocabulary.
    pub fn sequence(&self, ids: &[TokenId]) -> TokenSequence {
        let mut seq = TokenSequence::with_capacity(ids.len());
        for &id in ids {
            seq.push(id, self.meta(id));
        }
        seq
    }

    /// Writes one escaped surface per line; the line number is the id.
    pub fn write_lines<W: Write>(&self, mut w: W) -> io::Result<()> {
        for s in &self.surfaces {
            writeln!(w, "{}", escape(s))?;
        }
        Ok(())
    }

    pub fn read_lines<R: BufRead>(mut r: R) -> Result<Self, TokenError> {
        let mut vocab = Vocabulary::new();
        let mut buf = Vec::new();
        let mut line = 0;
        loop {
            buf.clear();
            if r.read_until(b'\n', &mut buf)? == 0 {
                break;
            }
            line += 1;
            if buf.last() == Some(&b'\n') {
                buf.pop();
            }
            let raw = std::str::from_utf8(&buf).map_err(|e| TokenError::Malformed {
                line,
                reason: e.to_string(),
            })?;
            let surface = unescape(raw).ok_or_else(|| TokenError::Malformed {
                line,
                reason: "bad escape".into(),
            })?;
            if surface.is_empty() || vocab.get(&surface).is_some() {
                return Err(TokenError::Malformed {
                    line,
                    reason: "empty or duplicate surface".into(),
                });
            }
            vocab.intern(&surface);
        }
        Ok(vocab)
    }

    pub(crate) fn surfaces(&self) -> &[String] {
        &self.surfaces
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next()? {
                '\\' => out.push('\\'),
                'n' => out.push('\n'),
                't' => out.push('\t'),
                _ => return None,
            }
        } else {
            out.push(c);
        }
    }
    Some(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Ident,
    Space,
    Newline,
    Other,
}

fn classify(c: char) -> CharClass {
    if c == '\n' {
        CharClass::Newline
    } else if c.is_ascii_alphanumeric() || c == '_' {
        CharClass::Ident
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

/// Splits `text` into token surfaces. Pure; no vocabulary involved.
pub fn split_surfaces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        let class = classify(c);
        let mut end = i + c.len_utf8();
        if matches!(class, CharClass::Ident | CharClass::Space) {
            while let Some(&(j, d)) = iter.peek() {
                if classify(d) != class {
                    break;
                }
                end = j + d.len_utf8();
                iter.next();
            }
        }
        debug_assert_eq!(start, i);
        out.push(&text[i..end]);
        start = end;
    }
    out
}

/// Token ids with per-token layout flags.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<TokenId>,
    meta: Vec<TokenMeta>,
}

impl TokenSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        TokenSequence {
            tokens: Vec::with_capacity(n),
            meta: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, id: TokenId, meta: TokenMeta) {
        self.tokens.push(id);
        self.meta.push(meta);
    }

    pub fn extend_from(&mut self, other: &TokenSequence) {
        self.tokens.extend_from_slice(&other.tokens);
        self.meta.extend_from_slice(&other.meta);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn meta(&self) -> &[TokenMeta] {
        &self.meta
    }

    /// The last `n` token ids (or all of them if shorter).
    pub fn tail(&self, n: usize) -> &[TokenId] {
        &self.tokens[self.tokens.len().saturating_sub(n)..]
    }

    pub fn truncate(&mut self, n: usize) {
        self.tokens.truncate(n);
        self.meta.truncate(n);
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> TokenSequence {
        TokenSequence {
            tokens: self.tokens[range.clone()].to_vec(),
            meta: self.meta[range].to_vec(),
        }
    }
}

/// True iff the next token would be the first non-whitespace token of its
/// line: the context is empty, or its last newline-bearing token is followed
/// only by whitespace tokens.
pub fn is_skip_position(context: &TokenSequence) -> bool {
    is_skip_position_meta(context.meta())
}

pub(crate) fn is_skip_position_meta(meta: &[TokenMeta]) -> bool {
    for m in meta.iter().rev() {
        if m.contains_newline {
            return true;
        }
        if !m.is_whitespace {
            return false;
        }
    }
    true
}
