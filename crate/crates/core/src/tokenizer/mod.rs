//! Text normalization and a WordPiece tokenizer trained from scratch.

mod train;

pub use train::train_wordpiece;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const CLS: &str = "<cls>";
pub const SEP: &str = "<sep>";
pub const MASK: &str = "<mask>";
/// Special tokens in the order they occupy the first ids of a trained vocabulary.
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const CONTINUATION: &str = "##";
pub const DEFAULT_MAX_CHARS_PER_WORD: usize = 100;

/// Lower-cases, strips accents, drops non-ASCII and control characters and
/// collapses whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.nfd() {
        if !c.is_ascii() {
            continue;
        }
        if c.is_ascii_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if c.is_ascii_control() {
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(c.to_ascii_lowercase());
    }
    out
}

/// A pre-tokenized piece of normalized text. `glued` pieces directly follow
/// the previous piece without whitespace, so their first subword carries the
/// continuation prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Piece<'a> {
    pub text: &'a str,
    pub glued: bool,
}

/// Splits normalized text on whitespace and cuts every ASCII punctuation
/// character into its own piece.
pub fn pre_tokenize(normalized: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    for word in normalized.split_ascii_whitespace() {
        let mut glued = false;
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if c.is_ascii_punctuation() {
                if start < i {
                    pieces.push(Piece { text: &word[start..i], glued });
                    glued = true;
                }
                pieces.push(Piece { text: &word[i..i + 1], glued });
                glued = true;
                start = i + 1;
            }
        }
        if start < word.len() {
            pieces.push(Piece { text: &word[start..], glued });
        }
    }
    pieces
}

/// Ordered token list with its inverse map and special token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    pad: TokenId,
    unk: TokenId,
    cls: TokenId,
    sep: TokenId,
    mask: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() > TokenId::MAX as usize {
            return Err(Error::Config("vocabulary too large".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let special = SPECIALS.contains(&t.as_str());
            if t.is_empty() || (!special && normalize(t) != *t) || t.contains(' ') {
                return Err(Error::Config(format!("invalid vocabulary token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let find = |s: &str| index.get(s).copied().ok_or_else(|| Error::Config(format!("vocabulary lacks {s}")));
        Ok(Vocab { pad: find(PAD)?, unk: find(UNK)?, cls: find(CLS)?, sep: find(SEP)?, mask: find(MASK)?, tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }

    pub fn cls(&self) -> TokenId {
        self.cls
    }

    pub fn sep(&self) -> TokenId {
        self.sep
    }

    pub fn mask(&self) -> TokenId {
        self.mask
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        [self.pad, self.unk, self.cls, self.sep, self.mask].contains(&id)
    }

    /// Ids that masking may pick as random replacements: everything except
    /// the special tokens.
    pub fn regular_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId).filter(|&i| !self.is_special(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordPieceModel {
    pub vocab: Vocab,
    pub max_chars_per_word: usize,
}

impl WordPieceModel {
    pub fn new(vocab: Vocab) -> Self {
        WordPieceModel { vocab, max_chars_per_word: DEFAULT_MAX_CHARS_PER_WORD }
    }

    /// Normalizes `text` and segments each piece greedily, longest match first.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let normalized = normalize(text);
        let mut out = Vec::new();
        let mut buf = String::new();
        for piece in pre_tokenize(&normalized) {
            self.encode_piece(piece, &mut buf, &mut out);
        }
        out
    }

    fn encode_piece(&self, piece: Piece<'_>, buf: &mut String, out: &mut Vec<TokenId>) {
        let text = piece.text;
        if text.len() > self.max_chars_per_word {
            out.push(self.vocab.unk);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        while start < text.len() {
            let continued = start > 0 || piece.glued;
            let mut found = None;
            for end in (start + 1..=text.len()).rev() {
                buf.clear();
                if continued {
                    buf.push_str(CONTINUATION);
                }
                buf.push_str(&text[start..end]);
                if let Some(id) = self.vocab.id(buf) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(self.vocab.unk);
                    return;
                }
            }
        }
    }

    /// Joins tokens, attaching continuation pieces to their predecessor.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or_else(|| Error::Index(format!("token id {id} outside vocabulary")))?;
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !self.vocab.is_special(id) => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.vocab.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let vocab = Vocab::new(tokens).map_err(|e| Error::format("vocabulary file", e.to_string()))?;
        Ok(WordPieceModel::new(vocab))
    }
}
