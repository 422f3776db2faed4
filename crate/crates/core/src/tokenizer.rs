//! Fixed character-level vocabulary: specials, field delimiters, glyphs.
//!
//! The id layout is frozen — checkpoints store logits indexed by it — so
//! everything is derived from two constant tables rather than built from
//! data. Layout: PAD/BOS/EOS, then `<s_key>`/`</s_key>` pairs for each
//! field key in sorted order, then the printable glyphs, then newline.

use crate::{Error, Result};

/// Field keys a document can carry, sorted; order fixes their token ids.
pub const FIELD_KEYS: [&str; 10] =
    ["addr", "code", "date", "item", "mail", "name", "qty", "tel", "total", "zip"];

/// Renderable characters, in id order. Space is a glyph (blank cell);
/// newline is not — it is a layout break and gets its own token.
pub const GLYPHS: &str = "abcdefghijklmnopqrstuvwxyz0123456789:./- ";

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const FIELD_BASE: usize = 3;
const GLYPH_BASE: usize = FIELD_BASE + 2 * FIELD_KEYS.len();

/// What a token id means, for consumers that branch on structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    /// `<s_key>` — index into [`FIELD_KEYS`].
    Open(usize),
    /// `</s_key>` — index into [`FIELD_KEYS`].
    Close(usize),
    Char(char),
    Newline,
}

/// Character-level tokenizer over the fixed vocabulary.
pub struct Tokenizer {
    /// ASCII byte → glyph token id.
    char_ids: [Option<usize>; 128],
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut char_ids = [None; 128];
        for (i, ch) in GLYPHS.chars().enumerate() {
            char_ids[ch as usize] = Some(GLYPH_BASE + i);
        }
        Self { char_ids }
    }

    pub fn vocab_size(&self) -> usize {
        GLYPH_BASE + GLYPHS.len() + 1 // + newline
    }

    pub fn newline_id(&self) -> usize {
        GLYPH_BASE + GLYPHS.len()
    }

    pub fn char_id(&self, ch: char) -> Result<usize> {
        if ch == '\n' {
            return Ok(self.newline_id());
        }
        self.char_ids
            .get(ch as usize)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Contract(format!("character {ch:?} is not in the vocabulary")))
    }

    fn key_index(key: &str) -> Result<usize> {
        FIELD_KEYS
            .iter()
            .position(|&k| k == key)
            .ok_or_else(|| Error::Contract(format!("unknown field key {key:?}")))
    }

    pub fn open_id(&self, key: &str) -> Result<usize> {
        Ok(FIELD_BASE + 2 * Self::key_index(key)?)
    }

    pub fn close_id(&self, key: &str) -> Result<usize> {
        Ok(FIELD_BASE + 2 * Self::key_index(key)? + 1)
    }

    /// Encode plain text: one token per character, newlines included.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|ch| self.char_id(ch)).collect()
    }

    pub fn kind(&self, id: usize) -> Result<TokenKind> {
        match id {
            PAD => Ok(TokenKind::Pad),
            BOS => Ok(TokenKind::Bos),
            EOS => Ok(TokenKind::Eos),
            _ if id < GLYPH_BASE => {
                let k = (id - FIELD_BASE) / 2;
                if (id - FIELD_BASE) % 2 == 0 {
                    Ok(TokenKind::Open(k))
                } else {
                    Ok(TokenKind::Close(k))
                }
            }
            _ if id < GLYPH_BASE + GLYPHS.len() => {
                Ok(TokenKind::Char(GLYPHS.as_bytes()[id - GLYPH_BASE] as char))
            }
            _ if id == self.newline_id() => Ok(TokenKind::Newline),
            _ => Err(Error::Contract(format!(
                "token id {id} outside vocabulary of {}",
                self.vocab_size()
            ))),
        }
    }

    /// Human-readable form of one token, for logs and error messages.
    pub fn describe(&self, id: usize) -> String {
        match self.kind(id) {
            Ok(TokenKind::Pad) => "<pad>".into(),
            Ok(TokenKind::Bos) => "<bos>".into(),
            Ok(TokenKind::Eos) => "<eos>".into(),
            Ok(TokenKind::Open(k)) => format!("<s_{}>", FIELD_KEYS[k]),
            Ok(TokenKind::Close(k)) => format!("</s_{}>", FIELD_KEYS[k]),
            Ok(TokenKind::Char(c)) => format!("{c:?}"),
            Ok(TokenKind::Newline) => "<nl>".into(),
            Err(_) => format!("<invalid:{id}>"),
        }
    }
}
