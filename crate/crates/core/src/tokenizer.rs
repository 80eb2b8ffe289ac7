//! Token counting and encoding.
//!
//! Every token-denominated quantity in the crate (peak usage, dependency
//! length, mask indices) goes through [`TokenCounter`], so a different
//! vocabulary can be plugged in without touching the algorithms.

use std::collections::HashMap;
use std::sync::RwLock;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("unknown token id {0}")]
    UnknownId(u32),
}

/// A deterministic tokenizer.
///
/// Implementations must satisfy `decode(encode(s)) == s` byte for byte,
/// `count(s) == encode(s).len()`, and decoding must be concatenative:
/// `decode(a ++ b) == decode(a) ++ decode(b)`.
pub trait TokenCounter: Send + Sync {
    /// Stable identifier written into exported files.
    fn id(&self) -> &str;

    fn encode(&self, text: &str) -> Vec<u32>;

    fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError>;

    fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Word,
    Space,
    Other,
}

fn classify(c: char) -> CharClass {
    if c.is_alphanumeric() {
        CharClass::Word
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

/// Splits `text` into pieces: maximal alphanumeric runs, maximal whitespace
/// runs, and single punctuation/symbol characters.
pub fn pieces(text: &str) -> Pieces<'_> {
    Pieces { text, pos: 0 }
}

pub struct Pieces<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Iterator for Pieces<'a> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        let rest = &self.text[self.pos..];
        let mut chars = rest.char_indices();
        let (_, first) = chars.next()?;
        let class = classify(first);
        let mut end = first.len_utf8();
        if class != CharClass::Other {
            for (i, c) in chars {
                if classify(c) != class {
                    break;
                }
                end = i + c.len_utf8();
            }
        }
        self.pos += end;
        Some(&rest[..end])
    }
}

#[derive(Default)]
struct Vocab {
    ids: HashMap<String, u32>,
    pieces: Vec<String>,
}

/// The built-in tokenizer: splits on whitespace and punctuation, keeps each
/// punctuation character as its own token, and keeps whitespace runs as
/// tokens so the encoding is lossless.
///
/// Ids are interned in first-seen order, so two tokenizers fed the same text
/// in the same order assign the same ids.
#[derive(Default)]
pub struct BuiltinTokenizer {
    vocab: RwLock<Vocab>,
}

impl BuiltinTokenizer {
    pub const ID: &'static str = "builtin-ws-punct-v1";

    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a tokenizer from a vocabulary previously returned by
    /// [`BuiltinTokenizer::vocabulary`].
    pub fn from_vocabulary(pieces: Vec<String>) -> Self {
        let ids = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        Self {
            vocab: RwLock::new(Vocab { ids, pieces }),
        }
    }

    /// Snapshot of the interned pieces, indexed by token id.
    pub fn vocabulary(&self) -> Vec<String> {
        self.vocab.read().expect("vocab lock").pieces.clone()
    }
}

impl TokenCounter for BuiltinTokenizer {
    fn id(&self) -> &str {
        Self::ID
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut missing = false;
        {
            let vocab = self.vocab.read().expect("vocab lock");
            for piece in pieces(text) {
                match vocab.ids.get(piece) {
                    Some(&id) => out.push(id),
                    None => {
                        missing = true;
                        break;
                    }
                }
            }
        }
        if !missing {
            return out;
        }
        out.clear();
        let mut vocab = self.vocab.write().expect("vocab lock");
        for piece in pieces(text) {
            let id = match vocab.ids.get(piece) {
                Some(&id) => id,
                None => {
                    let id = vocab.pieces.len() as u32;
                    vocab.pieces.push(piece.to_owned());
                    vocab.ids.insert(piece.to_owned(), id);
                    id
                }
            };
            out.push(id);
        }
        out
    }

    fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let vocab = self.vocab.read().expect("vocab lock");
        let mut out = String::new();
        for &id in ids {
            let piece = vocab
                .pieces
                .get(id as usize)
                .ok_or(TokenizerError::UnknownId(id))?;
            out.push_str(piece);
        }
        Ok(out)
    }

    fn count(&self, text: &str) -> usize {
        pieces(text).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_words_punctuation_and_space() {
        let p: Vec<_> = pieces("<IS>hello,  world</IS>").collect();
        assert_eq!(
            p,
            vec!["<", "IS", ">", "hello", ",", "  ", "world", "<", "/", "IS", ">"]
        );
    }

    #[test]
    fn single_word_is_one_token() {
        assert_eq!(BuiltinTokenizer::new().count("q"), 1);
        assert_eq!(BuiltinTokenizer::new().count(""), 0);
    }

    #[test]
    fn unknown_id_is_an_error() {
        let tok = BuiltinTokenizer::new();
        assert_eq!(tok.decode(&[7]), Err(TokenizerError::UnknownId(7)));
    }

    #[test]
    fn vocabulary_round_trips() {
        let tok = BuiltinTokenizer::new();
        let ids = tok.encode("Paris is the capital of France.");
        let rebuilt = BuiltinTokenizer::from_vocabulary(tok.vocabulary());
        assert_eq!(rebuilt.decode(&ids).unwrap(), "Paris is the capital of France.");
        assert_eq!(rebuilt.encode("capital"), tok.encode("capital"));
    }

    proptest! {
        #[test]
        fn encode_decode_is_lossless(s in "\\PC{0,64}") {
            let tok = BuiltinTokenizer::new();
            let ids = tok.encode(&s);
            prop_assert_eq!(tok.decode(&ids).unwrap(), s.clone());
            prop_assert_eq!(tok.count(&s), ids.len());
            prop_assert_eq!(tok.encode(&s), ids);
        }

        #[test]
        fn decode_is_concatenative(a in "\\PC{0,32}", b in "\\PC{0,32}") {
            let tok = BuiltinTokenizer::new();
            let mut ids = tok.encode(&a);
            ids.extend(tok.encode(&b));
            prop_assert_eq!(tok.decode(&ids).unwrap(), format!("{a}{b}"));
        }
    }
}
