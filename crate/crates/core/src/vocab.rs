//! Character-level vocabulary with four reserved ids.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Text glyph standing for the separator token (U+241E SYMBOL FOR RECORD SEPARATOR).
pub const SEP_GLYPH: char = '\u{241E}';

pub const MAX_VOCAB: usize = 256;

/// Symbols of the toy vocabulary: what the prompt template and the synthetic
/// lowercase cipher languages need.
pub const TOY_SYMBOLS: &str = "\n :Tabcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: BTreeMap<char, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from the distinct characters of `symbols`, in first-seen order.
    pub fn new(symbols: &str) -> Result<Self> {
        let mut out = Vec::new();
        let mut index = BTreeMap::new();
        for c in symbols.chars() {
            if c == SEP_GLYPH || index.contains_key(&c) {
                continue;
            }
            index.insert(c, RESERVED.len() + out.len());
            out.push(c);
        }
        let v = Vocab {
            symbols: out,
            index,
        };
        if v.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary of {} exceeds {MAX_VOCAB}",
                v.len()
            )));
        }
        Ok(v)
    }

    pub fn toy() -> Self {
        Self::new(TOY_SYMBOLS).expect("toy vocabulary fits")
    }

    pub fn len(&self) -> usize {
        RESERVED.len() + self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Non-reserved symbols in id order.
    pub fn symbols(&self) -> String {
        self.symbols.iter().collect()
    }

    /// Display form of a token id.
    pub fn token(&self, id: TokenId) -> Option<String> {
        if id < RESERVED.len() {
            Some(RESERVED[id].to_string())
        } else {
            self.symbols.get(id - RESERVED.len()).map(|c| c.to_string())
        }
    }

    pub fn id(&self, c: char) -> Result<TokenId> {
        if c == SEP_GLYPH {
            return Ok(SEP);
        }
        self.index
            .get(&c)
            .copied()
            .ok_or_else(|| Error::Vocabulary(c.to_string()))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Encodes a target and appends EOS.
    pub fn encode_target(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = self.encode(text)?;
        ids.push(EOS);
        Ok(ids)
    }

    /// Decodes ids to text, dropping PAD/BOS and stopping at the first EOS.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD | BOS => {}
                EOS => break,
                SEP => s.push(SEP_GLYPH),
                _ => s.push(
                    *self
                        .symbols
                        .get(id - RESERVED.len())
                        .ok_or_else(|| Error::Vocabulary(format!("id {id}")))?,
                ),
            }
        }
        Ok(s)
    }

    /// Validates that every id is in range.
    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(bad) => Err(Error::Vocabulary(format!("id {bad}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_bijection() {
        let v = Vocab::toy();
        assert_eq!(v.len(), 4 + TOY_SYMBOLS.chars().count());
        assert_eq!(v.token(EOS).unwrap(), "<eos>");
        for id in RESERVED.len()..v.len() {
            let t = v.token(id).unwrap();
            assert_eq!(v.id(t.chars().next().unwrap()).unwrap(), id);
        }
        assert_eq!(v.id(SEP_GLYPH).unwrap(), SEP);
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::toy();
        let text = format!("ab{SEP_GLYPH}cd");
        let ids = v.encode_target(&text).unwrap();
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids).unwrap(), text);
        assert!(matches!(v.encode("A"), Err(Error::Vocabulary(_))));
        assert!(v.check_ids(&[v.len()]).is_err());
    }
}
