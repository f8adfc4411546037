//! Byte-level and BPE tokenizers.
//!
//! Tokenizer file (JSON): `{type: "byte"|"bpe", vocab: {token: id},
//! merges: [[a, b], ...], special: {bos, eos}}`. In byte mode ids `0..256`
//! are raw bytes and specials default to 256 (bos) and 257 (eos).
//!
//! BPE starts from one symbol per character (falling back to `<0xNN>` byte
//! tokens for characters missing from the vocabulary) and repeatedly merges
//! the leftmost occurrence of the lowest-rank adjacent pair.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: Option<u32>,
    pub eos: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Byte,
    Bpe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenizerFile {
    #[serde(rename = "type")]
    kind: Kind,
    #[serde(default)]
    vocab: HashMap<String, u32>,
    #[serde(default)]
    merges: Vec<(String, String)>,
    #[serde(default)]
    special: Option<SpecialTokens>,
}

#[derive(Debug, Clone)]
struct Bpe {
    vocab: HashMap<String, u32>,
    id_to_token: HashMap<u32, String>,
    ranks: HashMap<(String, String), usize>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    bpe: Option<Bpe>,
    special: SpecialTokens,
}

pub const BYTE_BOS: u32 = 256;
pub const BYTE_EOS: u32 = 257;

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

fn parse_byte_token(s: &str) -> Option<u8> {
    let hex = s.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

impl Tokenizer {
    pub fn byte() -> Self {
        Self {
            bpe: None,
            special: SpecialTokens {
                bos: Some(BYTE_BOS),
                eos: Some(BYTE_EOS),
            },
        }
    }

    pub fn bpe(
        vocab: HashMap<String, u32>,
        merges: Vec<(String, String)>,
        special: SpecialTokens,
    ) -> Result<Self> {
        let mut ranks = HashMap::new();
        for (rank, (a, b)) in merges.into_iter().enumerate() {
            let merged = format!("{a}{b}");
            if !vocab.contains_key(&merged) {
                return Err(Error::Format(format!(
                    "merge {rank} ({a:?}, {b:?}) produces `{merged}`, which is not in the vocabulary"
                )));
            }
            ranks.entry((a, b)).or_insert(rank);
        }
        let mut id_to_token = HashMap::new();
        for (tok, &id) in &vocab {
            if id_to_token.insert(id, tok.clone()).is_some() {
                return Err(Error::Format(format!("id {id} assigned to two tokens")));
            }
        }
        Ok(Self {
            bpe: Some(Bpe {
                vocab,
                id_to_token,
                ranks,
            }),
            special,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("tokenizer JSON: {e}")))?;
        match file.kind {
            Kind::Byte => {
                let mut t = Self::byte();
                if let Some(s) = file.special {
                    t.special = s;
                }
                Ok(t)
            }
            Kind::Bpe => Self::bpe(
                file.vocab,
                file.merges,
                file.special.unwrap_or(SpecialTokens { bos: None, eos: None }),
            ),
        }
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    /// Smallest vocabulary a model needs to accept every id this tokenizer emits.
    pub fn min_vocab_size(&self) -> usize {
        let base = match &self.bpe {
            None => 256,
            Some(b) => b.vocab.values().max().map_or(0, |m| *m as usize + 1),
        };
        let special = [self.special.bos, self.special.eos]
            .into_iter()
            .flatten()
            .map(|id| id as usize + 1)
            .max()
            .unwrap_or(0);
        base.max(special)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match &self.bpe {
            None => Ok(text.bytes().map(u32::from).collect()),
            Some(bpe) => bpe.encode(text),
        }
    }

    /// Byte mode only: raw bytes to ids.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Result<Vec<u32>> {
        match &self.bpe {
            None => Ok(bytes.iter().map(|b| u32::from(*b)).collect()),
            Some(_) => Err(Error::Input("BPE tokenizers encode text, not raw bytes".into())),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Decodes to raw bytes, skipping special tokens.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut bytes = Vec::new();
        for &id in ids {
            if Some(id) == self.special.bos || Some(id) == self.special.eos {
                continue;
            }
            match &self.bpe {
                None if id < 256 => bytes.push(id as u8),
                None => return Err(Error::Input(format!("unknown token id {id}"))),
                Some(bpe) => {
                    let tok = bpe
                        .id_to_token
                        .get(&id)
                        .ok_or_else(|| Error::Input(format!("unknown token id {id}")))?;
                    match parse_byte_token(tok) {
                        Some(b) => bytes.push(b),
                        None => bytes.extend_from_slice(tok.as_bytes()),
                    }
                }
            }
        }
        Ok(bytes)
    }
}

impl Bpe {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut symbols: Vec<String> = Vec::new();
        for ch in text.chars() {
            let s = ch.to_string();
            if self.vocab.contains_key(&s) {
                symbols.push(s);
            } else {
                let mut buf = [0u8; 4];
                for b in ch.encode_utf8(&mut buf).bytes() {
                    let bt = byte_token(b);
                    if !self.vocab.contains_key(&bt) {
                        return Err(Error::Input(format!(
                            "character {ch:?} is not in the vocabulary and has no byte fallback"
                        )));
                    }
                    symbols.push(bt);
                }
            }
        }
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        Ok(symbols.iter().map(|s| self.vocab[s]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_round_trip_and_empty() {
        let t = Tokenizer::byte();
        let text = "héllo, wörld ✓";
        assert_eq!(t.decode(&t.encode(text).unwrap()).unwrap(), text);
        assert!(t.encode("").unwrap().is_empty());
        assert!(t.decode(&[300]).is_err());
        assert_eq!(t.min_vocab_size(), 258);
    }

    #[test]
    fn single_merge_on_abab() {
        let vocab: HashMap<String, u32> =
            [("a", 0), ("b", 1), ("ab", 2)].map(|(k, v)| (k.to_string(), v)).into();
        let t = Tokenizer::bpe(vocab, vec![("a".into(), "b".into())], SpecialTokens { bos: None, eos: None })
            .unwrap();
        assert_eq!(t.encode("abab").unwrap(), vec![2, 2]);
        assert_eq!(t.decode(&[2, 2]).unwrap(), "abab");
    }

    #[test]
    fn lowest_rank_leftmost_first() {
        // ranks: (b,c) before (a,b); "abc" → a + bc, not ab + c
        let vocab: HashMap<String, u32> = [("a", 0), ("b", 1), ("c", 2), ("ab", 3), ("bc", 4)]
            .map(|(k, v)| (k.to_string(), v))
            .into();
        let merges = vec![("b".into(), "c".into()), ("a".into(), "b".into())];
        let t = Tokenizer::bpe(vocab.clone(), merges, SpecialTokens { bos: None, eos: None }).unwrap();
        assert_eq!(t.encode("abc").unwrap(), vec![0, 4]);
        // "aaa" with (a,a): leftmost site merges first
        let vocab: HashMap<String, u32> = [("a", 0), ("aa", 1)].map(|(k, v)| (k.to_string(), v)).into();
        let t = Tokenizer::bpe(vocab, vec![("a".into(), "a".into())], SpecialTokens { bos: None, eos: None })
            .unwrap();
        assert_eq!(t.encode("aaa").unwrap(), vec![1, 0]);
    }

    #[test]
    fn byte_fallback_and_json() {
        let json = r#"{"type":"bpe","vocab":{"h":0,"i":1,"hi":2,"<0xC3>":3,"<0xA9>":4},
                       "merges":[["h","i"]],"special":{"bos":5,"eos":6}}"#;
        let t = Tokenizer::from_json(json).unwrap();
        let ids = t.encode("hié").unwrap();
        assert_eq!(ids, vec![2, 3, 4]);
        assert_eq!(t.decode(&ids).unwrap(), "hié");
        assert!(t.encode("x").is_err());
        assert!(t.decode(&[99]).is_err());
        assert_eq!(t.min_vocab_size(), 7);

        let bad = r#"{"type":"bpe","vocab":{"a":0},"merges":[["a","a"]]}"#;
        assert!(Tokenizer::from_json(bad).is_err());
        let byte = Tokenizer::from_json(r#"{"type":"byte"}"#).unwrap();
        assert_eq!(byte.special().eos, Some(BYTE_EOS));
    }

    proptest! {
        #[test]
        fn byte_mode_is_a_bijection_on_text(s in ".*") {
            let t = Tokenizer::byte();
            prop_assert_eq!(t.decode(&t.encode(&s).unwrap()).unwrap(), s);
        }

        #[test]
        fn byte_mode_is_a_bijection_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let t = Tokenizer::byte();
            let ids = t.encode_bytes(&bytes).unwrap();
            prop_assert_eq!(t.decode_bytes(&ids).unwrap(), bytes);
        }
    }
}
