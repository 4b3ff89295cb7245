//! Character-level tokenizer over a closed alphabet.

use std::collections::HashMap;

use crate::error::{ForgeError, Result};

pub const PAD: &str = "<|pad|>";
pub const BOS: &str = "<|bos|>";
pub const EOT: &str = "<|eot|>";
pub const USER: &str = "<|user|>";
pub const ASSISTANT: &str = "<|assistant|>";
pub const IMG: &str = "<|img|>";

/// The reserved specials in id order.
pub const SPECIALS: [&str; 6] = [PAD, BOS, EOT, USER, ASSISTANT, IMG];

/// Every character the synthetic corpora may contain.
pub const ALPHABET: &str = "\n ?+0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    specials: Vec<String>,
    chars: Vec<char>,
    char_ids: HashMap<char, u32>,
}

/// Build the tokenizer: specials take ids `0..k`, then the alphabet in order.
pub fn build_tokenizer(reserved_specials: &[&str]) -> Result<Tokenizer> {
    let mut specials: Vec<String> = Vec::with_capacity(reserved_specials.len());
    for s in reserved_specials {
        if !(s.starts_with("<|") && s.ends_with("|>") && s.len() > 4) {
            return Err(ForgeError::Config(format!("special token {s:?} must look like <|name|>")));
        }
        if specials.iter().any(|x| x == s) {
            return Err(ForgeError::Config(format!("special token {s} listed twice")));
        }
        specials.push(s.to_string());
    }
    let chars: Vec<char> = ALPHABET.chars().collect();
    let base = specials.len() as u32;
    let char_ids = chars.iter().enumerate().map(|(i, &c)| (c, base + i as u32)).collect();
    Ok(Tokenizer {
        specials,
        chars,
        char_ids,
    })
}

impl Tokenizer {
    /// The standard tokenizer with the six reserved specials.
    pub fn standard() -> Self {
        build_tokenizer(&SPECIALS).expect("built-in specials are well formed")
    }

    pub fn vocab_size(&self) -> usize {
        self.specials.len() + self.chars.len()
    }

    pub fn special_id(&self, name: &str) -> Result<u32> {
        self.specials
            .iter()
            .position(|s| s == name)
            .map(|i| i as u32)
            .ok_or_else(|| ForgeError::Config(format!("unknown special token {name}")))
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.specials.len()
    }

    /// Plain text to ids; special markers are not recognised here.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.char_ids.get(&c).copied().ok_or(ForgeError::Tokenization(c)))
            .collect()
    }

    /// Like [`encode`](Self::encode) but maps `<|name|>` markers of reserved
    /// specials to their single ids.
    pub fn encode_with_specials(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(text.len());
        let mut rest = text;
        'outer: while !rest.is_empty() {
            if rest.starts_with("<|") {
                for (i, s) in self.specials.iter().enumerate() {
                    if let Some(tail) = rest.strip_prefix(s.as_str()) {
                        out.push(i as u32);
                        rest = tail;
                        continue 'outer;
                    }
                }
            }
            let c = rest.chars().next().expect("non-empty");
            out.push(*self.char_ids.get(&c).ok_or(ForgeError::Tokenization(c))?);
            rest = &rest[c.len_utf8()..];
        }
        Ok(out)
    }

    /// Ids to text; specials render as their markers.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            let i = id as usize;
            if i < self.specials.len() {
                out.push_str(&self.specials[i]);
            } else if let Some(&c) = self.chars.get(i - self.specials.len()) {
                out.push(c);
            } else {
                return Err(ForgeError::Input(format!("token id {id} outside vocabulary")));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_sizes() {
        let t = Tokenizer::standard();
        assert_eq!(t.vocab_size(), 72);
        let ids = t.encode("yes").unwrap();
        assert_eq!(ids.len(), 3);
        let s = "What is 13 + 24?\nred";
        assert_eq!(t.decode(&t.encode(s).unwrap()).unwrap(), s);
        assert!(matches!(t.encode("é"), Err(ForgeError::Tokenization('é'))));
    }

    #[test]
    fn specials_are_single_ids() {
        let t = Tokenizer::standard();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(t.encode_with_specials(s).unwrap(), vec![i as u32]);
        }
        let ids = t.encode_with_specials("<|bos|>a<|eot|>").unwrap();
        assert_eq!(ids, vec![1, t.encode("a").unwrap()[0], 2]);
        // a bare "<|" that is not a special is just characters, and '<' is not in the alphabet
        assert!(t.encode_with_specials("<|x|>").is_err());
    }

    #[test]
    fn bad_specials_are_rejected() {
        assert!(build_tokenizer(&["<|a|>", "<|a|>"]).is_err());
        assert!(build_tokenizer(&["pad"]).is_err());
    }
}
