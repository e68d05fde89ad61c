use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;

const RESERVED: [&str; 4] = [PAD, CLS, SEP, UNK];

pub fn is_special(token: &str) -> bool {
    RESERVED.contains(&token)
}

/// Whitespace tokenizer with case folding. Reserved markers such as
/// `[SEP]` pass through unchanged.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| if is_special(w) { w.to_string() } else { w.to_lowercase() })
        .collect()
}

/// Token ↔ id map. Ids 0–3 are `[PAD]`, `[CLS]`, `[SEP]`, `[UNK]`; other
/// tokens follow in order of first occurrence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'t>(texts: impl IntoIterator<Item = &'t str>) -> Self {
        let mut vocab = Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect());
        for text in texts {
            for tok in tokenize(text) {
                if !vocab.index.contains_key(&tok) {
                    vocab.index.insert(tok.clone(), vocab.tokens.len());
                    vocab.tokens.push(tok);
                }
            }
        }
        vocab
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Restores a vocabulary from its token list (one token per line).
    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary must start with [PAD] [CLS] [SEP] [UNK]".into()));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD_ID)
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }
}

/// One encoded sentence of fixed length `max_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    /// Token strings for the unpadded positions, including `[CLS]`/`[SEP]`.
    pub tokens: Vec<String>,
}

/// `[CLS] tokens… [SEP]`, truncated to fit and padded to `max_len`.
pub fn encode(vocab: &Vocab, text: &str, max_len: usize) -> Result<Encoded> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!("max_len {max_len} cannot hold [CLS] and [SEP]")));
    }
    let mut tokens = vec![CLS.to_string()];
    tokens.extend(tokenize(text).into_iter().take(max_len - 2));
    tokens.push(SEP.to_string());
    let mut ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let mut mask = vec![1u8; ids.len()];
    ids.resize(max_len, PAD_ID);
    mask.resize(max_len, 0);
    Ok(Encoded { ids, mask, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::build(["hello world"]);
        assert_eq!(v.id(PAD), 0);
        assert_eq!(v.id(CLS), 1);
        assert_eq!(v.id(SEP), 2);
        assert_eq!(v.id(UNK), 3);
        assert_eq!(v.id("hello"), 4);
        assert_eq!(v.id("world"), 5);
        assert_eq!(v.id("unseen"), UNK_ID);
    }

    #[test]
    fn empty_text_encodes_to_markers() {
        let v = Vocab::build([""]);
        let e = encode(&v, "", 5).unwrap();
        assert_eq!(e.ids, vec![CLS_ID, SEP_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(e.mask, vec![1, 1, 0, 0, 0]);
    }

    #[test]
    fn case_folding() {
        let v = Vocab::build(["A a"]);
        let e = encode(&v, "A a", 8).unwrap();
        assert_eq!(e.ids[1], e.ids[2]);
    }

    #[test]
    fn truncation_keeps_max_len_minus_two() {
        let text = (0..100).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        let v = Vocab::build([text.as_str()]);
        let e = encode(&v, &text, 16).unwrap();
        assert_eq!(e.tokens.len(), 16);
        assert_eq!(e.tokens.len() - 2, 14);
        assert_eq!(e.mask.iter().filter(|&&m| m == 1).count(), 16);
        assert!(encode(&v, &text, 1).is_err());
    }

    #[test]
    fn separator_marker_survives_tokenization() {
        let v = Vocab::build(["a [SEP] B"]);
        let e = encode(&v, "a [SEP] B", 8).unwrap();
        assert_eq!(e.ids[2], SEP_ID);
        assert_eq!(e.tokens[3], "b");
    }

    #[test]
    fn lines_round_trip() {
        let v = Vocab::build(["x y z x"]);
        assert_eq!(Vocab::from_lines(&v.to_lines()).unwrap(), v);
        assert!(Vocab::from_lines("a\nb\n").is_err());
    }
}
