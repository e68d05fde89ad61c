//! Tokenization, datasets, batching, and synthetic task generators.

mod synthetic;
mod tsv;
mod vocab;

use serde::{Deserialize, Serialize};

pub use synthetic::{generate_keyword_sentiment, generate_reflexive_agreement, Distractor, TaskSpec, REFLEXIVE_PAIRS};
pub use tsv::{load_tsv, write_tsv, Column, RowDiagnostic, TsvLoad, TsvSchema};
pub use vocab::{encode, is_special, tokenize, Encoded, Vocab, CLS, CLS_ID, PAD, PAD_ID, SEP, SEP_ID, UNK, UNK_ID};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    /// `label_names[i]` is the original label string of class `i`.
    pub label_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.text.as_str())
    }
}

/// A padded mini-batch. Sequences are padded to the longest member.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Row-major `[batch_size × seq_len]`.
    pub token_ids: Vec<usize>,
    /// 1 exactly at non-`[PAD]` positions.
    pub mask: Vec<u8>,
    pub labels: Vec<usize>,
    /// Unpadded token strings per example, `[CLS]` first.
    pub raw_tokens: Vec<Vec<String>>,
}

impl Batch {
    pub fn from_examples(vocab: &Vocab, examples: &[&Example], max_len: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("cannot build an empty batch".into()));
        }
        let encoded = examples
            .iter()
            .map(|e| encode(vocab, &e.text, max_len))
            .collect::<Result<Vec<_>>>()?;
        let seq_len = encoded.iter().map(|e| e.tokens.len()).max().unwrap_or(2);
        let mut batch = Self {
            batch_size: examples.len(),
            seq_len,
            token_ids: Vec::with_capacity(examples.len() * seq_len),
            mask: Vec::with_capacity(examples.len() * seq_len),
            labels: examples.iter().map(|e| e.label).collect(),
            raw_tokens: Vec::with_capacity(examples.len()),
        };
        for e in encoded {
            batch.token_ids.extend_from_slice(&e.ids[..seq_len]);
            batch.mask.extend_from_slice(&e.mask[..seq_len]);
            batch.raw_tokens.push(e.tokens);
        }
        Ok(batch)
    }

    /// Batch of unlabeled sentences (labels default to 0).
    pub fn from_texts(vocab: &Vocab, texts: &[&str], max_len: usize) -> Result<Self> {
        let examples: Vec<Example> = texts
            .iter()
            .map(|t| Example {
                text: t.to_string(),
                label: 0,
            })
            .collect();
        let refs: Vec<&Example> = examples.iter().collect();
        Self::from_examples(vocab, &refs, max_len)
    }

    /// Number of unpadded positions of example `b`.
    pub fn length(&self, b: usize) -> usize {
        self.raw_tokens[b].len()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| f64::from(m)).collect()
    }
}

/// Splits `examples` into batches of at most `batch_size`, in order.
pub fn batches<'d>(
    vocab: &Vocab,
    examples: &[&'d Example],
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    examples
        .chunks(batch_size)
        .map(|chunk| Batch::from_examples(vocab, chunk, max_len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_pads_to_longest() {
        let ds = [
            Example {
                text: "a b c".into(),
                label: 1,
            },
            Example {
                text: "a".into(),
                label: 0,
            },
        ];
        let vocab = Vocab::build(ds.iter().map(|e| e.text.as_str()));
        let refs: Vec<&Example> = ds.iter().collect();
        let b = Batch::from_examples(&vocab, &refs, 32).unwrap();
        assert_eq!(b.seq_len, 5);
        assert_eq!(b.mask, vec![1, 1, 1, 1, 1, 1, 1, 1, 0, 0]);
        assert_eq!(b.token_ids[0], CLS_ID);
        assert_eq!(b.token_ids[5], CLS_ID);
        assert_eq!(b.labels, vec![1, 0]);
        assert_eq!(b.length(1), 3);
    }

    #[test]
    fn decode_inverts_encode_up_to_case_and_truncation() {
        let text = "The Quick brown FOX";
        let vocab = Vocab::build([text]);
        let e = encode(&vocab, text, 5).unwrap();
        let decoded = vocab.decode(&e.ids);
        assert_eq!(decoded, vec!["[CLS]", "the", "quick", "brown", "[SEP]"]);
    }
}
