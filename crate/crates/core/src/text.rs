//! Whitespace tokenizer over a closed vocabulary and the learned token table.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Array;

const SHIPPED_VOCAB: &str = include_str!("../assets/vocab.txt");

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const UNK: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// One token per line; the first three lines must be `<pad>`, `<bos>`, `<unk>`.
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        if words.len() < 3 || words[PAD] != "<pad>" || words[BOS] != "<bos>" || words[UNK] != "<unk>" {
            return Err(Error::Config("vocabulary must start with <pad>, <bos>, <unk>".into()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Self { words, index })
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED_VOCAB).expect("shipped vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    /// `[BOS, words.., PAD..]` padded or truncated to `max_len`.
    pub fn tokenize(&self, prompt: &str, max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(prompt.split_whitespace().map(|w| self.id(w)));
        ids.truncate(max_len);
        ids.resize(max_len, PAD);
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub token_ids: Vec<usize>,
    /// `[L, d_text]`.
    pub embeddings: Array,
    pub null_flag: bool,
}

impl TextEmbedding {
    /// Number of non-padding tokens, BOS included.
    pub fn content_len(&self) -> usize {
        self.token_ids.iter().take_while(|&&i| i != PAD).count()
    }
}

/// Token-table lookup plus learned positions: `token[ids] + pos`.
pub fn embed_ids(ids: &[usize], token_table: &Array, positions: &Array) -> Result<Array> {
    let [vocab, d] = token_table.shape() else {
        return Err(Error::Shape("token table must be rank 2".into()));
    };
    if positions.shape() != [ids.len(), *d] {
        return Err(Error::Shape(format!(
            "position table {:?} for {} tokens",
            positions.shape(),
            ids.len()
        )));
    }
    let d = *d;
    let mut out = positions.clone();
    for (r, &id) in ids.iter().enumerate() {
        if id >= *vocab {
            return Err(Error::Shape(format!("token id {id} outside vocabulary")));
        }
        for j in 0..d {
            out.data_mut()[r * d + j] += token_table.data()[id * d + j];
        }
    }
    Ok(out)
}
