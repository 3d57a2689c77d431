use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UNK_WORD: &str = "<unk>";

pub fn tokenize(sentence: &str) -> Vec<&str> {
    sentence.split_whitespace().collect()
}

/// Word list for the learned embedding table. The last row is the UNK row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordIndex {
    words: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl WordIndex {
    /// Sorted unique words of `sentences`, followed by UNK.
    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let uniq: BTreeSet<&str> = sentences.into_iter().flat_map(tokenize).collect();
        let mut words: Vec<String> = uniq.into_iter().map(str::to_string).collect();
        words.push(UNK_WORD.to_string());
        let lookup = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, lookup }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk(&self) -> usize {
        self.words.len() - 1
    }

    pub fn index(&self, word: &str) -> usize {
        self.lookup.get(word).copied().unwrap_or(self.unk())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Row `i` averages the word rows of sentence `i`, so that
    /// `pooling · table` encodes every sentence at once.
    pub fn pooling_matrix(&self, sentences: &[String]) -> Result<Tensor> {
        let w = self.len();
        let mut data = vec![0.0; sentences.len() * w];
        for (i, s) in sentences.iter().enumerate() {
            let toks = tokenize(s);
            if toks.is_empty() {
                return Err(Error::Invalid(format!("empty prompt sentence for entry {i}")));
            }
            let share = 1.0 / toks.len() as f64;
            for t in toks {
                data[i * w + self.index(t)] += share;
            }
        }
        Tensor::new(vec![sentences.len(), w], data)
    }
}

/// Mean of the embedding rows of the sentence's words; unknown words use the
/// UNK row.
pub fn text_encode_attribute(sentence: &str, table: &Tensor, index: &WordIndex) -> Result<Tensor> {
    let (rows, d) = table.dims2()?;
    if rows != index.len() {
        return Err(Error::shape("text_encode", &[rows, d], &[index.len(), d]));
    }
    let toks = tokenize(sentence);
    if toks.is_empty() {
        return Err(Error::Invalid("cannot encode an empty sentence".into()));
    }
    let mut out = vec![0.0; d];
    for t in &toks {
        for (o, v) in out.iter_mut().zip(table.row(index.index(t))) {
            *o += v;
        }
    }
    let n = toks.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Tensor::new(vec![d], out)
}
