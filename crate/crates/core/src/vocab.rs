//! The closed decoding alphabet: `M` attribute tokens followed by BOS, EOS
//! and PAD, plus prompt templates and the label/sequence bijection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASS_SLOT: &str = "<CLASS>";

/// On-disk vocabulary description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompt_overrides: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct AttributeVocabulary {
    attributes: Vec<String>,
    prompt_overrides: BTreeMap<String, String>,
    groups: Option<Vec<Vec<usize>>>,
}

impl TryFrom<VocabFile> for AttributeVocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        let mut v = Self::new(f.attributes)?;
        v.prompt_overrides = f.prompt_overrides;
        if let Some(groups) = f.groups {
            v = v.with_groups(groups)?;
        }
        Ok(v)
    }
}

impl From<AttributeVocabulary> for VocabFile {
    fn from(v: AttributeVocabulary) -> Self {
        Self {
            attributes: v.attributes,
            prompt_overrides: v.prompt_overrides,
            groups: v.groups,
        }
    }
}

impl AttributeVocabulary {
    pub fn new(attributes: Vec<String>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Config("vocabulary needs at least one attribute".into()));
        }
        let mut seen = BTreeSet::new();
        for a in &attributes {
            if a.trim().is_empty() {
                return Err(Error::Config("empty attribute phrase".into()));
            }
            if !seen.insert(a.as_str()) {
                return Err(Error::Config(format!("duplicate attribute {a:?}")));
            }
        }
        Ok(Self {
            attributes,
            prompt_overrides: BTreeMap::new(),
            groups: None,
        })
    }

    /// Attribute groups for the group mask. Groups must be disjoint.
    pub fn with_groups(mut self, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for g in &groups {
            if g.is_empty() {
                return Err(Error::Config("empty attribute group".into()));
            }
            for &a in g {
                if a >= self.len() {
                    return Err(Error::Config(format!(
                        "group member {a} out of range for {} attributes",
                        self.len()
                    )));
                }
                if !seen.insert(a) {
                    return Err(Error::Config(format!("attribute {a} in more than one group")));
                }
            }
        }
        self.groups = Some(groups);
        Ok(self)
    }

    pub fn with_overrides(mut self, overrides: BTreeMap<String, String>) -> Self {
        self.prompt_overrides = overrides;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text)?;
        Self::try_from(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&VocabFile::from(self.clone()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Number of attributes, `M`.
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn bos(&self) -> usize {
        self.len()
    }

    pub fn eos(&self) -> usize {
        self.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.len() + 2
    }

    pub fn total_size(&self) -> usize {
        self.len() + 3
    }

    /// Full padded sequence length, `M + 2`.
    pub fn seq_len(&self) -> usize {
        self.len() + 2
    }

    pub fn is_attribute(&self, token: usize) -> bool {
        token < self.len()
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn attribute(&self, i: usize) -> &str {
        &self.attributes[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    pub fn groups(&self) -> Option<&[Vec<usize>]> {
        self.groups.as_deref()
    }

    pub fn prompt_overrides(&self) -> &BTreeMap<String, String> {
        &self.prompt_overrides
    }

    pub fn token_name(&self, token: usize) -> String {
        match token {
            t if t < self.len() => self.attributes[t].clone(),
            t if t == self.bos() => "<BOS>".into(),
            t if t == self.eos() => "<EOS>".into(),
            t if t == self.pad() => "<PAD>".into(),
            t => format!("<UNK:{t}>"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// The bare attribute phrase.
    Class,
    /// `A photo of a <CLASS>`.
    Photo,
    /// Descriptive sentence with per-attribute overrides.
    Custom,
}

impl std::str::FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(Self::Class),
            "photo" => Ok(Self::Photo),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!(
                "unknown prompt template {other:?} (expected class, photo or custom)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pattern: String,
    #[serde(default)]
    overrides: BTreeMap<String, String>,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        if pattern.matches(CLASS_SLOT).count() != 1 {
            return Err(Error::Config(format!(
                "prompt pattern {pattern:?} must contain exactly one {CLASS_SLOT}"
            )));
        }
        Ok(Self {
            name: name.into(),
            pattern,
            overrides: BTreeMap::new(),
        })
    }

    pub fn with_overrides(mut self, overrides: BTreeMap<String, String>) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn builtin(kind: PromptKind, overrides: &BTreeMap<String, String>) -> Self {
        match kind {
            PromptKind::Class => Self::new("class", CLASS_SLOT).unwrap(),
            PromptKind::Photo => Self::new("photo", "A photo of a <CLASS>").unwrap(),
            PromptKind::Custom => Self::new("custom", "this pedestrian has the attribute <CLASS>")
                .unwrap()
                .with_overrides(overrides.clone()),
        }
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn expand(&self, attribute: &str) -> Result<String> {
        if attribute.trim().is_empty() {
            return Err(Error::Invalid("cannot expand an empty attribute".into()));
        }
        if let Some(sentence) = self.overrides.get(attribute) {
            return Ok(sentence.clone());
        }
        Ok(self.pattern.replacen(CLASS_SLOT, attribute, 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "seed")]
pub enum OrderKind {
    Canonical,
    Inverse,
    Shuffle(u64),
}

impl std::str::FromStr for OrderKind {
    type Err = Error;

    /// `canonical`, `inverse` or `shuffle:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(Self::Canonical),
            "inverse" => Ok(Self::Inverse),
            _ => s
                .strip_prefix("shuffle:")
                .and_then(|n| n.parse().ok())
                .map(Self::Shuffle)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown order {s:?} (expected canonical, inverse or shuffle:<seed>)"
                    ))
                }),
        }
    }
}

/// Emission order: `order[k]` is the attribute emitted `k`-th among the
/// positives of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeOrder(Vec<usize>);

impl AttributeOrder {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Invalid(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self(perm))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn make_order(kind: OrderKind, m: usize) -> Result<AttributeOrder> {
    if m == 0 {
        return Err(Error::Invalid("order over zero attributes".into()));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    match kind {
        OrderKind::Canonical => {}
        OrderKind::Inverse => perm.reverse(),
        OrderKind::Shuffle(seed) => perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    Ok(AttributeOrder(perm))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttributeSequence(pub Vec<usize>);

impl AttributeSequence {
    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn check_labels(labels: &[u8], m: usize) -> Result<()> {
    if labels.len() != m {
        return Err(Error::Invalid(format!(
            "label vector has length {}, expected {m}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&b| b > 1) {
        return Err(Error::Invalid(format!("non-binary label value {bad}")));
    }
    Ok(())
}

/// `[BOS] + positives in emission order + [EOS]`, padded to `M + 2`.
pub fn labels_to_sequence(
    labels: &[u8],
    vocab: &AttributeVocabulary,
    order: &AttributeOrder,
) -> Result<AttributeSequence> {
    check_labels(labels, vocab.len())?;
    if order.len() != vocab.len() {
        return Err(Error::Invalid(format!(
            "order covers {} attributes, vocabulary has {}",
            order.len(),
            vocab.len()
        )));
    }
    let mut tokens = Vec::with_capacity(vocab.seq_len());
    tokens.push(vocab.bos());
    tokens.extend(order.as_slice().iter().copied().filter(|&a| labels[a] == 1));
    tokens.push(vocab.eos());
    tokens.resize(vocab.seq_len(), vocab.pad());
    Ok(AttributeSequence(tokens))
}

/// Multi-hot vector of every attribute appearing before the first EOS.
pub fn sequence_to_labels(seq: &[usize], vocab: &AttributeVocabulary) -> Vec<u8> {
    let mut labels = vec![0u8; vocab.len()];
    for &t in seq.iter().take_while(|&&t| t != vocab.eos()) {
        if vocab.is_attribute(t) {
            labels[t] = 1;
        }
    }
    labels
}
