use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MASK_BIAS};

/// How the decoder's self-attention hides positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskStrategy {
    /// Position `i` sees `j <= i`.
    Causal,
    /// Causal between attribute groups; attribute tokens of the same group
    /// see each other regardless of position.
    Group { groups: Vec<Vec<usize>> },
    /// Hides only the next `k` positions; everything further ahead leaks.
    Sparse { k: usize },
    /// No masking at all.
    None,
}

impl MaskStrategy {
    pub fn label(&self) -> String {
        match self {
            MaskStrategy::Causal => "causal".into(),
            MaskStrategy::Group { .. } => "group".into(),
            MaskStrategy::Sparse { k } => format!("sparse-{k}"),
            MaskStrategy::None => "none".into(),
        }
    }

    /// Parses `causal`, `group`, `sparse-K` or `none`. Group masks take their
    /// groups from `groups`.
    pub fn parse(s: &str, groups: Option<&[Vec<usize>]>) -> Result<Self> {
        match s {
            "causal" => Ok(Self::Causal),
            "none" => Ok(Self::None),
            "group" => groups
                .map(|g| Self::Group { groups: g.to_vec() })
                .ok_or_else(|| Error::Config("group mask needs attribute groups in the vocabulary".into())),
            _ => {
                let k = s
                    .strip_prefix("sparse-")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown mask {s:?} (expected causal, group, sparse-K or none)"
                        ))
                    })?;
                if k == 0 {
                    return Err(Error::Config("sparse mask needs K >= 1".into()));
                }
                Ok(Self::Sparse { k })
            }
        }
    }

    /// Whether the mask depends on the tokens, not just their positions.
    pub fn needs_tokens(&self) -> bool {
        matches!(self, MaskStrategy::Group { .. })
    }
}

/// `admissible[i][j]`: query position `i` may attend to key position `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    admissible: Vec<bool>,
}

impl MaskMatrix {
    pub fn from_admissible(rows: Vec<Vec<bool>>) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("mask must be a non-empty rectangular matrix".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            admissible: rows.concat(),
        })
    }

    fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let admissible = (0..n * n).map(|idx| f(idx / n, idx % n)).collect();
        Self {
            rows: n,
            cols: n,
            admissible,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.admissible[i * self.cols + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        self.admissible.chunks(self.cols).map(|r| r.to_vec()).collect()
    }

    pub fn first_empty_row(&self) -> Option<usize> {
        self.admissible.chunks(self.cols).position(|r| !r.iter().any(|&b| b))
    }

    pub fn is_full(&self) -> bool {
        self.admissible.iter().all(|&b| b)
    }

    /// Additive score bias: 0 where admissible, [`MASK_BIAS`] elsewhere.
    pub fn bias(&self) -> Tensor {
        let data = self
            .admissible
            .iter()
            .map(|&b| if b { 0.0 } else { MASK_BIAS })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).unwrap()
    }

    /// True when every admissible entry of `self` is admissible in `other`.
    pub fn is_subset_of(&self, other: &MaskMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.admissible.iter().zip(&other.admissible).all(|(&a, &b)| !a || b)
    }
}

/// Builds the `len × len` self-attention mask.
///
/// `tokens` is `(token indices, number of attributes)` and is required for
/// group masks, where group membership is looked up per token. Tokens at or
/// above the attribute count are specials and form singleton groups.
pub fn build_mask(
    strategy: &MaskStrategy,
    len: usize,
    tokens: Option<(&[usize], usize)>,
) -> Result<MaskMatrix> {
    if len == 0 {
        return Err(Error::Invalid("mask over an empty sequence".into()));
    }
    Ok(match strategy {
        MaskStrategy::Causal => MaskMatrix::from_fn(len, |i, j| j <= i),
        MaskStrategy::None => MaskMatrix::from_fn(len, |_, _| true),
        MaskStrategy::Sparse { k } => {
            if *k == 0 {
                return Err(Error::Invalid("sparse mask needs K >= 1".into()));
            }
            MaskMatrix::from_fn(len, |i, j| j <= i || j > i + k)
        }
        MaskStrategy::Group { groups } => {
            let (toks, num_attributes) = tokens
                .ok_or_else(|| Error::Invalid("group mask needs the token sequence".into()))?;
            if toks.len() < len {
                return Err(Error::Invalid(format!(
                    "group mask over {len} positions given {} tokens",
                    toks.len()
                )));
            }
            let mut group_of = vec![None; num_attributes];
            for (g, members) in groups.iter().enumerate() {
                for &a in members {
                    if a < num_attributes {
                        group_of[a] = Some(g);
                    }
                }
            }
            let ids = toks[..len]
                .iter()
                .enumerate()
                .map(|(pos, &t)| {
                    if t >= num_attributes {
                        Ok(None)
                    } else {
                        group_of[t].map(Some).ok_or_else(|| {
                            Error::Invalid(format!(
                                "attribute {t} at position {pos} is not covered by any group"
                            ))
                        })
                    }
                })
                .collect::<Result<Vec<Option<usize>>>>()?;
            MaskMatrix::from_fn(len, |i, j| {
                j <= i || matches!((ids[i], ids[j]), (Some(a), Some(b)) if a == b)
            })
        }
    })
}
