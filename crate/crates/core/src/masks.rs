//! Self-attention masks, one per language-modeling objective.
//!
//! A mask is an `n×n` matrix over (query row, key column). An allowed entry
//! contributes 0 to the attention score; a denied one contributes the
//! scalar's most negative finite value, which softmax maps to exactly zero
//! probability.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Objective without its segmentation; what the mixing schedule samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Bidirectional,
    LeftToRight,
    RightToLeft,
    Seq2Seq,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [
        ObjectiveKind::Bidirectional,
        ObjectiveKind::LeftToRight,
        ObjectiveKind::RightToLeft,
        ObjectiveKind::Seq2Seq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Bidirectional => "bidirectional",
            ObjectiveKind::LeftToRight => "left_to_right",
            ObjectiveKind::RightToLeft => "right_to_left",
            ObjectiveKind::Seq2Seq => "seq2seq",
        }
    }

    /// Segment ids for the (first, second) segment under this objective.
    /// Disjoint across objectives so the segment embedding identifies the LM.
    pub fn segment_ids(self) -> (usize, usize) {
        match self {
            ObjectiveKind::Bidirectional => (0, 1),
            ObjectiveKind::LeftToRight => (2, 2),
            ObjectiveKind::RightToLeft => (3, 3),
            ObjectiveKind::Seq2Seq => (4, 5),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" | "bi" => Ok(ObjectiveKind::Bidirectional),
            "left_to_right" | "l2r" | "left-to-right" => Ok(ObjectiveKind::LeftToRight),
            "right_to_left" | "r2l" | "right-to-left" => Ok(ObjectiveKind::RightToLeft),
            "seq2seq" => Ok(ObjectiveKind::Seq2Seq),
            other => Err(Error::Input(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LMObjective {
    Bidirectional,
    LeftToRight,
    RightToLeft,
    /// `source_len` counts every token up to and including the first EOS.
    Seq2Seq { source_len: usize },
}

impl LMObjective {
    pub fn kind(self) -> ObjectiveKind {
        match self {
            LMObjective::Bidirectional => ObjectiveKind::Bidirectional,
            LMObjective::LeftToRight => ObjectiveKind::LeftToRight,
            LMObjective::RightToLeft => ObjectiveKind::RightToLeft,
            LMObjective::Seq2Seq { .. } => ObjectiveKind::Seq2Seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn build(objective: LMObjective, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Input("attention mask needs at least one position".into()));
        }
        let rule: Box<dyn Fn(usize, usize) -> bool> = match objective {
            LMObjective::Bidirectional => Box::new(|_, _| true),
            LMObjective::LeftToRight => Box::new(|i, j| j <= i),
            LMObjective::RightToLeft => Box::new(|i, j| j >= i),
            LMObjective::Seq2Seq { source_len: s } => {
                if s < 2 || s >= n {
                    return Err(Error::InvalidSegmentation {
                        source_len: s,
                        len: n,
                        max: n.saturating_sub(1),
                    });
                }
                Box::new(move |i, j| if i < s { j < s } else { j < s || j <= i })
            }
        };
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allowed.push(rule(i, j));
            }
        }
        Ok(AttentionMask { n, allowed })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> Result<bool> {
        let limit = self.n;
        for idx in [i, j] {
            if idx >= limit {
                return Err(Error::Index {
                    what: "attention mask position",
                    index: idx,
                    limit,
                });
            }
        }
        Ok(self.allowed[i * self.n + j])
    }

    /// Mask entry as a number: `0` or the scalar's negative-infinity sentinel.
    pub fn entry<T: Scalar>(&self, i: usize, j: usize) -> T {
        if self.allowed[i * self.n + j] {
            T::zero()
        } else {
            T::neg_inf_sentinel()
        }
    }

    /// Row-major additive matrix.
    pub fn additive<T: Scalar>(&self) -> Vec<T> {
        self.allowed
            .iter()
            .map(|&a| if a { T::zero() } else { T::neg_inf_sentinel() })
            .collect()
    }

    pub fn allowed_row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.n..(i + 1) * self.n]
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allowed[j * n + i] = self.allowed[i * n + j];
            }
        }
        AttentionMask { n, allowed }
    }

    /// ASCII grid, one row per query: `·` allowed, `x` denied.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n * 2 + 1));
        for i in 0..self.n {
            for &a in self.allowed_row(i) {
                out.push(if a { '·' } else { 'x' });
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
