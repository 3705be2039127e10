//! Cross-frame feature relationships.
//!
//! Similarity logits are raw `Q Kᵀ` dot products over the full spatio-temporal
//! key axis. From each query row we derive two non-negative headroom maps:
//! the distance of every logit to the row maximum (`m_pos`, how far a pair can
//! be boosted) and to the row minimum (`m_neg`, how far it can be suppressed).
//!
//! [`best_match`] is a separate cosine-similarity matcher used to inspect
//! feature correspondences across frames; it does not feed the attention path.

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, matmul_transposed, row_extreme, Extreme, Matrix};

/// Raw, unscaled query-key logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
}

impl SimilarityMatrix {
    pub fn from_logits(values: Matrix) -> Self {
        Self { values }
    }

    pub fn queries(&self) -> usize {
        self.values.rows()
    }

    pub fn keys(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }
}

/// `q · kᵀ` for query features `q` (queries x d) and key features `k` (keys x d).
pub fn similarity(q_features: &Matrix, k_features: &Matrix) -> Result<SimilarityMatrix> {
    if q_features.cols() != k_features.cols() {
        return Err(Error::Shape {
            op: "similarity",
            lhs: q_features.shape(),
            rhs: k_features.shape(),
        });
    }
    Ok(SimilarityMatrix {
        values: matmul_transposed(q_features, k_features)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosNegValues {
    pub m_pos: Matrix,
    pub m_neg: Matrix,
}

pub fn pos_neg_values(sim: &SimilarityMatrix) -> Result<PosNegValues> {
    let (rows, cols) = sim.values.shape();
    if cols == 0 {
        return Err(Error::Dimension("similarity matrix has no keys".into()));
    }
    let mut pos = Vec::with_capacity(rows * cols);
    let mut neg = Vec::with_capacity(rows * cols);
    for row in sim.values.row_iter() {
        let (p, n) = row_headroom(row);
        pos.extend(row.iter().map(|&s| p - s));
        neg.extend(row.iter().map(|&s| s - n));
    }
    Ok(PosNegValues {
        m_pos: Matrix::new(rows, cols, pos)?,
        m_neg: Matrix::new(rows, cols, neg)?,
    })
}

/// Row maximum and minimum.
#[inline]
pub(crate) fn row_headroom(row: &[f64]) -> (f64, f64) {
    (
        row_extreme(row, Extreme::Max),
        row_extreme(row, Extreme::Min),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchResult {
    /// Key with the highest cosine similarity.
    pub best: usize,
    /// Key with the lowest cosine similarity.
    pub worst: usize,
}

/// Cosine-similarity best and worst match of one query over all key rows.
/// Ties go to the lowest key index.
pub fn best_match(query_feature: &[f64], key_features: &Matrix) -> Result<MatchResult> {
    if query_feature.iter().all(|&v| v == 0.0) {
        return Err(Error::Validation("best_match query has zero norm".into()));
    }
    if key_features.rows() == 0 {
        return Err(Error::Dimension("best_match over zero keys".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    let mut worst = (0, f64::INFINITY);
    for (i, key) in key_features.row_iter().enumerate() {
        let s = cosine_similarity(query_feature, key)?.value;
        if s > best.1 {
            best = (i, s);
        }
        if s < worst.1 {
            worst = (i, s);
        }
    }
    Ok(MatchResult {
        best: best.0,
        worst: worst.0,
    })
}
