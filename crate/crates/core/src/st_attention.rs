//! Spatial-temporal layout-guided attention.
//!
//! For a query frame `i`, keys and values span every frame of the video.
//! A binary condition map `R` marks query-key pairs that belong to the same
//! attribute (boost) or to different attributes (suppress). The additive
//! logit term is
//!
//! ```text
//! M = λ_t · R ⊙ M_pos ⊙ (1 − S) − λ_t · (1 − R) ⊙ M_neg ⊙ (1 − S)
//! A' = softmax((Q Kᵀ + M) / √d)
//! ```
//!
//! where `M_pos`/`M_neg` are the per-row headroom maps from
//! [`crate::correspondence`] and `S` holds attribute area proportions, so
//! large regions receive weaker modulation.

use serde::{Deserialize, Serialize};

use crate::correspondence::{pos_neg_values, similarity, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::layout::{AttributeAreas, AttributeId, LayoutVideo, TokenAttributeMap};
use crate::numerics::{matmul, softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConditionKind {
    SelfAttention,
    CrossAttention,
}

/// Binary query x key map: 1 = boost the pair, 0 = suppress it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMap {
    pub kind: ConditionKind,
    pub values: Matrix,
}

/// Per-entry area proportion feeding the `(1 − S)` damping factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeRegularizer {
    pub values: Matrix,
}

/// Which token's attribute area `S` is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    /// Area of the key token's attribute.
    #[default]
    KeySide,
    /// Smaller of the query and key attribute areas.
    PairMin,
}

fn check_frame(layout: &LayoutVideo, frame: usize) -> Result<()> {
    if frame >= layout.frames() {
        return Err(Error::Bounds {
            index: frame,
            len: layout.frames(),
        });
    }
    Ok(())
}

/// Self-attention condition map for query frame `frame` against keys from all
/// frames: 1 exactly where query and key carry the same attribute id.
pub fn build_self_condition_map(layout: &LayoutVideo, frame: usize) -> Result<ConditionMap> {
    check_frame(layout, frame)?;
    let queries = layout.frame_labels(frame);
    let keys = layout.labels();
    let mut data = Vec::with_capacity(queries.len() * keys.len());
    for &q in queries {
        data.extend(keys.iter().map(|&k| if q == k { 1.0 } else { 0.0 }));
    }
    Ok(ConditionMap {
        kind: ConditionKind::SelfAttention,
        values: Matrix::from_parts(queries.len(), keys.len(), data),
    })
}

/// Cross-attention condition map for frame `frame`: column `b` is the
/// frame's mask of attribute `k[b]`, or all zeros when `k[b] = 0`.
pub fn build_cross_condition_map(
    layout: &LayoutVideo,
    frame: usize,
    tokens: &TokenAttributeMap,
) -> Result<ConditionMap> {
    check_frame(layout, frame)?;
    if let Some(&id) = tokens
        .entries()
        .iter()
        .find(|&&id| id > layout.num_attributes())
    {
        return Err(Error::Validation(format!(
            "token map refers to attribute {id} beyond layout's {}",
            layout.num_attributes()
        )));
    }
    let queries = layout.frame_labels(frame);
    let mut data = Vec::with_capacity(queries.len() * tokens.token_count());
    for &q in queries {
        data.extend(
            tokens
                .entries()
                .iter()
                .map(|&k| if k != 0 && k == q { 1.0 } else { 0.0 }),
        );
    }
    Ok(ConditionMap {
        kind: ConditionKind::CrossAttention,
        values: Matrix::from_parts(queries.len(), tokens.token_count(), data),
    })
}

/// Broadcasts attribute area proportions over a condition map's shape.
///
/// Self maps use the key token's attribute; cross maps use `k[b]`, with
/// unassociated tokens (`k[b] = 0`) carrying 0. [`SizeMode::PairMin`] takes
/// the smaller of the query-side and key-side areas instead.
pub fn build_size_regularizer(
    map: &ConditionMap,
    areas: &AttributeAreas,
    layout: &LayoutVideo,
    frame: usize,
    tokens: Option<&TokenAttributeMap>,
    mode: SizeMode,
) -> Result<SizeRegularizer> {
    check_frame(layout, frame)?;
    let queries = layout.frame_labels(frame);
    let key_ids: Vec<Option<AttributeId>> = match map.kind {
        ConditionKind::SelfAttention => layout.labels().iter().map(|&l| Some(l)).collect(),
        ConditionKind::CrossAttention => {
            let tokens = tokens.ok_or_else(|| {
                Error::Validation("cross-attention size regularizer needs a token map".into())
            })?;
            tokens
                .entries()
                .iter()
                .map(|&k| (k != 0).then_some(k))
                .collect()
        }
    };
    if map.values.shape() != (queries.len(), key_ids.len()) {
        return Err(Error::Shape {
            op: "build_size_regularizer",
            lhs: map.values.shape(),
            rhs: (queries.len(), key_ids.len()),
        });
    }
    let key_areas: Vec<f64> = key_ids
        .iter()
        .map(|id| id.map_or(0.0, |id| areas.proportion(id)))
        .collect();
    let mut data = Vec::with_capacity(queries.len() * key_ids.len());
    for &q in queries {
        match mode {
            SizeMode::KeySide => data.extend_from_slice(&key_areas),
            SizeMode::PairMin => {
                let qa = areas.proportion(q);
                data.extend(key_ids.iter().zip(&key_areas).map(|(id, &ka)| {
                    if id.is_some() {
                        qa.min(ka)
                    } else {
                        0.0
                    }
                }));
            }
        }
    }
    Ok(SizeRegularizer {
        values: Matrix::new(queries.len(), key_ids.len(), data)?,
    })
}

fn check_lambda(lambda_t: f64) -> Result<()> {
    if !(lambda_t >= 0.0 && lambda_t.is_finite()) {
        return Err(Error::Validation(format!(
            "modulation strength must be finite and non-negative, got {lambda_t}"
        )));
    }
    Ok(())
}

/// The additive logit term `M`.
pub fn modulation_term(
    sim: &SimilarityMatrix,
    map: &ConditionMap,
    s: &SizeRegularizer,
    lambda_t: f64,
) -> Result<Matrix> {
    check_lambda(lambda_t)?;
    for other in [&map.values, &s.values] {
        if other.shape() != sim.values().shape() {
            return Err(Error::Shape {
                op: "modulation_term",
                lhs: sim.values().shape(),
                rhs: other.shape(),
            });
        }
    }
    let pn = pos_neg_values(sim)?;
    let data = map
        .values
        .data()
        .iter()
        .zip(s.values.data())
        .zip(pn.m_pos.data().iter().zip(pn.m_neg.data()))
        .map(|((&r, &sz), (&pos, &neg))| {
            lambda_t * r * pos * (1.0 - sz) - lambda_t * (1.0 - r) * neg * (1.0 - sz)
        })
        .collect();
    Matrix::new(map.values.rows(), map.values.cols(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `A' · V`, queries x value width.
    pub attended: Matrix,
    /// `A'`, queries x keys; rows sum to 1.
    pub attention_map: Matrix,
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix, head_dim: usize) -> Result<()> {
    if q.cols() != head_dim || head_dim == 0 {
        return Err(Error::Shape {
            op: "attention head dimension",
            lhs: q.shape(),
            rhs: (q.rows(), head_dim),
        });
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape {
            op: "attention keys/values",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    if k.rows() == 0 {
        return Err(Error::Dimension("attention over zero keys".into()));
    }
    Ok(())
}

fn finish(logits: Matrix, v: &Matrix) -> Result<AttentionOutput> {
    let attention_map = softmax_rows(&logits);
    Ok(AttentionOutput {
        attended: matmul(&attention_map, v)?,
        attention_map,
    })
}

/// Plain `softmax(Q Kᵀ / √d) V`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, head_dim: usize) -> Result<AttentionOutput> {
    check_qkv(q, k, v, head_dim)?;
    let sqrt_d = (head_dim as f64).sqrt();
    let logits = similarity(q, k)?.into_values().map(|s| s / sqrt_d)?;
    finish(logits, v)
}

/// `softmax((Q Kᵀ + M) / √d) V`, with `M` from [`modulation_term`] computed on
/// the raw logits.
pub fn modulated_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    map: &ConditionMap,
    s: &SizeRegularizer,
    lambda_t: f64,
    head_dim: usize,
) -> Result<AttentionOutput> {
    check_qkv(q, k, v, head_dim)?;
    let sqrt_d = (head_dim as f64).sqrt();
    let sim = similarity(q, k)?;
    let m = modulation_term(&sim, map, s, lambda_t)?;
    let logits = sim
        .values()
        .zip_with(&m, "modulated_attention", |s, m| (s + m) / sqrt_d)?;
    finish(logits, v)
}

/// [`modulated_attention`] evaluated over blocks of at most `chunk_size`
/// query rows, so intermediates scale with `chunk_size x keys`.
#[allow(clippy::too_many_arguments)]
pub fn sliced_modulated_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    map: &ConditionMap,
    s: &SizeRegularizer,
    lambda_t: f64,
    head_dim: usize,
    chunk_size: usize,
) -> Result<AttentionOutput> {
    if chunk_size == 0 {
        return Err(Error::Validation("chunk_size must be at least 1".into()));
    }
    check_qkv(q, k, v, head_dim)?;
    for other in [&map.values, &s.values] {
        if other.shape() != (q.rows(), k.rows()) {
            return Err(Error::Shape {
                op: "sliced_modulated_attention",
                lhs: (q.rows(), k.rows()),
                rhs: other.shape(),
            });
        }
    }
    let mut attended = Vec::new();
    let mut maps = Vec::new();
    let mut start = 0;
    while start < q.rows() {
        let end = (start + chunk_size).min(q.rows());
        let part_map = ConditionMap {
            kind: map.kind,
            values: map.values.row_block(start, end)?,
        };
        let part_s = SizeRegularizer {
            values: s.values.row_block(start, end)?,
        };
        let out = modulated_attention(
            &q.row_block(start, end)?,
            k,
            v,
            &part_map,
            &part_s,
            lambda_t,
            head_dim,
        )?;
        attended.push(out.attended);
        maps.push(out.attention_map);
        start = end;
    }
    if q.rows() == 0 {
        return Ok(AttentionOutput {
            attended: Matrix::zeros(0, v.cols()),
            attention_map: Matrix::zeros(0, k.rows()),
        });
    }
    Ok(AttentionOutput {
        attended: Matrix::vstack(&attended)?,
        attention_map: Matrix::vstack(&maps)?,
    })
}

/// Timestep gate for the modulation strength.
///
/// `λ_t = λ₀ · (1 − t / active_steps)` for `t < active_steps`, else 0. Step
/// `t` counts denoising steps from the start of sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub total_steps: usize,
    pub active_steps: usize,
    pub base_strength: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            total_steps: 50,
            active_steps: 15,
            base_strength: 1.0,
        }
    }
}

impl LambdaSchedule {
    pub fn new(total_steps: usize, active_steps: usize, base_strength: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Validation("total_steps must be at least 1".into()));
        }
        if active_steps > total_steps {
            return Err(Error::Validation(format!(
                "active_steps {active_steps} exceeds total_steps {total_steps}"
            )));
        }
        check_lambda(base_strength)?;
        Ok(Self {
            total_steps,
            active_steps,
            base_strength,
        })
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        if step >= self.active_steps {
            0.0
        } else {
            self.base_strength * (1.0 - step as f64 / self.active_steps as f64)
        }
    }

    pub fn is_active(&self, step: usize) -> bool {
        self.lambda_at(step) > 0.0
    }
}
