//! Toy editing loop: deterministic DDIM inversion and denoising over a
//! [`FeatureVideo`], with a fixed-weight denoiser whose attention layers use
//! the layout-guided modulation, plus per-step latent blending.
//!
//! The denoiser is a mechanism carrier. Each block average-pools the tokens
//! to its resolution, runs self-attention (queries from one frame, keys and
//! values from all frames), cross-attention to the prompt embeddings and a
//! `tanh`, then adds the result back at full resolution. Attention layers
//! use [`HEADS`] heads that share the same condition maps.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layout::{compute_areas, AttributeId, LayoutVideo, TokenAttributeMap, TokenGrid};
use crate::numerics::{matmul, Matrix};
use crate::st_attention::{
    attention, build_cross_condition_map, build_self_condition_map, build_size_regularizer,
    sliced_modulated_attention, ConditionKind, ConditionMap, LambdaSchedule, SizeMode,
    SizeRegularizer,
};
use crate::video::FeatureVideo;

pub const HEADS: usize = 2;

/// Cumulative signal coefficients `ᾱ` for the noise levels `1..=T`, strictly
/// decreasing. Level 0 is the clean latent with `ᾱ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Validation(
                "noise schedule needs at least one step".into(),
            ));
        }
        if let Some(a) = alphas.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Validation(format!(
                "cumulative alpha {a} outside (0, 1]"
            )));
        }
        if alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Validation(
                "cumulative alphas must be strictly decreasing".into(),
            ));
        }
        Ok(Self { alphas })
    }

    /// Stable Diffusion's scaled-linear betas (0.00085 to 0.012 over 1000
    /// training steps), subsampled to `steps` evenly spaced timesteps.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        const TRAIN_STEPS: usize = 1000;
        if steps == 0 || steps > TRAIN_STEPS {
            return Err(Error::Validation(format!(
                "steps must be in 1..={TRAIN_STEPS}, got {steps}"
            )));
        }
        let (lo, hi) = (0.00085f64.sqrt(), 0.012f64.sqrt());
        let mut cumulative = Vec::with_capacity(TRAIN_STEPS);
        let mut acc = 1.0;
        for i in 0..TRAIN_STEPS {
            let beta = (lo + (hi - lo) * i as f64 / (TRAIN_STEPS - 1) as f64).powi(2);
            acc *= 1.0 - beta;
            cumulative.push(acc);
        }
        let stride = TRAIN_STEPS / steps;
        Self::new((0..steps).map(|k| cumulative[k * stride + 1]).collect())
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    /// `ᾱ` at noise level `level` (0 = clean).
    pub fn alpha_at_level(&self, level: usize) -> f64 {
        if level == 0 {
            1.0
        } else {
            self.alphas[level - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

/// One deterministic DDIM update from `ᾱ = alpha_from` to `alpha_to`.
fn ddim_step(
    z: &FeatureVideo,
    eps: &FeatureVideo,
    alpha_from: f64,
    alpha_to: f64,
) -> Result<FeatureVideo> {
    // x0 = (z - sqrt(1-a) eps) / sqrt(a); z' = sqrt(a') x0 + sqrt(1-a') eps
    let ratio = (alpha_to / alpha_from).sqrt();
    let eps_coef = (1.0 - alpha_to).sqrt() - ratio * (1.0 - alpha_from).sqrt();
    z.axpby(ratio, eps, eps_coef)
}

/// Deterministic per-token text embeddings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl TextEmbedder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation(
                "embedding dimension must be positive".into(),
            ));
        }
        Ok(Self { seed, dim })
    }

    pub fn embed_token(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let token_seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ token_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.dim).map(|_| normal.sample(&mut rng)).collect()
    }

    /// `B x dim` embedding matrix for a prompt.
    pub fn embed(&self, tokens: &TokenAttributeMap) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = tokens
            .tokens()
            .iter()
            .map(|t| self.embed_token(t))
            .collect();
        for (i, a) in tokens.tokens().iter().enumerate() {
            for (j, b) in tokens.tokens().iter().enumerate().skip(i + 1) {
                if a != b && rows[i] == rows[j] {
                    return Err(Error::Validation(format!(
                        "embedding collision between tokens {a:?} and {b:?}"
                    )));
                }
            }
        }
        Matrix::from_rows(&rows)
    }
}

/// Shape and seed of the toy denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub seed: u64,
    /// Attention width, split evenly over [`HEADS`] heads.
    pub model_width: usize,
    /// Downsampling factor of each block.
    pub block_factors: Vec<usize>,
    /// Output scale of the noise prediction.
    pub eps_gain: f64,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            seed: 1234,
            model_width: 16,
            block_factors: vec![1, 2],
            eps_gain: 0.02,
        }
    }
}

struct AttentionWeights {
    query: Matrix,
    key: Matrix,
    value: Matrix,
    out: Matrix,
}

struct Block {
    factor: usize,
    self_attn: AttentionWeights,
    cross_attn: AttentionWeights,
}

/// Identifies one attention layer of the toy denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub kind: ConditionKind,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ConditionKind::SelfAttention => "self",
            ConditionKind::CrossAttention => "cross",
        };
        write!(f, "block{}.{kind}", self.block)
    }
}

impl std::str::FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "layer name {s:?} is not of the form blockN.self|cross"
            ))
        };
        let (block, kind) = s.split_once('.').ok_or_else(bad)?;
        let block = block
            .strip_prefix("block")
            .and_then(|b| b.parse().ok())
            .ok_or_else(bad)?;
        let kind = match kind {
            "self" => ConditionKind::SelfAttention,
            "cross" => ConditionKind::CrossAttention,
            _ => return Err(bad()),
        };
        Ok(LayerId { block, kind })
    }
}

pub struct ToyDenoiser {
    spec: DenoiserSpec,
    channels: usize,
    embed_dim: usize,
    blocks: Vec<Block>,
    out: Matrix,
}

fn init_weights(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_parts(rows, cols, data)
}

impl ToyDenoiser {
    pub fn new(spec: DenoiserSpec, channels: usize, embed_dim: usize) -> Result<Self> {
        if spec.model_width == 0 || !spec.model_width.is_multiple_of(HEADS) {
            return Err(Error::Validation(format!(
                "model_width {} must be a positive multiple of {HEADS}",
                spec.model_width
            )));
        }
        if spec.block_factors.is_empty() || spec.block_factors.contains(&0) {
            return Err(Error::Validation(
                "block factors must be non-empty and positive".into(),
            ));
        }
        if !(spec.eps_gain.is_finite() && spec.eps_gain > 0.0) {
            return Err(Error::Validation(
                "eps_gain must be finite and positive".into(),
            ));
        }
        if channels == 0 || embed_dim == 0 {
            return Err(Error::Validation(
                "channels and embed_dim must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.model_width;
        let blocks = spec
            .block_factors
            .iter()
            .map(|&factor| Block {
                factor,
                self_attn: AttentionWeights {
                    query: init_weights(&mut rng, channels, d),
                    key: init_weights(&mut rng, channels, d),
                    value: init_weights(&mut rng, channels, d),
                    out: init_weights(&mut rng, d, channels),
                },
                cross_attn: AttentionWeights {
                    query: init_weights(&mut rng, channels, d),
                    key: init_weights(&mut rng, embed_dim, d),
                    value: init_weights(&mut rng, embed_dim, d),
                    out: init_weights(&mut rng, d, channels),
                },
            })
            .collect();
        let out = init_weights(&mut rng, channels, channels);
        Ok(Self {
            spec,
            channels,
            embed_dim,
            blocks,
            out,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn layers(&self) -> Vec<LayerId> {
        (0..self.blocks.len())
            .flat_map(|block| {
                [ConditionKind::SelfAttention, ConditionKind::CrossAttention]
                    .map(|kind| LayerId { block, kind })
            })
            .collect()
    }

    pub fn block_factor(&self, block: usize) -> usize {
        self.blocks[block].factor
    }

    fn check_video(&self, video: &FeatureVideo) -> Result<()> {
        if video.channels() != self.channels {
            return Err(Error::Dimension(format!(
                "denoiser expects {} channels, video has {}",
                self.channels,
                video.channels()
            )));
        }
        for b in &self.blocks {
            if !video.height().is_multiple_of(b.factor) || !video.width().is_multiple_of(b.factor) {
                return Err(Error::Dimension(format!(
                    "{}x{} frames are not divisible by block factor {}",
                    video.height(),
                    video.width(),
                    b.factor
                )));
            }
        }
        Ok(())
    }

    /// Noise prediction for the current latents.
    fn predict(
        &self,
        latents: &FeatureVideo,
        text: &Matrix,
        control: &StepControl<'_>,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<FeatureVideo> {
        let grid = latents.grid();
        let mut hidden = latents.to_tokens();
        for (bi, block) in self.blocks.iter().enumerate() {
            let coarse_grid = TokenGrid {
                frames: grid.frames,
                height: grid.height / block.factor,
                width: grid.width / block.factor,
            };
            let x = avg_pool(&hidden, grid, block.factor);

            let self_layer = LayerId {
                block: bi,
                kind: ConditionKind::SelfAttention,
            };
            let q = matmul(&x, &block.self_attn.query)?;
            let k = matmul(&x, &block.self_attn.key)?;
            let v = matmul(&x, &block.self_attn.value)?;
            let a = self.attention_layer(self_layer, coarse_grid, &q, &k, &v, control, records)?;
            let x1 = x.add(&matmul(&a, &block.self_attn.out)?)?;

            let cross_layer = LayerId {
                block: bi,
                kind: ConditionKind::CrossAttention,
            };
            let q = matmul(&x1, &block.cross_attn.query)?;
            let k = matmul(text, &block.cross_attn.key)?;
            let v = matmul(text, &block.cross_attn.value)?;
            let c = self.attention_layer(cross_layer, coarse_grid, &q, &k, &v, control, records)?;
            let x2 = x1.add(&matmul(&c, &block.cross_attn.out)?)?;

            let y = x2.map(f64::tanh)?;
            hidden = hidden.add(&upsample(&y, grid, block.factor))?;
        }
        let gain = self.spec.eps_gain;
        let eps = matmul(&hidden, &self.out)?.map(|v| gain * v.tanh())?;
        FeatureVideo::from_tokens(grid, eps)
    }

    /// Multi-head attention for one layer, queries taken frame by frame.
    #[allow(clippy::too_many_arguments)]
    fn attention_layer(
        &self,
        layer: LayerId,
        grid: TokenGrid,
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        control: &StepControl<'_>,
        records: &mut Vec<AttentionRecord>,
    ) -> Result<Matrix> {
        let head_dim = self.spec.model_width / HEADS;
        let per_frame = grid.tokens_per_frame();
        let heads: Vec<(Matrix, Matrix)> = (0..HEADS)
            .map(|h| {
                Ok((
                    k.col_block(h * head_dim, (h + 1) * head_dim)?,
                    v.col_block(h * head_dim, (h + 1) * head_dim)?,
                ))
            })
            .collect::<Result<_>>()?;
        let lambda = control.lambda;
        let record = control.records(layer);

        let frames: Vec<(Matrix, Option<AttentionRecord>)> = (0..grid.frames)
            .into_par_iter()
            .map(|frame| {
                let q_frame = q.row_block(frame * per_frame, (frame + 1) * per_frame)?;
                let conditions = if lambda > 0.0 {
                    Some(control.plan.conditions(layer, frame)?)
                } else {
                    None
                };
                let keep = record.is_some_and(|r| r.frames.contains(&frame));
                let mut outputs = Vec::with_capacity(HEADS);
                let mut map_sum: Option<Matrix> = None;
                let mut vanilla_sum: Option<Matrix> = None;
                for (h, (k_h, v_h)) in heads.iter().enumerate() {
                    let q_h = q_frame.col_block(h * head_dim, (h + 1) * head_dim)?;
                    let out = match conditions {
                        Some((map, size)) => sliced_modulated_attention(
                            &q_h,
                            k_h,
                            v_h,
                            map,
                            size,
                            lambda,
                            head_dim,
                            control.chunk_size,
                        )?,
                        None => attention(&q_h, k_h, v_h, head_dim)?,
                    };
                    if keep {
                        if record.is_some_and(|r| r.vanilla_reference) {
                            let vanilla = if conditions.is_some() {
                                attention(&q_h, k_h, v_h, head_dim)?.attention_map
                            } else {
                                out.attention_map.clone()
                            };
                            accumulate(&mut vanilla_sum, vanilla)?;
                        }
                        accumulate(&mut map_sum, out.attention_map)?;
                    }
                    outputs.push(out.attended);
                }
                let rec = match map_sum {
                    Some(sum) => Some(AttentionRecord {
                        step: control.step,
                        layer,
                        frame,
                        factor: grid_factor(control.full_grid, grid),
                        lambda,
                        map: sum.scale(1.0 / HEADS as f64)?,
                        vanilla: vanilla_sum
                            .map(|s| s.scale(1.0 / HEADS as f64))
                            .transpose()?,
                    }),
                    None => None,
                };
                Ok((Matrix::hstack(&outputs)?, rec))
            })
            .collect::<Result<_>>()?;

        let mut parts = Vec::with_capacity(frames.len());
        for (out, rec) in frames {
            parts.push(out);
            records.extend(rec);
        }
        Matrix::vstack(&parts)
    }
}

fn accumulate(sum: &mut Option<Matrix>, m: Matrix) -> Result<()> {
    *sum = Some(match sum.take() {
        Some(s) => s.add(&m)?,
        None => m,
    });
    Ok(())
}

fn grid_factor(full: TokenGrid, coarse: TokenGrid) -> usize {
    full.height / coarse.height
}

/// Mean over `factor x factor` spatial blocks of each frame.
fn avg_pool(tokens: &Matrix, grid: TokenGrid, factor: usize) -> Matrix {
    if factor == 1 {
        return tokens.clone();
    }
    let (h, w) = (grid.height / factor, grid.width / factor);
    let c = tokens.cols();
    let norm = 1.0 / (factor * factor) as f64;
    let mut data = vec![0.0; grid.frames * h * w * c];
    for f in 0..grid.frames {
        for r in 0..grid.height {
            for col in 0..grid.width {
                let dst = ((f * h + r / factor) * w + col / factor) * c;
                for (o, v) in data[dst..dst + c]
                    .iter_mut()
                    .zip(tokens.row(grid.index(f, r, col)))
                {
                    *o += v * norm;
                }
            }
        }
    }
    Matrix::from_parts(grid.frames * h * w, c, data)
}

/// Nearest-neighbour expansion of a pooled token matrix back onto `grid`.
fn upsample(tokens: &Matrix, grid: TokenGrid, factor: usize) -> Matrix {
    if factor == 1 {
        return tokens.clone();
    }
    let (h, w) = (grid.height / factor, grid.width / factor);
    let mut data = Vec::with_capacity(grid.len() * tokens.cols());
    for f in 0..grid.frames {
        for r in 0..grid.height {
            for col in 0..grid.width {
                data.extend_from_slice(tokens.row((f * h + r / factor) * w + col / factor));
            }
        }
    }
    Matrix::from_parts(grid.len(), tokens.cols(), data)
}

/// Condition maps and size regularizers for every layer and frame, built once
/// per run from the layout downsampled to each block's grid.
pub struct ModulationPlan {
    layers: Vec<(LayerId, Vec<(ConditionMap, SizeRegularizer)>)>,
}

impl ModulationPlan {
    pub fn build(
        denoiser: &ToyDenoiser,
        layout: &LayoutVideo,
        tokens: &TokenAttributeMap,
        mode: SizeMode,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (block, b) in denoiser.blocks.iter().enumerate() {
            let coarse = layout.downsample(b.factor)?;
            let areas = compute_areas(&coarse);
            for kind in [ConditionKind::SelfAttention, ConditionKind::CrossAttention] {
                let per_frame = (0..coarse.frames())
                    .map(|frame| {
                        let (map, toks) = match kind {
                            ConditionKind::SelfAttention => {
                                (build_self_condition_map(&coarse, frame)?, None)
                            }
                            ConditionKind::CrossAttention => (
                                build_cross_condition_map(&coarse, frame, tokens)?,
                                Some(tokens),
                            ),
                        };
                        let size =
                            build_size_regularizer(&map, &areas, &coarse, frame, toks, mode)?;
                        Ok((map, size))
                    })
                    .collect::<Result<Vec<_>>>()?;
                layers.push((LayerId { block, kind }, per_frame));
            }
        }
        Ok(Self { layers })
    }

    fn empty() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn conditions(
        &self,
        layer: LayerId,
        frame: usize,
    ) -> Result<(&ConditionMap, &SizeRegularizer)> {
        let (_, frames) = self
            .layers
            .iter()
            .find(|(id, _)| *id == layer)
            .ok_or_else(|| Error::Validation(format!("no condition maps for layer {layer}")))?;
        let (map, size) = frames.get(frame).ok_or(Error::Bounds {
            index: frame,
            len: frames.len(),
        })?;
        Ok((map, size))
    }
}

/// Which attention maps to keep during denoising.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RecordSpec {
    pub steps: BTreeSet<usize>,
    /// Empty means every layer.
    pub layers: BTreeSet<LayerId>,
    pub frames: BTreeSet<usize>,
    /// Also keep the unmodulated map computed from the same logits.
    pub vanilla_reference: bool,
}

struct StepControl<'a> {
    step: usize,
    lambda: f64,
    chunk_size: usize,
    plan: &'a ModulationPlan,
    full_grid: TokenGrid,
    record: Option<&'a RecordSpec>,
}

impl StepControl<'_> {
    fn records(&self, layer: LayerId) -> Option<&RecordSpec> {
        self.record.filter(|r| {
            r.steps.contains(&self.step) && (r.layers.is_empty() || r.layers.contains(&layer))
        })
    }
}

/// A head-averaged attention map captured during denoising.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub step: usize,
    pub layer: LayerId,
    pub frame: usize,
    /// Downsampling factor of the layer's token grid.
    pub factor: usize,
    pub lambda: f64,
    pub map: Matrix,
    pub vanilla: Option<Matrix>,
}

/// Clean source latents plus the inverted latents at every noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrace {
    clean: FeatureVideo,
    levels: Vec<FeatureVideo>,
}

impl InversionTrace {
    /// Latents at noise level `level`; level 0 is the clean source.
    pub fn at_level(&self, level: usize) -> Result<&FeatureVideo> {
        match level {
            0 => Ok(&self.clean),
            l => self.levels.get(l - 1).ok_or_else(|| {
                Error::Validation(format!(
                    "inversion trace has no level {l} (levels 0..={})",
                    self.levels.len()
                ))
            }),
        }
    }

    /// Noised latents, one per inversion step.
    pub fn steps(&self) -> &[FeatureVideo] {
        &self.levels
    }

    /// The fully inverted latents.
    pub fn endpoint(&self) -> &FeatureVideo {
        self.levels.last().expect("trace has at least one step")
    }
}

/// DDIM inversion with vanilla attention conditioned on `text`.
pub fn ddim_invert(
    video: &FeatureVideo,
    denoiser: &ToyDenoiser,
    schedule: &NoiseSchedule,
    text: &Matrix,
) -> Result<InversionTrace> {
    denoiser.check_video(video)?;
    check_text(denoiser, text)?;
    let plan = ModulationPlan::empty();
    let mut z = video.clone();
    let mut levels = Vec::with_capacity(schedule.steps());
    for level in 0..schedule.steps() {
        let control = StepControl {
            step: level,
            lambda: 0.0,
            chunk_size: usize::MAX,
            plan: &plan,
            full_grid: video.grid(),
            record: None,
        };
        let eps = denoiser.predict(&z, text, &control, &mut Vec::new())?;
        z = ddim_step(
            &z,
            &eps,
            schedule.alpha_at_level(level),
            schedule.alpha_at_level(level + 1),
        )?;
        levels.push(z.clone());
    }
    Ok(InversionTrace {
        clean: video.clone(),
        levels,
    })
}

fn check_text(denoiser: &ToyDenoiser, text: &Matrix) -> Result<()> {
    if text.cols() != denoiser.embed_dim || text.rows() == 0 {
        return Err(Error::Shape {
            op: "text embeddings",
            lhs: text.shape(),
            rhs: (text.rows(), denoiser.embed_dim),
        });
    }
    Ok(())
}

/// Everything that defines one edit.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub layout: LayoutVideo,
    pub source_tokens: TokenAttributeMap,
    pub target_tokens: TokenAttributeMap,
    /// Attribute ids that may change; latents elsewhere are blended back.
    pub blend_region: BTreeSet<AttributeId>,
    pub schedule: LambdaSchedule,
    pub size_mode: SizeMode,
    pub chunk_size: usize,
    /// Latent blend runs at steps divisible by this, and at the last step.
    pub blend_interval: usize,
    pub record: RecordSpec,
}

impl EditRequest {
    pub fn new(
        layout: LayoutVideo,
        source_tokens: TokenAttributeMap,
        target_tokens: TokenAttributeMap,
        blend_region: BTreeSet<AttributeId>,
        schedule: LambdaSchedule,
    ) -> Result<Self> {
        let l = layout.num_attributes();
        for map in [&source_tokens, &target_tokens] {
            if let Some(id) = map.entries().iter().find(|&&id| id > l) {
                return Err(Error::Validation(format!(
                    "token map refers to attribute {id}, layout has 0..={l}"
                )));
            }
        }
        if blend_region.is_empty() {
            return Err(Error::Validation(
                "blend region must name at least one attribute".into(),
            ));
        }
        if let Some(id) = blend_region.iter().find(|&&id| id > l) {
            return Err(Error::Validation(format!(
                "blend region attribute {id} not in layout ids 0..={l}"
            )));
        }
        Ok(Self {
            layout,
            source_tokens,
            target_tokens,
            blend_region,
            schedule,
            size_mode: SizeMode::KeySide,
            chunk_size: 64,
            blend_interval: 1,
            record: RecordSpec::default(),
        })
    }

    fn blends_at(&self, step: usize, total: usize) -> bool {
        step.is_multiple_of(self.blend_interval) || step + 1 == total
    }
}

/// Replaces latents outside `blend_region` with the source trace at `level`.
pub fn latent_blend(
    edited: &FeatureVideo,
    trace: &InversionTrace,
    layout: &LayoutVideo,
    blend_region: &BTreeSet<AttributeId>,
    level: usize,
) -> Result<FeatureVideo> {
    let source = trace.at_level(level)?;
    if edited.dims() != source.dims() {
        return Err(Error::Dimension(format!(
            "edited latents {:?} vs source trace {:?}",
            edited.dims(),
            source.dims()
        )));
    }
    if layout.grid() != edited.grid() {
        return Err(Error::Shape {
            op: "latent_blend",
            lhs: (layout.frames(), layout.height() * layout.width()),
            rhs: (edited.frames(), edited.height() * edited.width()),
        });
    }
    let mut out = edited.clone();
    for (idx, label) in layout.labels().iter().enumerate() {
        if !blend_region.contains(label) {
            out.token_mut(idx).copy_from_slice(source.token(idx));
        }
    }
    Ok(out)
}

/// What a denoising run leaves behind for inspection and metrics.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub records: Vec<AttentionRecord>,
    /// Latents after each denoising step (after blending, if it ran).
    pub denoise_trace: Vec<FeatureVideo>,
    /// Denoising steps at which latent blending ran.
    pub blended_steps: Vec<usize>,
    /// `λ_t` used at each denoising step.
    pub lambdas: Vec<f64>,
}

impl RunReport {
    /// Noise level reached after denoising step `step` of `total`.
    pub fn level_after(step: usize, total: usize) -> usize {
        total - step - 1
    }
}

fn denoise_loop(
    latents: &FeatureVideo,
    denoiser: &ToyDenoiser,
    schedule: &NoiseSchedule,
    edit: &EditRequest,
    text: &Matrix,
    blend: Option<&InversionTrace>,
) -> Result<(FeatureVideo, RunReport)> {
    denoiser.check_video(latents)?;
    check_text(denoiser, text)?;
    if latents.grid() != edit.layout.grid() {
        return Err(Error::Dimension(format!(
            "latents {:?} do not match layout {}x{}x{}",
            latents.dims(),
            edit.layout.frames(),
            edit.layout.height(),
            edit.layout.width()
        )));
    }
    if edit.chunk_size == 0 || edit.blend_interval == 0 {
        return Err(Error::Validation(
            "chunk_size and blend_interval must be at least 1".into(),
        ));
    }
    let total = schedule.steps();
    if edit.schedule.total_steps != total {
        return Err(Error::Validation(format!(
            "lambda schedule covers {} steps, noise schedule has {total}",
            edit.schedule.total_steps
        )));
    }
    let plan = if edit.schedule.base_strength > 0.0 && edit.schedule.active_steps > 0 {
        ModulationPlan::build(denoiser, &edit.layout, &edit.target_tokens, edit.size_mode)?
    } else {
        ModulationPlan::empty()
    };

    let mut report = RunReport::default();
    let mut z = latents.clone();
    for step in 0..total {
        let lambda = edit.schedule.lambda_at(step);
        let control = StepControl {
            step,
            lambda,
            chunk_size: edit.chunk_size,
            plan: &plan,
            full_grid: latents.grid(),
            record: Some(&edit.record),
        };
        let eps = denoiser.predict(&z, text, &control, &mut report.records)?;
        let level = total - step;
        z = ddim_step(
            &z,
            &eps,
            schedule.alpha_at_level(level),
            schedule.alpha_at_level(level - 1),
        )?;
        if let Some(trace) = blend {
            if edit.blends_at(step, total) {
                z = latent_blend(&z, trace, &edit.layout, &edit.blend_region, level - 1)?;
                report.blended_steps.push(step);
            }
        }
        report.lambdas.push(lambda);
        report.denoise_trace.push(z.clone());
    }
    Ok((z, report))
}

/// Denoises `latents` with the target prompt, modulating attention while the
/// lambda schedule is active. No latent blending.
pub fn denoise_with_st_attention(
    latents: &FeatureVideo,
    denoiser: &ToyDenoiser,
    schedule: &NoiseSchedule,
    edit: &EditRequest,
    embedder: &TextEmbedder,
) -> Result<(FeatureVideo, RunReport)> {
    let text = embedder.embed(&edit.target_tokens)?;
    denoise_loop(latents, denoiser, schedule, edit, &text, None)
}

/// Inverts `source` under the source prompt, then denoises under the target
/// prompt with modulation and per-step latent blending.
pub fn run_edit(
    source: &FeatureVideo,
    edit: &EditRequest,
    denoiser: &ToyDenoiser,
    schedule: &NoiseSchedule,
    embedder: &TextEmbedder,
) -> Result<(FeatureVideo, RunReport, InversionTrace)> {
    let source_text = embedder.embed(&edit.source_tokens)?;
    let trace = ddim_invert(source, denoiser, schedule, &source_text)?;
    let target_text = embedder.embed(&edit.target_tokens)?;
    let (out, report) = denoise_loop(
        trace.endpoint(),
        denoiser,
        schedule,
        edit,
        &target_text,
        Some(&trace),
    )?;
    Ok((out, report, trace))
}
