//! Layout data model: per-frame attribute rasters, the spatio-temporal token
//! ordering, prompt-token to attribute mapping and attribute areas.
//!
//! Each pixel carries exactly one attribute id, so attribute masks are
//! disjoint by construction. Id 0 is the background and is treated as an
//! attribute of its own by the self-attention condition maps.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pgm::GrayImage;

pub type AttributeId = u8;

/// One frame's attribute ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<AttributeId>,
}

impl Raster {
    pub fn new(height: usize, width: usize, labels: Vec<AttributeId>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} raster needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }
}

/// Frame-major, then row-major flattening of an `N x H x W` token volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_offset(&self, frame: usize) -> usize {
        frame * self.tokens_per_frame()
    }

    #[inline]
    pub fn index(&self, frame: usize, row: usize, col: usize) -> usize {
        frame * self.tokens_per_frame() + row * self.width + col
    }

    /// Inverse of [`TokenGrid::index`].
    #[inline]
    pub fn decode(&self, index: usize) -> (usize, usize, usize) {
        let per_frame = self.tokens_per_frame();
        let within = index % per_frame;
        (index / per_frame, within / self.width, within % self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutVideo {
    grid: TokenGrid,
    num_attributes: AttributeId,
    labels: Vec<AttributeId>,
}

/// Validates a stack of per-frame rasters into a [`LayoutVideo`].
///
/// Ids must be contiguous: with `L` the largest id, every id in `1..=L`
/// has to occur somewhere in the video. Background (0) may be absent.
pub fn load_layout(frames: Vec<Raster>) -> Result<LayoutVideo> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Dimension("layout has no frames".into()))?;
    let (height, width) = (first.height, first.width);
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!("empty {height}x{width} frame")));
    }
    let mut labels = Vec::with_capacity(frames.len() * height * width);
    for raster in &frames {
        if (raster.height, raster.width) != (height, width) {
            return Err(Error::Shape {
                op: "load_layout",
                lhs: (height, width),
                rhs: (raster.height, raster.width),
            });
        }
        labels.extend_from_slice(&raster.labels);
    }

    let present: BTreeSet<AttributeId> = labels.iter().copied().collect();
    let max_id = present.iter().next_back().copied().unwrap_or(0);
    if max_id == 0 {
        return Err(Error::Validation(
            "layout contains only background (id 0); at least one attribute is required".into(),
        ));
    }
    if let Some(gap) = (1..=max_id).find(|id| !present.contains(id)) {
        return Err(Error::Validation(format!(
            "attribute id {gap} is missing but id {max_id} is used (ids present: {present:?})"
        )));
    }

    Ok(LayoutVideo {
        grid: TokenGrid {
            frames: frames.len(),
            height,
            width,
        },
        num_attributes: max_id,
        labels,
    })
}

/// Reads a layout from a manifest listing one PGM file per frame, in order.
///
/// Paths in the manifest are relative to the manifest's directory. Blank
/// lines and lines starting with `#` are ignored.
pub fn read_layout_manifest(manifest: &Path) -> Result<LayoutVideo> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut frames = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let path = base.join(line);
        let img = GrayImage::read(&path)?;
        frames.push(Raster::new(img.height, img.width, img.pixels)?);
    }
    if frames.is_empty() {
        return Err(Error::format(manifest, "manifest lists no frames"));
    }
    load_layout(frames)
}

impl LayoutVideo {
    pub fn grid(&self) -> TokenGrid {
        self.grid
    }

    pub fn frames(&self) -> usize {
        self.grid.frames
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    /// `L`, the largest attribute id.
    pub fn num_attributes(&self) -> AttributeId {
        self.num_attributes
    }

    /// All ids `0..=L`, background included.
    pub fn ids(&self) -> impl Iterator<Item = AttributeId> {
        0..=self.num_attributes
    }

    pub fn labels(&self) -> &[AttributeId] {
        &self.labels
    }

    pub fn frame_labels(&self, frame: usize) -> &[AttributeId] {
        let n = self.grid.tokens_per_frame();
        &self.labels[frame * n..(frame + 1) * n]
    }

    pub fn label(&self, frame: usize, row: usize, col: usize) -> AttributeId {
        self.labels[self.grid.index(frame, row, col)]
    }

    /// Attribute of the token at a flattened spatio-temporal index.
    pub fn attribute_of(&self, token_index: usize) -> Result<AttributeId> {
        self.labels.get(token_index).copied().ok_or(Error::Bounds {
            index: token_index,
            len: self.labels.len(),
        })
    }

    /// Nearest-neighbour downsampling by an integer factor.
    ///
    /// Each output pixel takes the label at the centre of its `factor x factor`
    /// block. The attribute count is kept even if a small region vanishes,
    /// so ids stay comparable with the full-resolution layout.
    pub fn downsample(&self, factor: usize) -> Result<LayoutVideo> {
        if factor == 0
            || !self.height().is_multiple_of(factor)
            || !self.width().is_multiple_of(factor)
        {
            return Err(Error::Dimension(format!(
                "cannot downsample {}x{} by {factor}",
                self.height(),
                self.width()
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let grid = TokenGrid {
            frames: self.frames(),
            height: self.height() / factor,
            width: self.width() / factor,
        };
        let offset = factor / 2;
        let mut labels = Vec::with_capacity(grid.len());
        for f in 0..grid.frames {
            for r in 0..grid.height {
                for c in 0..grid.width {
                    labels.push(self.label(f, r * factor + offset, c * factor + offset));
                }
            }
        }
        Ok(LayoutVideo {
            grid,
            num_attributes: self.num_attributes,
            labels,
        })
    }

    /// Binary raster of `frame` for one attribute, flattened row-major.
    pub fn mask(&self, frame: usize, id: AttributeId) -> Vec<bool> {
        self.frame_labels(frame).iter().map(|&l| l == id).collect()
    }

    pub fn to_rasters(&self) -> Vec<Raster> {
        (0..self.frames())
            .map(|f| Raster {
                height: self.height(),
                width: self.width(),
                labels: self.frame_labels(f).to_vec(),
            })
            .collect()
    }
}

/// Fraction of all `N*H*W` positions covered by each id, background included.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeAreas {
    proportions: Vec<f64>,
}

impl AttributeAreas {
    pub fn proportion(&self, id: AttributeId) -> f64 {
        self.proportions.get(id as usize).copied().unwrap_or(0.0)
    }

    /// Indexed by attribute id.
    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }
}

pub fn compute_areas(layout: &LayoutVideo) -> AttributeAreas {
    let mut counts = vec![0usize; layout.num_attributes() as usize + 1];
    for &l in layout.labels() {
        counts[l as usize] += 1;
    }
    let total = layout.labels().len() as f64;
    AttributeAreas {
        proportions: counts.into_iter().map(|c| c as f64 / total).collect(),
    }
}

/// `k[b]`: the attribute each prompt token refers to, 0 for none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenAttributeMap {
    tokens: Vec<String>,
    entries: Vec<AttributeId>,
}

impl TokenAttributeMap {
    /// Validates against an attribute count `L` rather than a full layout.
    pub fn new(pairs: &[(String, AttributeId)], num_attributes: AttributeId) -> Result<Self> {
        if let Some((tok, id)) = pairs.iter().find(|(_, id)| *id > num_attributes) {
            return Err(Error::Validation(format!(
                "token {tok:?} refers to attribute {id}, but the layout only has ids 0..={num_attributes}"
            )));
        }
        if pairs.iter().all(|(_, id)| *id == 0) {
            return Err(Error::Validation(
                "token map associates no token with any attribute".into(),
            ));
        }
        Ok(Self {
            tokens: pairs.iter().map(|(t, _)| t.clone()).collect(),
            entries: pairs.iter().map(|(_, id)| *id).collect(),
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn entries(&self) -> &[AttributeId] {
        &self.entries
    }

    /// `B`.
    pub fn token_count(&self) -> usize {
        self.entries.len()
    }

    pub fn attribute(&self, token: usize) -> AttributeId {
        self.entries[token]
    }
}

pub fn parse_token_map(
    pairs: &[(String, AttributeId)],
    layout: &LayoutVideo,
) -> Result<TokenAttributeMap> {
    TokenAttributeMap::new(pairs, layout.num_attributes())
}
