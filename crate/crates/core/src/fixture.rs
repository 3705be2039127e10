//! Procedural source videos: moving rectangles and ellipses, one attribute
//! each, over a textured background. Every attribute gets its own feature
//! signature so regions are separable and leakage is measurable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{load_layout, AttributeId, LayoutVideo, Raster};
use crate::video::FeatureVideo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

/// A shape whose centre moves by `velocity` pixels per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub attribute: AttributeId,
    /// `[row, col]` of the centre at frame 0, in pixel units.
    pub center: [f64; 2],
    /// `[height, width]`.
    pub size: [f64; 2],
    /// `[d_row, d_col]` per frame.
    pub velocity: [f64; 2],
}

impl ShapeSpec {
    fn covers(&self, frame: usize, row: usize, col: usize) -> bool {
        let cy = self.center[0] + self.velocity[0] * frame as f64;
        let cx = self.center[1] + self.velocity[1] * frame as f64;
        let dy = (row as f64 + 0.5 - cy) / (self.size[0] / 2.0);
        let dx = (col as f64 + 0.5 - cx) / (self.size[1] / 2.0);
        match self.kind {
            ShapeKind::Rect => dy.abs() < 1.0 && dx.abs() < 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel feature noise.
    pub noise: f64,
    /// Later shapes are drawn over earlier ones.
    pub shapes: Vec<ShapeSpec>,
}

impl FixtureSpec {
    /// 8 frames of 16x16x8: a rectangle (id 1) moving right and an ellipse
    /// (id 2) moving left, on background id 0.
    pub fn standard() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            channels: 8,
            seed: 7,
            noise: 0.1,
            shapes: vec![
                ShapeSpec {
                    kind: ShapeKind::Rect,
                    attribute: 1,
                    center: [4.5, 4.0],
                    size: [6.0, 6.0],
                    velocity: [0.0, 1.0],
                },
                ShapeSpec {
                    kind: ShapeKind::Ellipse,
                    attribute: 2,
                    center: [11.5, 11.5],
                    size: [7.0, 7.0],
                    velocity: [0.0, -1.0],
                },
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("fixture dimensions must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(
                "fixture noise must be finite and >= 0".into(),
            ));
        }
        for s in &self.shapes {
            let finite = s
                .center
                .iter()
                .chain(&s.size)
                .chain(&s.velocity)
                .all(|v| v.is_finite());
            if !finite || s.size.iter().any(|&v| v <= 0.0) {
                return Err(Error::Config(format!("invalid shape {s:?}")));
            }
            if s.attribute == 0 {
                return Err(Error::Config("shapes must use attribute ids >= 1".into()));
            }
        }
        Ok(())
    }
}

pub struct Fixture {
    pub video: FeatureVideo,
    pub layout: LayoutVideo,
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let (n, h, w, c) = (spec.frames, spec.height, spec.width, spec.channels);

    let mut rasters = Vec::with_capacity(n);
    for f in 0..n {
        let mut labels = vec![0 as AttributeId; h * w];
        for shape in &spec.shapes {
            for r in 0..h {
                for col in 0..w {
                    if shape.covers(f, r, col) {
                        labels[r * w + col] = shape.attribute;
                    }
                }
            }
        }
        rasters.push(Raster::new(h, w, labels)?);
    }
    let layout = load_layout(rasters).map_err(|e| Error::Config(format!("fixture layout: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let signatures: Vec<Vec<f64>> = layout
        .ids()
        .map(|_| (0..c).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let texture: Vec<f64> = (0..c).map(|_| unit.sample(&mut rng) * 0.3).collect();

    let mut data = Vec::with_capacity(n * h * w * c);
    for (idx, &label) in layout.labels().iter().enumerate() {
        let (_, r, col) = layout.grid().decode(idx);
        let pattern = if label == 0 {
            (0.7 * r as f64).sin() * (0.5 * col as f64).cos()
        } else {
            0.0
        };
        for ch in 0..c {
            data.push(
                signatures[label as usize][ch]
                    + pattern * texture[ch]
                    + spec.noise * unit.sample(&mut rng),
            );
        }
    }
    Ok(Fixture {
        video: FeatureVideo::new(n, h, w, c, data)?,
        layout,
    })
}
