//! Feature videos and their `STLV` binary container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! video: "STLV" | version u32 | N u32 | H u32 | W u32 | C u32 | N*H*W*C f64
//! trace: "STLV" | version u32 | S u32 | N u32 | H u32 | W u32 | C u32 | S*N*H*W*C f64
//! ```
//!
//! Data is frame-major, then row-major, channels innermost. Readers check
//! that the payload length matches the header exactly, which also tells a
//! trace apart from a single video.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layout::TokenGrid;
use crate::numerics::Matrix;

pub const STLV_MAGIC: &[u8; 4] = b"STLV";
pub const STLV_VERSION: u32 = 1;

/// `N` frames of `H x W` feature vectors with `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVideo {
    grid: TokenGrid,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureVideo {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let len = frames * height * width * channels;
        if len == 0 {
            return Err(Error::Dimension(format!(
                "empty feature video {frames}x{height}x{width}x{channels}"
            )));
        }
        if data.len() != len {
            return Err(Error::Dimension(format!(
                "{frames}x{height}x{width}x{channels} video needs {len} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "FeatureVideo::new",
            });
        }
        Ok(Self {
            grid: TokenGrid {
                frames,
                height,
                width,
            },
            channels,
            data,
        })
    }

    /// Reinterprets a `(N*H*W) x C` token matrix.
    pub fn from_tokens(grid: TokenGrid, tokens: Matrix) -> Result<Self> {
        if tokens.rows() != grid.len() {
            return Err(Error::Shape {
                op: "FeatureVideo::from_tokens",
                lhs: (grid.len(), tokens.cols()),
                rhs: tokens.shape(),
            });
        }
        let channels = tokens.cols();
        Self::new(
            grid.frames,
            grid.height,
            grid.width,
            channels,
            tokens.into_data(),
        )
    }

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

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames(), self.height(), self.width(), self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature vector of one token.
    pub fn token(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub(crate) fn token_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// All tokens as an `(N*H*W) x C` matrix.
    pub fn to_tokens(&self) -> Matrix {
        Matrix::from_parts(self.grid.len(), self.channels, self.data.clone())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `‖self − other‖ / ‖other‖`.
    pub fn relative_error(&self, other: &FeatureVideo) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "cannot compare videos {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(diff / other.norm().max(f64::MIN_POSITIVE))
    }

    /// `a · self + b · other`, elementwise.
    pub(crate) fn axpby(&self, a: f64, other: &FeatureVideo, b: f64) -> Result<FeatureVideo> {
        debug_assert_eq!(self.dims(), other.dims());
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: "latent update",
            });
        }
        Ok(FeatureVideo {
            grid: self.grid,
            channels: self.channels,
            data,
        })
    }

    fn write_header(&self, out: &mut Vec<u8>) {
        for d in self.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn header_start() -> Vec<u8> {
    let mut out = STLV_MAGIC.to_vec();
    out.extend_from_slice(&STLV_VERSION.to_le_bytes());
    out
}

pub fn encode_video(video: &FeatureVideo) -> Vec<u8> {
    let mut out = header_start();
    out.reserve(16 + video.data.len() * 8);
    video.write_header(&mut out);
    video.write_payload(&mut out);
    out
}

/// Encodes a non-empty sequence of equally shaped videos with a leading step axis.
pub fn encode_trace(steps: &[FeatureVideo]) -> Result<Vec<u8>> {
    let first = steps
        .first()
        .ok_or_else(|| Error::Dimension("empty latent trace".into()))?;
    if let Some(bad) = steps.iter().find(|v| v.dims() != first.dims()) {
        return Err(Error::Dimension(format!(
            "trace mixes shapes {:?} and {:?}",
            first.dims(),
            bad.dims()
        )));
    }
    let mut out = header_start();
    out.extend_from_slice(&(steps.len() as u32).to_le_bytes());
    first.write_header(&mut out);
    for v in steps {
        v.write_payload(&mut out);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.path, "truncated STLV header"))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn start(&mut self) -> Result<()> {
        if self.take(4)? != STLV_MAGIC {
            return Err(Error::format(self.path, "missing STLV magic"));
        }
        let version = self.u32()?;
        if version != STLV_VERSION as usize {
            return Err(Error::format(
                self.path,
                format!("unsupported STLV version {version}"),
            ));
        }
        Ok(())
    }

    fn payload(&mut self, dims: [usize; 4], count: usize) -> Result<Vec<FeatureVideo>> {
        let per = dims.iter().product::<usize>();
        let rest = &self.bytes[self.pos..];
        if per == 0 || rest.len() != per * count * 8 {
            return Err(Error::format(
                self.path,
                format!(
                    "payload of {} bytes does not match header {count} x {dims:?}",
                    rest.len()
                ),
            ));
        }
        let values: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        values
            .chunks_exact(per)
            .map(|chunk| {
                FeatureVideo::new(dims[0], dims[1], dims[2], dims[3], chunk.to_vec())
                    .map_err(|e| Error::format(self.path, e.to_string()))
            })
            .collect()
    }
}

pub fn decode_video(bytes: &[u8], path: &Path) -> Result<FeatureVideo> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    r.start()?;
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    Ok(r.payload(dims, 1)?.remove(0))
}

pub fn decode_trace(bytes: &[u8], path: &Path) -> Result<Vec<FeatureVideo>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    r.start()?;
    let steps = r.u32()?;
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    if steps == 0 {
        return Err(Error::format(path, "trace has zero steps"));
    }
    r.payload(dims, steps)
}

pub fn read_video(path: &Path) -> Result<FeatureVideo> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_video(&bytes, path)
}

pub fn read_trace(path: &Path) -> Result<Vec<FeatureVideo>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trace(&bytes, path)
}
