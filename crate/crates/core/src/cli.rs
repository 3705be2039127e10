//! Batch front end: run configuration, fixture generation, edit runs and run
//! comparison. The `stlayout` binary is a thin wrapper over this module.
//!
//! A run directory holds:
//!
//! ```text
//! edited.stlv      edited latents
//! inversion.stlv   inversion trace, index = noise level (0 is the source)
//! metrics.json     leakage and coverage per recorded (step, layer)
//! heatmaps/*.pgm   cross-attention token columns
//! manifest.json    config, config hash, seeds, version, output hashes
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fixture::{generate, FixtureSpec};
use crate::layout::{parse_token_map, read_layout_manifest, AttributeId, LayoutVideo};
use crate::metrics::{compare_runs, summarize, to_json, ComparisonSummary, MetricsReport};
use crate::pgm::GrayImage;
use crate::pipeline::{
    run_edit, AttentionRecord, DenoiserSpec, EditRequest, LayerId, NoiseSchedule, RecordSpec,
    TextEmbedder, ToyDenoiser,
};
use crate::st_attention::{ConditionKind, LambdaSchedule, SizeMode};
use crate::video::{encode_trace, encode_video, read_video};

pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EDITED_FILE: &str = "edited.stlv";
pub const INVERSION_FILE: &str = "inversion.stlv";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const COMPARISON_FILE: &str = "comparison.json";

/// Everything a run needs, as one flat JSON object. Relative paths are
/// resolved against the directory containing the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub layout_manifest: PathBuf,
    pub source_video: PathBuf,
    pub output_dir: PathBuf,
    pub denoiser_seed: u64,
    pub text_seed: u64,
    pub total_steps: usize,
    pub active_steps: usize,
    pub lambda0: f64,
    pub model_width: usize,
    pub block_factors: Vec<usize>,
    pub eps_gain: f64,
    pub embed_dim: usize,
    /// `[token, attribute id]` pairs in prompt order.
    pub source_tokens: Vec<(String, AttributeId)>,
    pub target_tokens: Vec<(String, AttributeId)>,
    pub blend_region: Vec<AttributeId>,
    pub blend_interval: usize,
    pub record_steps: Vec<usize>,
    /// Layer names such as `block0.self`; empty records every layer.
    pub record_layers: Vec<String>,
    pub record_frames: Vec<usize>,
    pub size_mode: SizeMode,
    pub chunk_size: usize,
}

fn prompt(words: &[(&str, AttributeId)]) -> Vec<(String, AttributeId)> {
    words.iter().map(|(w, id)| (w.to_string(), *id)).collect()
}

impl Default for RunConfig {
    /// Edits the standard fixture: the box (id 1) becomes gold, the ball
    /// (id 2) and background are preserved.
    fn default() -> Self {
        let denoiser = DenoiserSpec::default();
        let schedule = LambdaSchedule::default();
        Self {
            layout_manifest: "layout/manifest.txt".into(),
            source_video: "source.stlv".into(),
            output_dir: "run".into(),
            denoiser_seed: denoiser.seed,
            text_seed: 99,
            total_steps: schedule.total_steps,
            active_steps: schedule.active_steps,
            lambda0: schedule.base_strength,
            model_width: denoiser.model_width,
            block_factors: denoiser.block_factors,
            eps_gain: denoiser.eps_gain,
            embed_dim: 16,
            source_tokens: prompt(&[
                ("a", 0),
                ("box", 1),
                ("and", 0),
                ("a", 0),
                ("ball", 2),
                ("on", 0),
                ("grass", 0),
            ]),
            target_tokens: prompt(&[
                ("a", 0),
                ("gold", 1),
                ("and", 0),
                ("a", 0),
                ("ball", 2),
                ("on", 0),
                ("grass", 0),
            ]),
            blend_region: vec![1],
            blend_interval: 1,
            record_steps: vec![0, 7, 14],
            record_layers: Vec::new(),
            record_frames: vec![0, 7],
            size_mode: SizeMode::KeySide,
            chunk_size: 64,
        }
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("config serializes");
        out.push(b'\n');
        out
    }

    pub fn sha256(&self) -> String {
        hex(&Sha256::digest(
            serde_json::to_vec(self).expect("config serializes"),
        ))
    }

    pub fn denoiser_spec(&self) -> DenoiserSpec {
        DenoiserSpec {
            seed: self.denoiser_seed,
            model_width: self.model_width,
            block_factors: self.block_factors.clone(),
            eps_gain: self.eps_gain,
        }
    }

    pub fn lambda_schedule(&self) -> Result<LambdaSchedule> {
        LambdaSchedule::new(self.total_steps, self.active_steps, self.lambda0)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that does not need the input files.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, p) in [
            ("layout_manifest", &self.layout_manifest),
            ("source_video", &self.source_video),
            ("output_dir", &self.output_dir),
        ] {
            if p.as_os_str().is_empty() {
                return bad(format!("{name} must not be empty"));
            }
        }
        self.lambda_schedule()?;
        if self.embed_dim == 0 || self.chunk_size == 0 || self.blend_interval == 0 {
            return bad("embed_dim, chunk_size and blend_interval must be at least 1".into());
        }
        if self.source_tokens.is_empty() || self.target_tokens.is_empty() {
            return bad("source_tokens and target_tokens must not be empty".into());
        }
        if let Some(s) = self.record_steps.iter().find(|&&s| s >= self.total_steps) {
            return bad(format!(
                "record step {s} is outside 0..{}",
                self.total_steps
            ));
        }
        for name in &self.record_layers {
            let layer: LayerId = name
                .parse()
                .map_err(|e: Error| Error::Config(e.to_string()))?;
            if layer.block >= self.block_factors.len() {
                return bad(format!(
                    "record layer {name} names a block that does not exist"
                ));
            }
        }
        // denoiser construction checks width, factors and gain
        ToyDenoiser::new(self.denoiser_spec(), 1, self.embed_dim)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    fn record_spec(&self) -> Result<RecordSpec> {
        Ok(RecordSpec {
            steps: self.record_steps.iter().copied().collect(),
            layers: self
                .record_layers
                .iter()
                .map(|n| n.parse())
                .collect::<Result<_>>()?,
            frames: self.record_frames.iter().copied().collect(),
            vanilla_reference: false,
        })
    }
}

/// Config paths resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub layout_manifest: PathBuf,
    pub source_video: PathBuf,
    pub output_dir: PathBuf,
}

impl RunPaths {
    pub fn resolve(config: &RunConfig, config_path: &Path) -> Self {
        let base = config_path.parent().unwrap_or(Path::new(""));
        Self {
            layout_manifest: base.join(&config.layout_manifest),
            source_video: base.join(&config.source_video),
            output_dir: base.join(&config.output_dir),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes
        .iter()
        .fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// An attention map row or column laid out on its spatial grid, scaled so
/// the minimum is 0 and the maximum 255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapImage(pub GrayImage);

impl HeatmapImage {
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {height}x{width} heatmap",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "heatmap" });
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pixels = values
            .iter()
            .map(|&v| {
                if hi > lo {
                    (255.0 * (v - lo) / (hi - lo)).round() as u8
                } else {
                    128
                }
            })
            .collect();
        Ok(Self(GrayImage {
            width,
            height,
            pixels,
        }))
    }

    /// Re-normalizes an existing 8-bit image.
    pub fn normalize(image: &GrayImage) -> Result<Self> {
        let values: Vec<f64> = image.pixels.iter().map(|&p| f64::from(p)).collect();
        Self::from_values(image.height, image.width, &values)
    }

    /// `128 + (b − a) / 2`, so mid-gray means no change.
    pub fn signed_delta(a: &GrayImage, b: &GrayImage) -> Result<GrayImage> {
        if (a.width, a.height) != (b.width, b.height) {
            return Err(Error::Shape {
                op: "heatmap delta",
                lhs: (a.height, a.width),
                rhs: (b.height, b.width),
            });
        }
        let pixels = a
            .pixels
            .iter()
            .zip(&b.pixels)
            .map(|(&x, &y)| ((256 + i32::from(y) - i32::from(x)) / 2) as u8)
            .collect();
        Ok(GrayImage {
            width: a.width,
            height: a.height,
            pixels,
        })
    }
}

fn file_stem_token(token: &str) -> String {
    token
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect()
}

/// One PGM per recorded cross-attention map and prompt token.
fn cross_heatmaps(
    records: &[AttentionRecord],
    layout: &LayoutVideo,
    tokens: &[(String, AttributeId)],
) -> Result<Vec<(String, GrayImage)>> {
    let mut out = Vec::new();
    for rec in records
        .iter()
        .filter(|r| r.layer.kind == ConditionKind::CrossAttention)
    {
        let h = layout.height().div_ceil(rec.factor);
        let w = layout.width().div_ceil(rec.factor);
        for (b, (token, _)) in tokens.iter().enumerate() {
            let column: Vec<f64> = rec.map.row_iter().map(|row| row[b]).collect();
            let img = HeatmapImage::from_values(h, w, &column)?;
            let name = format!(
                "step{:02}_{}_f{:02}_t{:02}_{}.pgm",
                rec.step,
                rec.layer,
                rec.frame,
                b,
                file_stem_token(token)
            );
            out.push((name, img.0));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub config_sha256: String,
    pub denoiser_seed: u64,
    pub text_seed: u64,
    /// File name → sha256, for every output except this manifest.
    pub outputs: BTreeMap<String, String>,
}

/// Summary of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub metrics: MetricsReport,
    pub manifest: RunManifest,
}

/// Loads and validates `config_path`, runs the edit and writes the run directory.
pub fn run(config_path: &Path) -> Result<RunOutcome> {
    let config = RunConfig::load(config_path)?;
    config.validate()?;
    let paths = RunPaths::resolve(&config, config_path);

    let layout = read_layout_manifest(&paths.layout_manifest)?;
    let source = read_video(&paths.source_video)?;
    if source.grid() != layout.grid() {
        return Err(Error::Validation(format!(
            "source video {:?} does not match layout {}x{}x{}",
            source.dims(),
            layout.frames(),
            layout.height(),
            layout.width()
        )));
    }
    if let Some(f) = config.record_frames.iter().find(|&&f| f >= layout.frames()) {
        return Err(Error::Config(format!(
            "record frame {f} is outside 0..{}",
            layout.frames()
        )));
    }
    let source_tokens = parse_token_map(&config.source_tokens, &layout)?;
    let target_tokens = parse_token_map(&config.target_tokens, &layout)?;
    let mut edit = EditRequest::new(
        layout.clone(),
        source_tokens,
        target_tokens.clone(),
        config.blend_region.iter().copied().collect(),
        config.lambda_schedule()?,
    )?;
    edit.size_mode = config.size_mode;
    edit.chunk_size = config.chunk_size;
    edit.blend_interval = config.blend_interval;
    edit.record = config.record_spec()?;

    let denoiser = ToyDenoiser::new(config.denoiser_spec(), source.channels(), config.embed_dim)?;
    let schedule = NoiseSchedule::scaled_linear(config.total_steps)?;
    let embedder = TextEmbedder::new(config.text_seed, config.embed_dim)?;

    log::info!(
        "editing {:?} video over {} steps ({} modulated, lambda0 {})",
        source.dims(),
        config.total_steps,
        config.active_steps,
        config.lambda0
    );
    let (edited, report, trace) = run_edit(&source, &edit, &denoiser, &schedule, &embedder)?;
    let metrics = summarize(&report, &layout, &target_tokens)?;
    log::info!("recorded {} attention maps", report.records.len());

    let mut trace_levels = vec![source.clone()];
    trace_levels.extend(trace.steps().iter().cloned());
    let mut files: Vec<(String, Vec<u8>)> = vec![
        (EDITED_FILE.into(), encode_video(&edited)),
        (INVERSION_FILE.into(), encode_trace(&trace_levels)?),
        (METRICS_FILE.into(), to_json(&metrics)?),
    ];
    for (name, img) in cross_heatmaps(&report.records, &layout, &config.target_tokens)? {
        files.push((format!("{HEATMAP_DIR}/{name}"), img.encode()));
    }

    let out_dir = &paths.output_dir;
    let mut outputs = BTreeMap::new();
    for (name, bytes) in &files {
        write_atomic(&out_dir.join(name), bytes)?;
        outputs.insert(name.clone(), hex(&Sha256::digest(bytes)));
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: config.sha256(),
        denoiser_seed: config.denoiser_seed,
        text_seed: config.text_seed,
        config,
        outputs,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(&out_dir.join(MANIFEST_FILE), &bytes)?;
    log::info!("wrote {} files to {}", files.len() + 1, out_dir.display());
    Ok(RunOutcome {
        output_dir: out_dir.clone(),
        metrics,
        manifest,
    })
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn read_metrics(run_dir: &Path) -> Result<MetricsReport> {
    let path = run_dir.join(METRICS_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))
}

/// Compares run `a` (baseline) with run `b`, writing the summary and one
/// delta heatmap per heatmap present in both runs.
pub fn compare(dir_a: &Path, dir_b: &Path, out_dir: &Path) -> Result<ComparisonSummary> {
    let manifest_a = read_manifest(dir_a)?;
    let manifest_b = read_manifest(dir_b)?;
    let summary = compare_runs(&read_metrics(dir_a)?, &read_metrics(dir_b)?)?;
    write_atomic(&out_dir.join(COMPARISON_FILE), &to_json(&summary)?)?;

    let prefix = format!("{HEATMAP_DIR}/");
    let shared = manifest_a
        .outputs
        .keys()
        .filter(|k| k.starts_with(&prefix) && manifest_b.outputs.contains_key(*k));
    for name in shared {
        let a = GrayImage::read(&dir_a.join(name))?;
        let b = GrayImage::read(&dir_b.join(name))?;
        let delta = HeatmapImage::signed_delta(&a, &b)?;
        write_atomic(&out_dir.join(name), &delta.encode())?;
    }
    log::info!(
        "mean leakage delta {:+.3e}, mean coverage delta {:+.3e}",
        summary.mean_leakage_delta,
        summary.mean_coverage_delta
    );
    Ok(summary)
}

pub fn load_fixture_spec(path: &Path) -> Result<FixtureSpec> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("invalid fixture spec: {e}")))
}

/// Writes `source.stlv`, `layout/frame_NNN.pgm`, `layout/manifest.txt` and a
/// starter `config.json` that runs the default edit on them.
pub fn generate_fixture(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let spec = load_fixture_spec(spec_path)?;
    let fx = generate(&spec)?;
    write_atomic(&out_dir.join("source.stlv"), &encode_video(&fx.video))?;
    let mut manifest = String::new();
    for (f, raster) in fx.layout.to_rasters().into_iter().enumerate() {
        let name = format!("frame_{f:03}.pgm");
        let img = GrayImage {
            width: raster.width,
            height: raster.height,
            pixels: raster.labels,
        };
        write_atomic(&out_dir.join("layout").join(&name), &img.encode())?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    write_atomic(&out_dir.join("layout/manifest.txt"), manifest.as_bytes())?;
    write_atomic(
        &out_dir.join("config.json"),
        &RunConfig::default().to_json(),
    )?;
    Ok(())
}
