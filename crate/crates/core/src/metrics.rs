//! Attention leakage and cross-attention coverage computed from recorded
//! attention maps.
//!
//! Self-attention: for the query tokens of each attribute, the share of
//! attention mass that lands on keys of the same attribute (`intra_mass`)
//! versus any other attribute (`leakage_ratio`), background included.
//! Cross-attention: for each prompt token tied to an attribute, the share of
//! its column mass that falls inside that attribute's region.

use std::collections::BTreeMap;
use std::io;

use serde::ser::Serialize;
use serde::{Deserialize, Serialize as SerializeDerive};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::layout::{AttributeId, LayoutVideo, TokenAttributeMap};
use crate::numerics::Matrix;
use crate::pipeline::{AttentionRecord, RunReport};
use crate::st_attention::ConditionKind;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, SerializeDerive, Deserialize)]
pub struct LeakageEntry {
    pub intra_mass: f64,
    pub leakage_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, SerializeDerive, Deserialize)]
pub struct CoverageEntry {
    pub token: String,
    pub attribute: AttributeId,
    pub coverage: f64,
}

/// Attention mass of one attribute's query rows, split by key attribute.
#[derive(Debug, Clone, Copy, PartialEq)]
struct MassSplit {
    intra: f64,
    leaked: f64,
}

impl MassSplit {
    fn entry(&self) -> LeakageEntry {
        let total = self.intra + self.leaked;
        LeakageEntry {
            intra_mass: self.intra / total,
            leakage_ratio: self.leaked / total,
        }
    }
}

fn check_rows(map: &Matrix) -> Result<()> {
    for (i, row) in map.row_iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Validation(format!(
                "attention row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

fn self_masses(
    map: &Matrix,
    layout: &LayoutVideo,
    frame: usize,
) -> Result<BTreeMap<AttributeId, MassSplit>> {
    if frame >= layout.frames() {
        return Err(Error::Bounds {
            index: frame,
            len: layout.frames(),
        });
    }
    let queries = layout.frame_labels(frame);
    let keys = layout.labels();
    if map.shape() != (queries.len(), keys.len()) {
        return Err(Error::Shape {
            op: "self_attention_leakage",
            lhs: map.shape(),
            rhs: (queries.len(), keys.len()),
        });
    }
    check_rows(map)?;
    let mut out: BTreeMap<AttributeId, MassSplit> = BTreeMap::new();
    for (row, &q) in map.row_iter().zip(queries) {
        let mut intra = 0.0;
        let mut leaked = 0.0;
        for (&a, &k) in row.iter().zip(keys) {
            if k == q {
                intra += a;
            } else {
                leaked += a;
            }
        }
        let split = out.entry(q).or_insert(MassSplit {
            intra: 0.0,
            leaked: 0.0,
        });
        split.intra += intra;
        split.leaked += leaked;
    }
    Ok(out)
}

/// Per-attribute split of a self-attention map for query frame `frame`, with
/// keys over all frames of `layout`.
pub fn self_attention_leakage(
    map: &Matrix,
    layout: &LayoutVideo,
    frame: usize,
) -> Result<BTreeMap<AttributeId, LeakageEntry>> {
    Ok(self_masses(map, layout, frame)?
        .into_iter()
        .map(|(id, m)| (id, m.entry()))
        .collect())
}

/// Column mass inside and in total, per associated token.
fn cross_masses(
    map: &Matrix,
    layout: &LayoutVideo,
    frame: usize,
    tokens: &TokenAttributeMap,
) -> Result<BTreeMap<usize, (f64, f64)>> {
    if frame >= layout.frames() {
        return Err(Error::Bounds {
            index: frame,
            len: layout.frames(),
        });
    }
    let queries = layout.frame_labels(frame);
    if map.shape() != (queries.len(), tokens.token_count()) {
        return Err(Error::Shape {
            op: "cross_attention_coverage",
            lhs: map.shape(),
            rhs: (queries.len(), tokens.token_count()),
        });
    }
    check_rows(map)?;
    let mut out = BTreeMap::new();
    for (b, &id) in tokens.entries().iter().enumerate() {
        if id == 0 {
            continue;
        }
        let mut inside = 0.0;
        let mut total = 0.0;
        for (row, &q) in map.row_iter().zip(queries) {
            total += row[b];
            if q == id {
                inside += row[b];
            }
        }
        out.insert(b, (inside, total));
    }
    Ok(out)
}

/// Coverage of every token with `k[b] != 0`; unassociated tokens are omitted.
pub fn cross_attention_coverage(
    map: &Matrix,
    layout: &LayoutVideo,
    frame: usize,
    tokens: &TokenAttributeMap,
) -> Result<BTreeMap<usize, CoverageEntry>> {
    Ok(cross_masses(map, layout, frame, tokens)?
        .into_iter()
        .map(|(b, (inside, total))| {
            (
                b,
                CoverageEntry {
                    token: tokens.tokens()[b].clone(),
                    attribute: tokens.attribute(b),
                    coverage: inside / total,
                },
            )
        })
        .collect())
}

type Cells<T> = BTreeMap<usize, BTreeMap<String, T>>;

/// Metrics for every recorded `(step, layer)` cell. Recorded frames are
/// pooled by summing their attention mass.
#[derive(Debug, Clone, PartialEq, SerializeDerive, Deserialize)]
pub struct MetricsReport {
    /// step → layer → attribute → entry
    pub self_attention: Cells<BTreeMap<AttributeId, LeakageEntry>>,
    /// step → layer → token index → entry
    pub cross_attention: Cells<BTreeMap<usize, CoverageEntry>>,
}

impl MetricsReport {
    /// Mean leakage over attributes, per `(step, layer)`.
    pub fn mean_leakage(&self) -> BTreeMap<(usize, String), f64> {
        let mut out = BTreeMap::new();
        for (&step, layers) in &self.self_attention {
            for (layer, attrs) in layers {
                let mean =
                    attrs.values().map(|e| e.leakage_ratio).sum::<f64>() / attrs.len() as f64;
                out.insert((step, layer.clone()), mean);
            }
        }
        out
    }

    /// Mean coverage over associated tokens, per `(step, layer)`.
    pub fn mean_coverage(&self) -> BTreeMap<(usize, String), f64> {
        let mut out = BTreeMap::new();
        for (&step, layers) in &self.cross_attention {
            for (layer, toks) in layers {
                let mean = toks.values().map(|e| e.coverage).sum::<f64>() / toks.len() as f64;
                out.insert((step, layer.clone()), mean);
            }
        }
        out
    }
}

/// Computes a [`MetricsReport`] from a run's recorded attention maps.
///
/// `layout` is the full-resolution layout; each record is attributed with
/// the layout downsampled to its layer's grid.
pub fn summarize(
    report: &RunReport,
    layout: &LayoutVideo,
    tokens: &TokenAttributeMap,
) -> Result<MetricsReport> {
    let mut self_acc: Cells<BTreeMap<AttributeId, MassSplit>> = BTreeMap::new();
    let mut cross_acc: Cells<BTreeMap<usize, (f64, f64)>> = BTreeMap::new();
    let mut coarse: BTreeMap<usize, LayoutVideo> = BTreeMap::new();
    for rec in &report.records {
        let AttentionRecord {
            step,
            layer,
            frame,
            factor,
            map,
            ..
        } = rec;
        if !coarse.contains_key(factor) {
            coarse.insert(*factor, layout.downsample(*factor)?);
        }
        let lay = &coarse[factor];
        let name = layer.to_string();
        match layer.kind {
            ConditionKind::SelfAttention => {
                let cell = self_acc.entry(*step).or_default().entry(name).or_default();
                for (id, m) in self_masses(map, lay, *frame)? {
                    let acc = cell.entry(id).or_insert(MassSplit {
                        intra: 0.0,
                        leaked: 0.0,
                    });
                    acc.intra += m.intra;
                    acc.leaked += m.leaked;
                }
            }
            ConditionKind::CrossAttention => {
                let cell = cross_acc.entry(*step).or_default().entry(name).or_default();
                for (b, (inside, total)) in cross_masses(map, lay, *frame, tokens)? {
                    let acc = cell.entry(b).or_insert((0.0, 0.0));
                    acc.0 += inside;
                    acc.1 += total;
                }
            }
        }
    }
    let self_attention = self_acc
        .into_iter()
        .map(|(step, layers)| {
            let layers = layers
                .into_iter()
                .map(|(name, attrs)| {
                    (
                        name,
                        attrs.into_iter().map(|(id, m)| (id, m.entry())).collect(),
                    )
                })
                .collect();
            (step, layers)
        })
        .collect();
    let cross_attention = cross_acc
        .into_iter()
        .map(|(step, layers)| {
            let layers = layers
                .into_iter()
                .map(|(name, toks)| {
                    let toks = toks
                        .into_iter()
                        .map(|(b, (inside, total))| {
                            (
                                b,
                                CoverageEntry {
                                    token: tokens.tokens()[b].clone(),
                                    attribute: tokens.attribute(b),
                                    coverage: inside / total,
                                },
                            )
                        })
                        .collect();
                    (name, toks)
                })
                .collect();
            (step, layers)
        })
        .collect();
    Ok(MetricsReport {
        self_attention,
        cross_attention,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, SerializeDerive, Deserialize)]
pub struct CellDelta {
    pub baseline: f64,
    pub candidate: f64,
    /// `candidate − baseline`.
    pub delta: f64,
}

impl CellDelta {
    fn new(baseline: f64, candidate: f64) -> Self {
        Self {
            baseline,
            candidate,
            delta: candidate - baseline,
        }
    }
}

/// Paired reports over an identical sampling grid, with per-cell deltas.
#[derive(Debug, Clone, PartialEq, SerializeDerive, Deserialize)]
pub struct ComparisonSummary {
    pub baseline: MetricsReport,
    pub candidate: MetricsReport,
    /// step → layer → attribute → leakage_ratio delta
    pub leakage_deltas: Cells<BTreeMap<AttributeId, CellDelta>>,
    /// step → layer → token index → coverage delta
    pub coverage_deltas: Cells<BTreeMap<usize, CellDelta>>,
    /// step → layer → mean leakage over attributes
    pub mean_leakage: Cells<CellDelta>,
    /// step → layer → mean coverage over tokens
    pub mean_coverage: Cells<CellDelta>,
    pub mean_leakage_delta: f64,
    pub mean_coverage_delta: f64,
}

fn grid_keys<T, U>(cells: &Cells<BTreeMap<T, U>>) -> Vec<(usize, &String, Vec<&T>)> {
    cells
        .iter()
        .flat_map(|(step, layers)| {
            layers
                .iter()
                .map(move |(name, inner)| (*step, name, inner.keys().collect()))
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Deltas are `candidate − baseline`.
pub fn compare_runs(
    baseline: &MetricsReport,
    candidate: &MetricsReport,
) -> Result<ComparisonSummary> {
    if grid_keys(&baseline.self_attention) != grid_keys(&candidate.self_attention)
        || grid_keys(&baseline.cross_attention) != grid_keys(&candidate.cross_attention)
    {
        return Err(Error::Validation(
            "reports were sampled on different (step, layer, attribute/token) grids".into(),
        ));
    }
    let mut leakage_deltas: Cells<BTreeMap<AttributeId, CellDelta>> = BTreeMap::new();
    let mut mean_leakage: Cells<CellDelta> = BTreeMap::new();
    for (step, layers) in &baseline.self_attention {
        for (name, attrs) in layers {
            let other = &candidate.self_attention[step][name];
            let deltas: BTreeMap<_, _> = attrs
                .iter()
                .map(|(id, e)| {
                    (
                        *id,
                        CellDelta::new(e.leakage_ratio, other[id].leakage_ratio),
                    )
                })
                .collect();
            let m = CellDelta::new(
                mean(deltas.values().map(|d| d.baseline)),
                mean(deltas.values().map(|d| d.candidate)),
            );
            mean_leakage
                .entry(*step)
                .or_default()
                .insert(name.clone(), m);
            leakage_deltas
                .entry(*step)
                .or_default()
                .insert(name.clone(), deltas);
        }
    }
    let mut coverage_deltas: Cells<BTreeMap<usize, CellDelta>> = BTreeMap::new();
    let mut mean_coverage: Cells<CellDelta> = BTreeMap::new();
    for (step, layers) in &baseline.cross_attention {
        for (name, toks) in layers {
            let other = &candidate.cross_attention[step][name];
            let deltas: BTreeMap<_, _> = toks
                .iter()
                .map(|(b, e)| (*b, CellDelta::new(e.coverage, other[b].coverage)))
                .collect();
            let m = CellDelta::new(
                mean(deltas.values().map(|d| d.baseline)),
                mean(deltas.values().map(|d| d.candidate)),
            );
            mean_coverage
                .entry(*step)
                .or_default()
                .insert(name.clone(), m);
            coverage_deltas
                .entry(*step)
                .or_default()
                .insert(name.clone(), deltas);
        }
    }
    let mean_leakage_delta = mean(
        mean_leakage
            .values()
            .flat_map(|l| l.values().map(|d| d.delta)),
    );
    let mean_coverage_delta = mean(
        mean_coverage
            .values()
            .flat_map(|l| l.values().map(|d| d.delta)),
    );
    Ok(ComparisonSummary {
        baseline: baseline.clone(),
        candidate: candidate.clone(),
        leakage_deltas,
        coverage_deltas,
        mean_leakage,
        mean_coverage,
        mean_leakage_delta,
        mean_coverage_delta,
    })
}

/// Pretty JSON with every float written to 17 significant digits.
struct SignificantDigits(PrettyFormatter<'static>);

impl Formatter for SignificantDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut out, SignificantDigits(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Validation(format!("serializing metrics: {e}")))?;
    out.push(b'\n');
    Ok(out)
}
