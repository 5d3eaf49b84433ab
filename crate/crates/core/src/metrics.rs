//! Segmentation accuracy measures and the evaluation report.
//!
//! Per-frame Dice and average surface distance, their frame-wise means over a
//! tracked sequence, and the two-table text/JSON report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mask::{self, boundary, Mask, MaskError};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid iteration stats: {0}")]
    InvalidStats(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// A prediction and its reference for one frame.
#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub predicted: &'a Mask,
    pub truth: &'a Mask,
}

impl<'a> FramePair<'a> {
    pub fn new(predicted: &'a Mask, truth: &'a Mask) -> Result<Self> {
        if predicted.dims() != truth.dims() {
            return Err(MaskError::Dimension(format!(
                "prediction {:?} vs truth {:?}",
                predicted.dims(),
                truth.dims()
            ))
            .into());
        }
        Ok(Self { predicted, truth })
    }
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly (1.0).
pub fn dice(pair: FramePair<'_>) -> Result<f64> {
    let inter = pair.predicted.intersection_area(pair.truth)?;
    let total = pair.predicted.area() + pair.truth.area();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Symmetric average surface distance in pixels.
///
/// Mean nearest-boundary distance from A to B, averaged with B to A. Distances
/// are Euclidean between pixel centres.
pub fn asd(pair: FramePair<'_>) -> Result<f64> {
    if pair.predicted.is_empty() || pair.truth.is_empty() {
        return Err(MetricError::Undefined("surface distance needs two non-empty masks"));
    }
    let forward = directed_mean(pair.predicted, pair.truth);
    let backward = directed_mean(pair.truth, pair.predicted);
    Ok(0.5 * (forward + backward))
}

fn directed_mean(from: &Mask, to: &Mask) -> f64 {
    let (w, h) = to.dims();
    let target = boundary(to);
    let mut seeds = vec![false; w as usize * h as usize];
    for p in target.iter() {
        seeds[p.y as usize * w as usize + p.x as usize] = true;
    }
    let dist2 = squared_distance_transform(w as usize, h as usize, &seeds);
    let source = boundary(from);
    let sum: f64 = source
        .iter()
        .map(|p| dist2[p.y as usize * w as usize + p.x as usize].sqrt())
        .sum();
    sum / source.len() as f64
}

/// Exact squared Euclidean distance to the nearest seed, separable
/// lower-envelope-of-parabolas form. Values are integers held in f64.
fn squared_distance_transform(w: usize, h: usize, seeds: &[bool]) -> Vec<f64> {
    const FAR: f64 = 1e20;
    let mut grid: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let mut buf = vec![0.0; w.max(h)];
    let mut out = vec![0.0; w.max(h)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        envelope_1d(&buf[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        buf[..w].copy_from_slice(row);
        envelope_1d(&buf[..w], &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }
    grid
}

fn envelope_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let parabola = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64)
    };
    for q in 1..n {
        let mut s = parabola(q, v[k]);
        // z[0] is -inf, so this stops at k == 0
        while s <= z[k] {
            k -= 1;
            s = parabola(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, slot) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *slot = dq * dq + f[p];
    }
}

/// Frame-wise means over a tracked sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub frames: usize,
    pub mdsc: f64,
    /// `None` when every frame had an undefined surface distance.
    pub masd: Option<f64>,
    /// Frames left out of the mASD mean because one side was empty.
    pub asd_excluded: usize,
}

pub fn sequence_means(pairs: &[FramePair<'_>]) -> Result<SequenceMetrics> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput("sequence has no frames"));
    }
    let mut dsc_sum = 0.0;
    let mut asd_sum = 0.0;
    let mut asd_count = 0usize;
    let mut excluded = 0usize;
    for &pair in pairs {
        dsc_sum += dice(pair)?;
        match asd(pair) {
            Ok(d) => {
                asd_sum += d;
                asd_count += 1;
            }
            Err(MetricError::Undefined(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(SequenceMetrics {
        frames: pairs.len(),
        mdsc: dsc_sum / pairs.len() as f64,
        masd: (asd_count > 0).then(|| asd_sum / asd_count as f64),
        asd_excluded: excluded,
    })
}

/// Display iterations until the right mask was accepted, and time per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iterations: u32,
    pub seconds_per_iteration: f64,
}

impl IterationStats {
    pub fn new(iterations: u32, seconds_per_iteration: f64) -> Result<Self> {
        if iterations < 1 {
            return Err(MetricError::InvalidStats("iterations must be at least 1".into()));
        }
        if !(seconds_per_iteration >= 0.0) || !seconds_per_iteration.is_finite() {
            return Err(MetricError::InvalidStats(format!(
                "seconds per iteration must be finite and non-negative, got {seconds_per_iteration}"
            )));
        }
        Ok(Self {
            iterations,
            seconds_per_iteration,
        })
    }

    /// Averages over several selections: (mean iterations, mean seconds).
    pub fn mean(stats: &[IterationStats]) -> Option<(f64, f64)> {
        if stats.is_empty() {
            return None;
        }
        let n = stats.len() as f64;
        Some((
            stats.iter().map(|s| f64::from(s.iterations)).sum::<f64>() / n,
            stats.iter().map(|s| s.seconds_per_iteration).sum::<f64>() / n,
        ))
    }
}

/// A report value, optionally pinned to a decimal precision.
///
/// Values parsed from a decimal literal keep the literal's precision so that
/// `2.54` renders as `2.54` and `0.840` as `0.840`; computed values use the
/// column default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Figure {
    pub value: f64,
    pub places: Option<usize>,
}

impl Figure {
    pub fn new(value: f64) -> Self {
        Self { value, places: None }
    }

    pub fn literal(text: &str) -> Option<Self> {
        let value: f64 = text.trim().parse().ok()?;
        let places = text.trim().split_once('.').map_or(0, |(_, frac)| frac.len());
        Some(Self {
            value,
            places: Some(places),
        })
    }

    fn render(self, default_places: usize) -> String {
        format!("{:.*}", self.places.unwrap_or(default_places), self.value)
    }
}

impl From<f64> for Figure {
    fn from(value: f64) -> Self {
        Self::new(value)
    }
}

impl Serialize for Figure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value)
    }
}

impl<'de> Deserialize<'de> for Figure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(Figure::new)
    }
}

/// One report line. Fields left `None` render as `-`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub method: String,
    pub dsc: Option<Figure>,
    pub asd: Option<Figure>,
    pub mdsc: Option<Figure>,
    pub masd: Option<Figure>,
    pub iters: Option<Figure>,
    pub secs: Option<Figure>,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, method: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            method: method.into(),
            ..Self::default()
        }
    }

    /// Row for single-frame segmentation accuracy plus iteration bookkeeping.
    pub fn segmentation(
        label: impl Into<String>,
        method: impl Into<String>,
        dsc: f64,
        asd: Option<f64>,
        stats: &[IterationStats],
    ) -> Self {
        let mean = IterationStats::mean(stats);
        Self {
            dsc: Some(dsc.into()),
            asd: asd.map(Figure::new),
            iters: mean.map(|(i, _)| i.into()),
            secs: mean.map(|(_, s)| s.into()),
            ..Self::new(label, method)
        }
    }

    pub fn propagation(label: impl Into<String>, method: impl Into<String>, m: &SequenceMetrics) -> Self {
        Self {
            mdsc: Some(m.mdsc.into()),
            masd: m.masd.map(Figure::new),
            ..Self::new(label, method)
        }
    }

    fn has_segmentation(&self) -> bool {
        self.dsc.is_some() || self.asd.is_some() || self.iters.is_some() || self.secs.is_some()
    }

    fn has_propagation(&self) -> bool {
        self.mdsc.is_some() || self.masd.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

const DSC_PLACES: usize = 2;
const ASD_PLACES: usize = 2;
const ITER_PLACES: usize = 1;
const SECS_PLACES: usize = 2;
const MDSC_PLACES: usize = 3;
const MASD_PLACES: usize = 3;

pub fn eval_report(rows: Vec<ReportRow>) -> EvalReport {
    EvalReport { rows }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    /// Plain-text rendering: an initial-segmentation table and a
    /// mask-propagation table. Numeric cells are single-space separated.
    pub fn render_text(&self) -> String {
        let cell = |f: Option<Figure>, places: usize| f.map_or_else(|| "-".to_string(), |f| f.render(places));
        let label_w = self.rows.iter().map(|r| r.label.len()).chain([7]).max().unwrap_or(7);
        let method_w = self.rows.iter().map(|r| r.method.len()).chain([6]).max().unwrap_or(6);

        let mut out = String::new();
        out.push_str("Comparison on Initial Segmentation\n");
        let _ = writeln!(out, "{:<label_w$} {:<method_w$} DSC ASD #Iter. Time(sec)", "Anatomy", "Method");
        for row in self.rows.iter().filter(|r| r.has_segmentation()) {
            let _ = writeln!(
                out,
                "{:<label_w$} {:<method_w$} {} {} {} {}",
                row.label,
                row.method,
                cell(row.dsc, DSC_PLACES),
                cell(row.asd, ASD_PLACES),
                cell(row.iters, ITER_PLACES),
                cell(row.secs, SECS_PLACES),
            );
        }
        out.push('\n');
        out.push_str("Comparison on Mask Propagation\n");
        let _ = writeln!(out, "{:<label_w$} {:<method_w$} mDSC mASD", "Anatomy", "Method");
        for row in self.rows.iter().filter(|r| r.has_propagation()) {
            let _ = writeln!(
                out,
                "{:<label_w$} {:<method_w$} {} {}",
                row.label,
                row.method,
                cell(row.mdsc, MDSC_PLACES),
                cell(row.masd, MASD_PLACES),
            );
        }
        out
    }
}

/// Pairs prediction and truth mask directories by frame index. Frames that
/// have truth but no prediction are scored against an empty prediction.
pub fn load_sequence(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(Mask, Mask)>> {
    let preds = mask::read_mask_dir(pred_dir)?;
    let truth = mask::read_mask_dir(gt_dir)?;
    if truth.is_empty() {
        return Err(MetricError::EmptyInput("truth directory has no frame files"));
    }
    let mut out = Vec::with_capacity(truth.len());
    for (index, gt) in truth {
        let pred = preds
            .iter()
            .find(|(i, _)| *i == index)
            .map(|(_, m)| m.clone())
            .unwrap_or_else(|| Mask::empty(gt.width(), gt.height()));
        out.push((pred, gt));
    }
    Ok(out)
}
