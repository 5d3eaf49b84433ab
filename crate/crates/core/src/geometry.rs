//! Instrument tip landmarks from mask geometry alone.
//!
//! A landmark is first fixed where the tip and shaft masks meet (or on the
//! shaft's medial axis for tools without a distinct tip) and then followed
//! frame to frame as the boundary extreme along the instrument's principal
//! axis.

use serde::{Deserialize, Serialize};

use crate::mask::{boundary, Mask, MaskError, PixelPoint};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate mask: {0}")]
    Degenerate(&'static str),
    #[error("tip and shaft boundaries do not touch")]
    NoContact,
    #[error("tracking lost after {stale} stale frames")]
    TrackingLost { stale: u32 },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Elongation below this marks the axis as low-confidence.
pub const MIN_CONFIDENT_ELONGATION: f64 = 1.2;
/// Consecutive frames a landmark may be held before tracking is declared lost.
pub const DEFAULT_STALE_LIMIT: u32 = 5;
/// Percentile of the axis projection used for medial-axis landmarks.
pub const MEDIAL_PERCENTILE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn sub(self, other: Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }

    pub fn add_scaled(self, dir: Point2, t: f64) -> Point2 {
        Point2::new(self.x + t * dir.x, self.y + t * dir.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

impl From<PixelPoint> for Point2 {
    fn from(p: PixelPoint) -> Self {
        Point2::new(f64::from(p.x), f64::from(p.y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalAxis {
    pub centroid: Point2,
    /// Unit eigenvector of the larger covariance eigenvalue, with `dx > 0`
    /// or `dx == 0 && dy > 0`.
    pub direction: Point2,
    /// `λ1 / λ2`; infinite for perfectly collinear pixels.
    pub elongation: f64,
    pub low_confidence: bool,
}

impl PrincipalAxis {
    pub fn project(&self, p: Point2) -> f64 {
        p.sub(self.centroid).dot(self.direction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkSource {
    BoundaryIntersection,
    MedialAxis,
    AxisExtreme,
}

impl LandmarkSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BoundaryIntersection => "boundary_intersection",
            Self::MedialAxis => "medial_axis",
            Self::AxisExtreme => "axis_extreme",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipLandmark {
    pub point: Point2,
    pub source: LandmarkSource,
    pub frame_index: usize,
    #[serde(default)]
    pub low_confidence: bool,
}

pub fn principal_axis(mask: &Mask) -> Result<PrincipalAxis> {
    let n = mask.area();
    if n < 2 {
        return Err(GeometryError::Degenerate("fewer than two foreground pixels"));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in mask.foreground_points() {
        sx += f64::from(p.x);
        sy += f64::from(p.y);
    }
    let centroid = Point2::new(sx / n as f64, sy / n as f64);
    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    for p in mask.foreground_points() {
        let d = Point2::from(p).sub(centroid);
        cxx += d.x * d.x;
        cxy += d.x * d.y;
        cyy += d.y * d.y;
    }
    let (cxx, cxy, cyy) = (cxx / n as f64, cxy / n as f64, cyy / n as f64);

    let mean = 0.5 * (cxx + cyy);
    let spread = (0.25 * (cxx - cyy).powi(2) + cxy * cxy).sqrt();
    let (major, minor) = (mean + spread, (mean - spread).max(0.0));
    if major <= 0.0 {
        return Err(GeometryError::Degenerate("zero covariance"));
    }
    let theta = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
    let direction = canonical_direction(Point2::new(theta.cos(), theta.sin()));
    let elongation = if minor > 0.0 { major / minor } else { f64::INFINITY };
    Ok(PrincipalAxis {
        centroid,
        direction,
        elongation,
        low_confidence: elongation < MIN_CONFIDENT_ELONGATION,
    })
}

fn canonical_direction(d: Point2) -> Point2 {
    const EPS: f64 = 1e-12;
    let norm = d.norm();
    let (mut x, mut y) = (d.x / norm, d.y / norm);
    if x.abs() < EPS {
        x = 0.0;
        y = 1.0;
    } else if y.abs() < EPS {
        y = 0.0;
        x = 1.0;
    } else if x < 0.0 {
        x = -x;
        y = -y;
    }
    Point2::new(x, y)
}

/// Landmark where the shaft and tip boundaries meet.
///
/// Shaft boundary pixels within Chebyshev distance 1 of any tip boundary pixel
/// are averaged. Identical masks give the centroid of the whole boundary,
/// flagged low-confidence.
pub fn tip_landmark(shaft: &Mask, tip: &Mask, frame_index: usize) -> Result<TipLandmark> {
    if shaft.dims() != tip.dims() {
        return Err(MaskError::Dimension(format!("shaft {:?} vs tip {:?}", shaft.dims(), tip.dims())).into());
    }
    if shaft.is_empty() || tip.is_empty() {
        return Err(GeometryError::Degenerate("empty shaft or tip mask"));
    }
    let shaft_edge = boundary(shaft);
    let tip_edge = boundary(tip);
    let (w, h) = tip.dims();
    // Chebyshev-1 neighbourhood of the tip boundary as a raster
    let mut near = vec![false; w as usize * h as usize];
    for p in tip_edge.iter() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y) = (i64::from(p.x) + dx, i64::from(p.y) + dy);
                if x >= 0 && y >= 0 && x < i64::from(w) && y < i64::from(h) {
                    near[y as usize * w as usize + x as usize] = true;
                }
            }
        }
    }
    let matched: Vec<Point2> = shaft_edge
        .iter()
        .filter(|p| near[p.y as usize * w as usize + p.x as usize])
        .map(|&p| p.into())
        .collect();
    let point = mean_point(&matched).ok_or(GeometryError::NoContact)?;
    Ok(TipLandmark {
        point,
        source: LandmarkSource::BoundaryIntersection,
        frame_index,
        low_confidence: shaft == tip,
    })
}

fn mean_point(points: &[Point2]) -> Option<Point2> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    Some(Point2::new(sx / n, sy / n))
}

/// Which end of the axis is distal: `+1.0` for the positive direction.
///
/// The shaft enters from the border it touches most; the distal end is the
/// axis extreme farther from that border. No border contact defaults to `+1`.
pub fn distal_sign(mask: &Mask, axis: &PrincipalAxis) -> f64 {
    let (w, h) = mask.dims();
    let edge = boundary(mask);
    let mut contact = [0usize; 4]; // left, right, top, bottom
    for p in edge.iter() {
        contact[0] += usize::from(p.x == 0);
        contact[1] += usize::from(p.x + 1 == w);
        contact[2] += usize::from(p.y == 0);
        contact[3] += usize::from(p.y + 1 == h);
    }
    let (side, &count) = contact
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("four sides");
    if count == 0 {
        return 1.0;
    }
    let border_distance = |p: Point2| match side {
        0 => p.x,
        1 => f64::from(w - 1) - p.x,
        2 => p.y,
        _ => f64::from(h - 1) - p.y,
    };
    let mut lo = (f64::INFINITY, Point2::default());
    let mut hi = (f64::NEG_INFINITY, Point2::default());
    for p in edge.iter().map(|&p| Point2::from(p)) {
        let s = axis.project(p);
        if s < lo.0 {
            lo = (s, p);
        }
        if s > hi.0 {
            hi = (s, p);
        }
    }
    let (lo, hi) = (lo.1, hi.1);
    if border_distance(lo) > border_distance(hi) {
        -1.0
    } else {
        1.0
    }
}

/// Landmark on the shaft centreline at the 90th percentile of the axis
/// projection toward the distal end, snapped to the nearest foreground pixel.
pub fn medial_axis_point(shaft: &Mask, frame_index: usize) -> Result<TipLandmark> {
    let axis = principal_axis(shaft)?;
    let sign = distal_sign(shaft, &axis);
    let mut proj: Vec<f64> = shaft
        .foreground_points()
        .map(|p| sign * axis.project(p.into()))
        .collect();
    proj.sort_by(f64::total_cmp);
    let q = percentile_sorted(&proj, MEDIAL_PERCENTILE);
    let target = axis.centroid.add_scaled(axis.direction, sign * q);
    let snapped = shaft
        .foreground_points()
        .map(Point2::from)
        .min_by(|a, b| a.distance(target).total_cmp(&b.distance(target)))
        .expect("non-degenerate mask has pixels");
    Ok(TipLandmark {
        point: snapped,
        source: LandmarkSource::MedialAxis,
        frame_index,
        low_confidence: axis.low_confidence,
    })
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// A landmark carried across frames plus how many frames it has been held.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipTrack {
    pub landmark: TipLandmark,
    pub stale: u32,
}

impl TipTrack {
    pub fn new(landmark: TipLandmark) -> Self {
        Self { landmark, stale: 0 }
    }
}

/// Boundary points within this projection distance of the extreme are averaged.
const EXTREME_BAND: f64 = 0.75;

/// Follows the tip into a new frame.
///
/// The axis is recomputed on `shaft`; of the two boundary extremes, the one on
/// the same side of the centroid as the previous landmark is kept. A
/// degenerate mask holds the previous landmark and bumps the stale count;
/// exceeding `stale_limit` is an error.
pub fn track_tip(shaft: &Mask, frame_index: usize, previous: &TipTrack, stale_limit: u32) -> Result<TipTrack> {
    let axis = match principal_axis(shaft) {
        Ok(axis) => axis,
        Err(GeometryError::Degenerate(_)) => {
            let stale = previous.stale + 1;
            if stale > stale_limit {
                return Err(GeometryError::TrackingLost { stale });
            }
            return Ok(TipTrack {
                landmark: previous.landmark,
                stale,
            });
        }
        Err(e) => return Err(e),
    };
    let side = if axis.project(previous.landmark.point) < 0.0 { -1.0 } else { 1.0 };
    let edge = boundary(shaft);
    let scored: Vec<(f64, Point2)> = edge
        .iter()
        .map(|&p| {
            let p = Point2::from(p);
            (side * axis.project(p), p)
        })
        .collect();
    let best = scored.iter().map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
    let near: Vec<Point2> = scored
        .iter()
        .filter(|(s, _)| *s >= best - EXTREME_BAND)
        .map(|(_, p)| *p)
        .collect();
    let point = mean_point(&near).expect("extreme set is non-empty");
    Ok(TipTrack {
        landmark: TipLandmark {
            point,
            source: LandmarkSource::AxisExtreme,
            frame_index,
            low_confidence: axis.low_confidence,
        },
        stale: 0,
    })
}

/// One line of the per-frame landmark log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub frame: usize,
    pub instrument: String,
    pub x: f64,
    pub y: f64,
    pub source: LandmarkSource,
    pub stale: u32,
}
