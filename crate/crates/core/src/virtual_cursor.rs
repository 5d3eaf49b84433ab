//! Depth-gated virtual cursor.
//!
//! The cursor rides ahead of the tracked tip along the instrument axis. A
//! "click" fires once enough pixels around it sit inside the calibrated
//! surface depth band for several consecutive frames; the detector then stays
//! disarmed until occupancy falls below threshold again.

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::geometry::{PrincipalAxis, TipLandmark};
use crate::mask::{Mask, PixelPoint};

#[derive(Debug, thiserror::Error)]
pub enum DepthError {
    #[error("depth map is {width}x{height} but has {len} values")]
    Size { width: u32, height: u32, len: usize },
    #[error("non-finite depth value at index {0}")]
    NonFinite(usize),
    #[error("invalid depth encoding: {0}")]
    Encoding(String),
}

/// Relative per-pixel depth, larger is farther. Unitless.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, DepthError> {
        if width == 0 || height == 0 || values.len() != width as usize * height as usize {
            return Err(DepthError::Size {
                width,
                height,
                len: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DepthError::NonFinite(i));
        }
        Ok(Self { width, height, values })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f32) -> Result<Self, DepthError> {
        let mut values = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    /// `(min, max)` over all pixels.
    pub fn range(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Rescales to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> DepthMap {
        let (lo, hi) = self.range();
        let span = hi - lo;
        let values = self
            .values
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        DepthMap { values, ..*self }
    }

    /// Row-major little-endian f32, base64.
    pub fn to_base64(&self) -> String {
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        base64::engine::general_purpose::STANDARD.encode(bytes)
    }

    pub fn from_base64(width: u32, height: u32, data: &str) -> Result<Self, DepthError> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(data)
            .map_err(|e| DepthError::Encoding(e.to_string()))?;
        if bytes.len() % 4 != 0 {
            return Err(DepthError::Encoding(format!("{} bytes is not a multiple of 4", bytes.len())));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(width, height, values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CursorConfig {
    /// Distance ahead of the tip along the axis, pixels.
    pub offset_px: f64,
    pub radius_px: u32,
    /// Band half-width as a fraction of the depth map's value range.
    pub band_halfwidth_frac: f64,
    pub occupancy_threshold: f64,
    pub required_consecutive: u32,
    /// Fixed band centre; calibrated at tip lock when absent.
    pub band_center: Option<f64>,
}

impl Default for CursorConfig {
    fn default() -> Self {
        Self {
            offset_px: 12.0,
            radius_px: 7,
            band_halfwidth_frac: 0.05,
            occupancy_threshold: 0.6,
            required_consecutive: 3,
            band_center: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CursorPosition {
    pub point: PixelPoint,
    pub clamped: bool,
}

/// Tip moved `offset` pixels along the axis toward the distal side, rounded
/// and clamped into the frame.
pub fn cursor_position(tip: &TipLandmark, axis: &PrincipalAxis, offset: f64, frame: (u32, u32)) -> CursorPosition {
    let sign = if axis.project(tip.point) < 0.0 { -1.0 } else { 1.0 };
    let raw = tip.point.add_scaled(axis.direction, sign * offset.max(0.0));
    let (x, cx) = clamp_axis(raw.x.round(), frame.0);
    let (y, cy) = clamp_axis(raw.y.round(), frame.1);
    CursorPosition {
        point: PixelPoint::new(x, y),
        clamped: cx || cy,
    }
}

fn clamp_axis(v: f64, extent: u32) -> (u32, bool) {
    let max = f64::from(extent - 1);
    if v < 0.0 {
        (0, true)
    } else if v > max {
        (extent - 1, true)
    } else {
        (v as u32, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickDetectorState {
    pub band_center: f64,
    pub band_halfwidth: f64,
    pub occupancy_threshold: f64,
    pub required_consecutive: u32,
    pub consecutive_hits: u32,
    pub armed: bool,
}

impl ClickDetectorState {
    pub fn new(band_center: f64, band_halfwidth: f64, config: &CursorConfig) -> Self {
        Self {
            band_center,
            band_halfwidth,
            occupancy_threshold: config.occupancy_threshold,
            required_consecutive: config.required_consecutive.max(1),
            consecutive_hits: 0,
            armed: true,
        }
    }

    pub fn in_band(&self, depth: f64) -> bool {
        (depth - self.band_center).abs() <= self.band_halfwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClickUpdate {
    pub state: ClickDetectorState,
    pub fired: bool,
    /// `None` when the cursor was off-frame and the update was skipped.
    pub occupancy: Option<f64>,
}

fn disk_pixels(center: PixelPoint, radius: u32, frame: (u32, u32)) -> impl Iterator<Item = PixelPoint> {
    let r = i64::from(radius);
    let (cx, cy) = (i64::from(center.x), i64::from(center.y));
    let (w, h) = (i64::from(frame.0), i64::from(frame.1));
    (cy - r..=cy + r).flat_map(move |y| {
        (cx - r..=cx + r).filter_map(move |x| {
            let inside = (x - cx).pow(2) + (y - cy).pow(2) <= r * r;
            (inside && x >= 0 && y >= 0 && x < w && y < h).then(|| PixelPoint::new(x as u32, y as u32))
        })
    })
}

/// Fraction of pixels in the disk whose depth lies in the band.
///
/// With `region`, only disk pixels inside that mask are counted; an empty
/// count gives zero occupancy.
pub fn occupancy(
    state: &ClickDetectorState,
    depth: &DepthMap,
    cursor: PixelPoint,
    radius: u32,
    region: Option<&Mask>,
) -> f64 {
    let region = region.map(Mask::to_bitmap);
    let (mut total, mut hits) = (0usize, 0usize);
    for p in disk_pixels(cursor, radius.max(1), (depth.width, depth.height)) {
        if region.as_ref().is_some_and(|r| !r.get(p.x, p.y)) {
            continue;
        }
        total += 1;
        hits += usize::from(state.in_band(f64::from(depth.get(p.x, p.y))));
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Advances the detector by one frame.
pub fn update_click_state(
    state: ClickDetectorState,
    depth: &DepthMap,
    cursor: PixelPoint,
    radius: u32,
    region: Option<&Mask>,
) -> ClickUpdate {
    if cursor.x >= depth.width || cursor.y >= depth.height {
        warn!(%cursor, "cursor outside frame, click detector not updated");
        return ClickUpdate {
            state,
            fired: false,
            occupancy: None,
        };
    }
    let occ = occupancy(&state, depth, cursor, radius, region);
    let mut next = state;
    let mut fired = false;
    if occ >= state.occupancy_threshold {
        if next.armed {
            next.consecutive_hits = (next.consecutive_hits + 1).min(next.required_consecutive);
            if next.consecutive_hits >= next.required_consecutive {
                fired = true;
                next.armed = false;
                next.consecutive_hits = 0;
            }
        }
    } else {
        next.consecutive_hits = 0;
        next.armed = true;
    }
    ClickUpdate {
        state: next,
        fired,
        occupancy: Some(occ),
    }
}

/// Band from the median depth in the disk (outside `exclude`) and a
/// half-width proportional to the map's value range. Returns `None` if no
/// pixel qualifies.
pub fn calibrate_band(
    depth: &DepthMap,
    cursor: PixelPoint,
    radius: u32,
    exclude: Option<&Mask>,
    halfwidth_frac: f64,
) -> Option<(f64, f64)> {
    let exclude = exclude.map(Mask::to_bitmap);
    let mut samples: Vec<f64> = disk_pixels(cursor, radius.max(1), (depth.width, depth.height))
        .filter(|p| !exclude.as_ref().is_some_and(|m| m.get(p.x, p.y)))
        .map(|p| f64::from(depth.get(p.x, p.y)))
        .collect();
    if samples.is_empty() {
        return None;
    }
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    let median = if samples.len().is_multiple_of(2) {
        0.5 * (samples[mid - 1] + samples[mid])
    } else {
        samples[mid]
    };
    let (lo, hi) = depth.range();
    Some((median, halfwidth_frac * f64::from(hi - lo)))
}

/// Positive point prompt for the point-prompt segmentation backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub point: PixelPoint,
    pub positive: bool,
    pub clamped: bool,
}

pub fn make_anatomy_prompt(cursor: CursorPosition) -> PointPrompt {
    PointPrompt {
        point: cursor.point,
        positive: true,
        clamped: cursor.clamped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{LandmarkSource, Point2};
    use proptest::prelude::*;

    fn tip_at(x: f64, y: f64) -> TipLandmark {
        TipLandmark {
            point: Point2::new(x, y),
            source: LandmarkSource::AxisExtreme,
            frame_index: 0,
            low_confidence: false,
        }
    }

    fn axis(cx: f64, cy: f64, dx: f64, dy: f64) -> PrincipalAxis {
        PrincipalAxis {
            centroid: Point2::new(cx, cy),
            direction: Point2::new(dx, dy),
            elongation: 10.0,
            low_confidence: false,
        }
    }

    fn uniform(v: f32) -> DepthMap {
        DepthMap::from_fn(40, 40, |_, _| v).unwrap()
    }

    fn detector(required: u32) -> ClickDetectorState {
        let cfg = CursorConfig {
            required_consecutive: required,
            ..CursorConfig::default()
        };
        ClickDetectorState::new(0.5, 0.05, &cfg)
    }

    #[test]
    fn cursor_examples() {
        let a = axis(20.0, 20.0, 1.0, 0.0);
        let c = cursor_position(&tip_at(50.0, 20.0), &a, 0.0, (100, 50));
        assert_eq!(c, CursorPosition { point: PixelPoint::new(50, 20), clamped: false });
        let c = cursor_position(&tip_at(50.0, 20.0), &a, 10.0, (100, 50));
        assert_eq!(c.point, PixelPoint::new(60, 20));
        let c = cursor_position(&tip_at(95.0, 20.0), &a, 10.0, (100, 50));
        assert_eq!(c, CursorPosition { point: PixelPoint::new(99, 20), clamped: true });
        // tip on the negative side of the centroid moves toward -x
        let c = cursor_position(&tip_at(5.0, 20.0), &a, 10.0, (100, 50));
        assert_eq!(c, CursorPosition { point: PixelPoint::new(0, 20), clamped: true });
    }

    #[test]
    fn fires_on_third_consecutive_hit() {
        let depth = uniform(0.5);
        let mut s = detector(3);
        let mut fired = vec![];
        for _ in 0..3 {
            let u = update_click_state(s, &depth, PixelPoint::new(20, 20), 7, None);
            s = u.state;
            fired.push(u.fired);
        }
        assert_eq!(fired, [false, false, true]);
        assert!(!s.armed);
    }

    #[test]
    fn miss_resets_hits() {
        let mut s = detector(3);
        s = update_click_state(s, &uniform(0.5), PixelPoint::new(20, 20), 7, None).state;
        assert_eq!(s.consecutive_hits, 1);
        let u = update_click_state(s, &uniform(0.9), PixelPoint::new(20, 20), 7, None);
        assert_eq!(u.state.consecutive_hits, 0);
        assert_eq!(u.occupancy, Some(0.0));
    }

    #[test]
    fn off_frame_cursor_is_noop() {
        let s = detector(3);
        let u = update_click_state(s, &uniform(0.5), PixelPoint::new(40, 3), 7, None);
        assert_eq!(u.state, s);
        assert_eq!(u.occupancy, None);
    }

    #[test]
    fn hold_fires_once_and_rearms_after_retract() {
        let (inb, out) = (uniform(0.5), uniform(0.9));
        let seq = [&out, &inb, &inb, &inb, &inb, &inb, &inb, &out, &inb, &inb, &inb];
        let mut s = detector(3);
        let fires: Vec<usize> = seq
            .iter()
            .enumerate()
            .filter_map(|(i, d)| {
                let u = update_click_state(s, d, PixelPoint::new(10, 10), 7, None);
                s = u.state;
                u.fired.then_some(i)
            })
            .collect();
        assert_eq!(fires, [3, 10]);
    }

    #[test]
    fn region_restricts_counting() {
        // left half in band, right half far; region picks the right half
        let depth = DepthMap::from_fn(40, 40, |x, _| if x < 20 { 0.5 } else { 0.9 }).unwrap();
        let right = Mask::from_fn(40, 40, |x, _| x >= 20);
        let s = detector(3);
        let all = occupancy(&s, &depth, PixelPoint::new(20, 20), 5, None);
        assert!(all > 0.3 && all < 0.6);
        assert_eq!(occupancy(&s, &depth, PixelPoint::new(20, 20), 5, Some(&right)), 0.0);
        assert_eq!(occupancy(&s, &depth, PixelPoint::new(20, 20), 5, Some(&Mask::empty(40, 40))), 0.0);
    }

    #[test]
    fn band_calibration() {
        let depth = DepthMap::from_fn(40, 40, |x, y| if x < 20 { 0.2 } else { 0.4 + 0.001 * y as f32 }).unwrap();
        let left = Mask::from_fn(40, 40, |x, _| x < 20);
        let (center, half) = calibrate_band(&depth, PixelPoint::new(30, 20), 3, Some(&left), 0.05).unwrap();
        assert!((center - 0.42).abs() < 1e-6, "{center}");
        assert!((half - 0.05 * (0.439 - 0.2)).abs() < 1e-6);
        let everything = Mask::from_fn(40, 40, |_, _| true);
        assert!(calibrate_band(&depth, PixelPoint::new(30, 20), 3, Some(&everything), 0.05).is_none());
    }

    #[test]
    fn prompt_passes_through() {
        let p = make_anatomy_prompt(CursorPosition { point: PixelPoint::new(60, 20), clamped: false });
        assert_eq!(p, PointPrompt { point: PixelPoint::new(60, 20), positive: true, clamped: false });
        let p = make_anatomy_prompt(CursorPosition { point: PixelPoint::new(99, 0), clamped: true });
        assert!(p.clamped && p.positive);
    }

    #[test]
    fn depth_validation_and_wire_round_trip() {
        assert!(matches!(DepthMap::new(2, 2, vec![0.0; 3]), Err(DepthError::Size { .. })));
        assert!(matches!(DepthMap::new(1, 2, vec![0.0, f32::NAN]), Err(DepthError::NonFinite(1))));
        let d = DepthMap::from_fn(3, 2, |x, y| x as f32 * 0.25 + y as f32).unwrap();
        assert_eq!(DepthMap::from_base64(3, 2, &d.to_base64()).unwrap(), d);
        // 1.0f32 little-endian is 00 00 80 3f
        let one = DepthMap::new(1, 1, vec![1.0]).unwrap();
        assert_eq!(one.to_base64(), "AACAPw==");
        assert!(DepthMap::from_base64(2, 2, "AACAPw==").is_err());
        let n = d.normalized();
        assert_eq!(n.range(), (0.0, 1.0));
    }

    fn fire_count(occupancies: &[f64], threshold: f64, required: u32) -> usize {
        let mut s = ClickDetectorState {
            band_center: 0.5,
            band_halfwidth: 0.05,
            occupancy_threshold: threshold,
            required_consecutive: required,
            consecutive_hits: 0,
            armed: true,
        };
        // a 10-pixel row fully covered by the disk: occupancy is in steps of 0.1
        let mut fires = 0;
        for &occ in occupancies {
            let in_band = (occ * 10.0).round() as u32;
            let depth = DepthMap::from_fn(10, 1, |x, _| if x < in_band { 0.5 } else { 0.9 }).unwrap();
            let region = Mask::from_fn(10, 1, |_, _| true);
            let u = update_click_state(s, &depth, PixelPoint::new(5, 0), 10, Some(&region));
            s = u.state;
            assert!(s.consecutive_hits <= s.required_consecutive);
            fires += usize::from(u.fired);
        }
        fires
    }

    proptest! {
        #[test]
        fn one_click_per_contact(holds in proptest::collection::vec(3usize..12, 1..8), gaps in proptest::collection::vec(1usize..6, 8), required in 1u32..=3) {
            let mut seq = vec![];
            for (i, &h) in holds.iter().enumerate() {
                seq.extend(std::iter::repeat_n(0.0, gaps[i]));
                seq.extend(std::iter::repeat_n(1.0, h));
            }
            seq.push(0.0);
            prop_assert_eq!(fire_count(&seq, 0.6, required), holds.len());
        }

        #[test]
        fn raising_threshold_never_creates_clicks(occ in proptest::collection::vec(0u32..=10, 1..40), lo in 1u32..10, bump in 0u32..10) {
            let occ: Vec<f64> = occ.iter().map(|&o| f64::from(o) / 10.0).collect();
            let low = f64::from(lo) / 10.0;
            let high = (f64::from(lo + bump) / 10.0).min(1.0);
            if fire_count(&occ, low, 3) == 0 {
                prop_assert_eq!(fire_count(&occ, high, 3), 0);
            }
        }

        #[test]
        fn cursor_is_translation_equivariant(tx in -20i32..20, ty in -20i32..20, off in 0.0f64..15.0) {
            let a = axis(50.0, 50.0, 0.6, 0.8);
            let t = tip_at(70.0, 66.0);
            let base = cursor_position(&t, &a, off, (400, 400));
            let shifted_axis = axis(50.0 + f64::from(tx), 50.0 + f64::from(ty), 0.6, 0.8);
            let shifted_tip = tip_at(70.0 + f64::from(tx), 66.0 + f64::from(ty));
            let moved = cursor_position(&shifted_tip, &shifted_axis, off, (400, 400));
            prop_assert_eq!(i64::from(moved.point.x) - i64::from(base.point.x), i64::from(tx));
            prop_assert_eq!(i64::from(moved.point.y) - i64::from(base.point.y), i64::from(ty));
        }
    }
}
