//! Deterministic synthetic surgical scene used as ground truth.
//!
//! Instruments are oriented bars entering from the image border, the last few
//! pixels of each forming its tip. Anatomy is a static lobed ellipse. The
//! depth map puts the anatomy surface at a fixed relative depth and the
//! instruments above it, except that the distal end of the first instrument
//! drops onto the surface during scheduled contacts.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Point2;
use crate::mask::{iou, Mask};
use crate::virtual_cursor::DepthMap;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid scene parameters: {0}")]
pub struct SceneError(pub String);

/// Inclusive frame range during which the first instrument touches tissue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactWindow {
    pub start: usize,
    pub end: usize,
}

impl ContactWindow {
    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    pub instruments: usize,
    pub contacts: Vec<ContactWindow>,
    /// Peak tip displacement along x, pixels (half that along y).
    pub translate_amplitude: f64,
    pub motion_period: f64,
    pub rotate_amplitude_deg: f64,
    /// Round translations to whole pixels.
    pub integer_motion: bool,
    pub shaft_half_width: f64,
    pub tip_length: f64,
    /// Distal length that sinks onto the surface during contact.
    pub contact_length: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            frames: 100,
            instruments: 1,
            contacts: vec![ContactWindow { start: 40, end: 50 }],
            translate_amplitude: 8.0,
            motion_period: 40.0,
            rotate_amplitude_deg: 0.0,
            integer_motion: true,
            shaft_half_width: 3.0,
            tip_length: 8.0,
            contact_length: 12.0,
        }
    }
}

impl SceneParams {
    /// `n` contacts, each held `hold` frames and separated by `gap` frames.
    pub fn with_contact_train(mut self, n: usize, first: usize, hold: usize, gap: usize) -> Self {
        self.contacts = (0..n)
            .map(|i| {
                let start = first + i * (hold + gap);
                ContactWindow { start, end: start + hold - 1 }
            })
            .collect();
        self.frames = self.frames.max(first + n * (hold + gap) + gap);
        self
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let err = |m: String| Err(SceneError(m));
        if self.frames < 10 {
            return err(format!("need at least 10 frames, got {}", self.frames));
        }
        if !(1..=2).contains(&self.instruments) {
            return err(format!("1 or 2 instruments supported, got {}", self.instruments));
        }
        if self.width < 64 || self.height < 48 {
            return err(format!("frame {}x{} is smaller than 64x48", self.width, self.height));
        }
        if self.shaft_half_width < 1.0 || self.tip_length < 2.0 || self.contact_length < self.tip_length {
            return err("instrument dimensions out of range".into());
        }
        if self.translate_amplitude < 0.0 || self.translate_amplitude > 20.0 || self.motion_period <= 0.0 {
            return err("translation must be within 0..=20 px with a positive period".into());
        }
        if self.rotate_amplitude_deg.abs() > 30.0 {
            return err("rotation amplitude above 30 degrees".into());
        }
        let mut last_end: Option<usize> = None;
        for w in &self.contacts {
            if w.start > w.end || w.end >= self.frames {
                return err(format!("contact {w:?} outside 0..{}", self.frames));
            }
            if last_end.is_some_and(|e| w.start <= e + 1) {
                return err(format!("contact {w:?} is not separated from the previous one"));
            }
            last_end = Some(w.end);
        }
        Ok(())
    }
}

/// Rigid pose change of one instrument at one frame, relative to its base pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionStep {
    pub dx: f64,
    pub dy: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentFrame {
    /// Shaft plus tip.
    pub mask: Mask,
    pub shaft: Mask,
    pub tip: Mask,
    /// Distal end of the bar on its centreline.
    pub tip_point: Point2,
    /// Unit vector pointing distally.
    pub direction: Point2,
    /// Centre of the shaft/tip junction.
    pub seam_point: Point2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub instruments: Vec<InstrumentFrame>,
    pub anatomy: Mask,
    /// Normalized to `[0, 1]`.
    pub depth: DepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub seed: u64,
    pub params: SceneParams,
    pub motion: Vec<Vec<MotionStep>>,
    pub frames: Vec<FrameTruth>,
}

impl SceneTruth {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.params.width, self.params.height)
    }

    pub fn frame(&self, index: usize) -> Option<&FrameTruth> {
        self.frames.get(index)
    }

    pub fn in_contact(&self, frame: usize) -> bool {
        self.params.contacts.iter().any(|w| w.contains(frame))
    }

    /// Anatomy depth at rest, before per-frame normalization.
    pub const SURFACE_DEPTH: f32 = 0.6;
    pub const HOVER_DEPTH: f32 = 0.2;
    pub const BACKGROUND_DEPTH: f32 = 0.9;
}

struct InstrumentBase {
    tip: Point2,
    angle: f64,
    length: f64,
    phase: [f64; 3],
}

fn contact_level(params: &SceneParams, frame: usize) -> f64 {
    params
        .contacts
        .iter()
        .map(|w| {
            if w.contains(frame) {
                1.0
            } else {
                let before = w.start.saturating_sub(frame);
                let after = frame.saturating_sub(w.end);
                match before.max(after) {
                    1 => 0.6,
                    2 => 0.3,
                    _ => 0.0,
                }
            }
        })
        .fold(0.0, f64::max)
}

fn texture(seed: u64, x: u32, y: u32) -> f32 {
    let phase = (seed % 97) as f32 * 0.13;
    0.01 * ((x as f32 * 0.7 + phase).sin() * (y as f32 * 0.5 - phase).cos())
}

/// Builds the scene. Identical `(seed, params)` give identical truth.
pub fn generate_synthetic_scene(seed: u64, params: &SceneParams) -> Result<SceneTruth, SceneError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (f64::from(params.width), f64::from(params.height));

    let mut bases = Vec::new();
    for i in 0..params.instruments {
        let jitter_x = f64::from(rng.random_range(-3i32..=3));
        let jitter_y = f64::from(rng.random_range(-3i32..=3));
        let phase = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
        let (tip, angle, length) = if i == 0 {
            let tip = Point2::new((0.55 * w).round() + jitter_x, (0.38 * h).round() + jitter_y);
            (tip, 0.0, tip.x + 30.0)
        } else {
            let tip = Point2::new((0.45 * w).round() + jitter_x, (0.70 * h).round() + jitter_y);
            (tip, 180.0, w - tip.x + 30.0)
        };
        bases.push(InstrumentBase { tip, angle, length, phase });
    }

    let lobe_phase = rng.random_range(0.0..TAU);
    let anatomy_center = Point2::new((0.5 * w).round(), (0.55 * h).round());
    let (rx, ry) = (0.33 * w, 0.36 * h);
    let anatomy = Mask::from_fn(params.width, params.height, |x, y| {
        let dx = (f64::from(x) - anatomy_center.x) / rx;
        let dy = (f64::from(y) - anatomy_center.y) / ry;
        let theta = dy.atan2(dx);
        dx.hypot(dy) <= 1.0 + 0.06 * (3.0 * theta + lobe_phase).sin()
    });

    let mut motion = vec![Vec::with_capacity(params.frames); params.instruments];
    let mut frames = Vec::with_capacity(params.frames);
    for t in 0..params.frames {
        let tf = t as f64;
        let mut instruments = Vec::with_capacity(bases.len());
        for (i, base) in bases.iter().enumerate() {
            let a = params.translate_amplitude;
            let p = params.motion_period;
            let mut dx = a * (TAU * tf / p + base.phase[0]).sin();
            let mut dy = 0.5 * a * (TAU * tf / (1.7 * p) + base.phase[1]).sin();
            if params.integer_motion {
                dx = dx.round();
                dy = dy.round();
            }
            let rotation_deg = params.rotate_amplitude_deg * (TAU * tf / (1.3 * p) + base.phase[2]).sin();
            let step = MotionStep { dx, dy, rotation_deg };
            motion[i].push(step);
            instruments.push(rasterize_instrument(params, base, step));
        }
        frames.push(FrameTruth {
            instruments,
            anatomy: anatomy.clone(),
            // placeholder, filled below once masks exist
            depth: DepthMap::new(1, 1, vec![0.0]).expect("valid"),
        });
    }

    for (t, frame) in frames.iter_mut().enumerate() {
        frame.depth = render_depth(seed, params, t, frame, &bases, &motion);
    }

    if params.instruments == 2 {
        for (t, frame) in frames.iter().enumerate() {
            let a = frame.instruments[0].mask.dilate();
            if iou(&a, &frame.instruments[1].mask).unwrap_or(0.0) > 0.0 {
                return Err(SceneError(format!("instruments touch at frame {t}; reduce motion")));
            }
        }
    }

    Ok(SceneTruth {
        seed,
        params: params.clone(),
        motion,
        frames,
    })
}

fn pose(base: &InstrumentBase, step: MotionStep) -> (Point2, Point2) {
    let angle = (base.angle + step.rotation_deg).to_radians();
    let dir = Point2::new(angle.cos(), angle.sin());
    let tip = Point2::new(base.tip.x + step.dx, base.tip.y + step.dy);
    (tip, dir)
}

/// Distal coordinate `u` (0 at the tip, growing toward the proximal end) and
/// signed lateral offset `v` of a pixel centre.
fn bar_coords(tip: Point2, dir: Point2, x: u32, y: u32) -> (f64, f64) {
    let d = Point2::new(f64::from(x), f64::from(y)).sub(tip);
    let u = -d.dot(dir);
    let v = d.x * -dir.y + d.y * dir.x;
    (u, v)
}

fn rasterize_instrument(params: &SceneParams, base: &InstrumentBase, step: MotionStep) -> InstrumentFrame {
    let (tip, dir) = pose(base, step);
    let (w, h) = (params.width, params.height);
    let hw = params.shaft_half_width;
    let inside = |x, y| {
        let (u, v) = bar_coords(tip, dir, x, y);
        (0.0..=base.length).contains(&u) && v.abs() <= hw
    };
    let mask = Mask::from_fn(w, h, inside);
    let tip_mask = Mask::from_fn(w, h, |x, y| inside(x, y) && bar_coords(tip, dir, x, y).0 < params.tip_length);
    let shaft = mask.difference(&tip_mask).expect("same dims");
    InstrumentFrame {
        mask,
        shaft,
        tip: tip_mask,
        tip_point: tip,
        direction: dir,
        seam_point: tip.add_scaled(dir, -params.tip_length),
    }
}

fn render_depth(
    seed: u64,
    params: &SceneParams,
    t: usize,
    frame: &FrameTruth,
    bases: &[InstrumentBase],
    motion: &[Vec<MotionStep>],
) -> DepthMap {
    let anatomy = frame.anatomy.to_bitmap();
    let masks: Vec<_> = frame.instruments.iter().map(|i| i.mask.to_bitmap()).collect();
    let level = contact_level(params, t) as f32;
    let (tip0, dir0) = pose(&bases[0], motion[0][t]);
    let raw = DepthMap::from_fn(params.width, params.height, |x, y| {
        let surface = if anatomy.get(x, y) {
            SceneTruth::SURFACE_DEPTH + texture(seed, x, y)
        } else {
            SceneTruth::BACKGROUND_DEPTH
        };
        match masks.iter().position(|m| m.get(x, y)) {
            Some(0) if bar_coords(tip0, dir0, x, y).0 < params.contact_length => {
                SceneTruth::HOVER_DEPTH + level * (surface - SceneTruth::HOVER_DEPTH)
            }
            Some(_) => SceneTruth::HOVER_DEPTH,
            None => surface,
        }
    })
    .expect("finite depth");
    raw.normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::principal_axis;

    #[test]
    fn deterministic_for_a_seed() {
        let p = SceneParams::default();
        let a = generate_synthetic_scene(7, &p).unwrap();
        let b = generate_synthetic_scene(7, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frame_count(), 100);
        let c = generate_synthetic_scene(8, &p).unwrap();
        assert_ne!(a.frames[0].instruments[0].mask, c.frames[0].instruments[0].mask);
    }

    #[test]
    fn two_instruments_never_merge() {
        let p = SceneParams { instruments: 2, rotate_amplitude_deg: 5.0, ..SceneParams::default() };
        let s = generate_synthetic_scene(3, &p).unwrap();
        for f in &s.frames {
            assert_eq!(iou(&f.instruments[0].mask, &f.instruments[1].mask).unwrap(), 0.0);
        }
    }

    #[test]
    fn contact_depth_matches_schedule() {
        let p = SceneParams::default();
        let s = generate_synthetic_scene(11, &p).unwrap();
        for (t, f) in s.frames.iter().enumerate() {
            let tip = f.instruments[0].tip_point;
            let d = f64::from(f.depth.get(tip.x.round() as u32, tip.y.round() as u32));
            // surface sits near (0.6 - 0.2) / 0.7 after normalization
            let in_band = (d - 0.4 / 0.7).abs() <= 0.05;
            assert_eq!(in_band, (40..=50).contains(&t), "frame {t}: depth {d}");
        }
    }

    #[test]
    fn depth_is_normalized() {
        let s = generate_synthetic_scene(1, &SceneParams::default()).unwrap();
        for f in &s.frames {
            assert_eq!(f.depth.range(), (0.0, 1.0));
        }
    }

    #[test]
    fn geometry_is_consistent() {
        let p = SceneParams { rotate_amplitude_deg: 15.0, integer_motion: false, ..SceneParams::default() };
        let s = generate_synthetic_scene(5, &p).unwrap();
        for f in &s.frames {
            let inst = &f.instruments[0];
            assert_eq!(inst.shaft.union(&inst.tip).unwrap(), inst.mask);
            assert_eq!(inst.shaft.intersection_area(&inst.tip).unwrap(), 0);
            assert!(inst.tip.area() > 20);
            let axis = principal_axis(&inst.mask).unwrap();
            assert!(axis.direction.dot(inst.direction).abs() > 0.99);
            assert!(f.anatomy.contains(crate::mask::PixelPoint::new(inst.tip_point.x as u32, inst.tip_point.y as u32)));
        }
    }

    #[test]
    fn invalid_params() {
        let bad = |p: SceneParams| generate_synthetic_scene(0, &p).unwrap_err();
        bad(SceneParams { frames: 5, ..SceneParams::default() });
        bad(SceneParams { instruments: 0, ..SceneParams::default() });
        bad(SceneParams { contacts: vec![ContactWindow { start: 10, end: 200 }], ..SceneParams::default() });
        bad(SceneParams {
            contacts: vec![ContactWindow { start: 10, end: 12 }, ContactWindow { start: 13, end: 15 }],
            ..SceneParams::default()
        });
    }

    #[test]
    fn contact_train() {
        let p = SceneParams::default().with_contact_train(20, 5, 5, 6);
        p.validate().unwrap();
        assert_eq!(p.contacts.len(), 20);
        assert!(p.frames >= 5 + 20 * 11);
    }
}
