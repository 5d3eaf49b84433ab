//! Run-length encoded binary masks.
//!
//! Runs are row-major and alternate background/foreground, starting with a
//! background count. A leading zero is the only zero-length run allowed, so
//! every raster has exactly one encoding.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("corrupt mask: {0}")]
    Corrupt(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed mask file {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, MaskError>;

/// Integer pixel coordinate, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: u32,
    pub y: u32,
}

impl PixelPoint {
    pub const fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for PixelPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Dense boolean raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    /// Like [`Bitmap::get`] but treats anything off-image as background.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && x < i64::from(self.width)
            && y < i64::from(self.height)
            && self.get(x as u32, y as u32)
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground pixel `(x, y)` has a 4-neighbour that is background or off-image.
    pub fn is_edge(&self, x: u32, y: u32) -> bool {
        if !self.get(x, y) {
            return false;
        }
        let (x, y) = (i64::from(x), i64::from(y));
        !(self.get_signed(x - 1, y)
            && self.get_signed(x + 1, y)
            && self.get_signed(x, y - 1)
            && self.get_signed(x, y + 1))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskRepr {
    w: u32,
    h: u32,
    runs: Vec<u32>,
}

/// Canonical RLE binary mask. Serializes as `{"w":..,"h":..,"runs":[..]}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub struct Mask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

impl TryFrom<MaskRepr> for Mask {
    type Error = MaskError;

    fn try_from(repr: MaskRepr) -> Result<Self> {
        Mask::new(repr.w, repr.h, repr.runs)
    }
}

impl From<Mask> for MaskRepr {
    fn from(mask: Mask) -> Self {
        MaskRepr {
            w: mask.width,
            h: mask.height,
            runs: mask.runs,
        }
    }
}

impl Mask {
    /// Validates the canonical-form invariants.
    pub fn new(width: u32, height: u32, runs: Vec<u32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MaskError::Dimension(format!(
                "mask must be non-empty, got {width}x{height}"
            )));
        }
        let total: u64 = runs.iter().map(|&r| u64::from(r)).sum();
        let expected = u64::from(width) * u64::from(height);
        if total != expected {
            return Err(MaskError::Corrupt(format!(
                "runs sum to {total}, expected {expected}"
            )));
        }
        if let Some(pos) = runs.iter().skip(1).position(|&r| r == 0) {
            return Err(MaskError::Corrupt(format!(
                "zero-length run at index {}",
                pos + 1
            )));
        }
        Ok(Self { width, height, runs })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self {
            width,
            height,
            runs: vec![width * height],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl FnMut(u32, u32) -> bool) -> Self {
        Self::from_bitmap(&Bitmap::from_fn(width, height, f))
    }

    pub fn from_bitmap(bitmap: &Bitmap) -> Self {
        assert!(
            bitmap.width > 0 && bitmap.height > 0,
            "bitmap dimensions must be positive"
        );
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &bit in &bitmap.bits {
            if bit == current {
                len += 1;
            } else {
                runs.push(len);
                current = bit;
                len = 1;
            }
        }
        runs.push(len);
        Self {
            width: bitmap.width,
            height: bitmap.height,
            runs,
        }
    }

    pub fn to_bitmap(&self) -> Bitmap {
        let mut bits = Vec::with_capacity(self.pixel_count());
        let mut value = false;
        for &run in &self.runs {
            bits.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        Bitmap {
            width: self.width,
            height: self.height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Foreground pixel count.
    pub fn area(&self) -> usize {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Foreground spans as half-open linear index ranges.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut offset = 0usize;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = offset;
            offset += r as usize;
            (i % 2 == 1).then_some((start, offset))
        })
    }

    pub fn contains(&self, point: PixelPoint) -> bool {
        if point.x >= self.width || point.y >= self.height {
            return false;
        }
        let idx = point.y as usize * self.width as usize + point.x as usize;
        self.spans().any(|(s, e)| (s..e).contains(&idx))
    }

    pub fn foreground_points(&self) -> impl Iterator<Item = PixelPoint> + '_ {
        let w = self.width as usize;
        self.spans().flat_map(move |(s, e)| {
            (s..e).map(move |i| PixelPoint::new((i % w) as u32, (i / w) as u32))
        })
    }

    fn check_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(MaskError::Dimension(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// `|self ∩ other|`, computed by merging foreground spans.
    pub fn intersection_area(&self, other: &Mask) -> Result<usize> {
        self.check_dims(other)?;
        let a: Vec<_> = self.spans().collect();
        let b: Vec<_> = other.spans().collect();
        let (mut i, mut j, mut total) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if hi > lo {
                total += hi - lo;
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(total)
    }

    fn combine(&self, other: &Mask, op: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        self.check_dims(other)?;
        let (a, b) = (self.to_bitmap(), other.to_bitmap());
        let bits = a.bits.iter().zip(&b.bits).map(|(&p, &q)| op(p, q)).collect();
        Ok(Mask::from_bitmap(&Bitmap {
            width: self.width,
            height: self.height,
            bits,
        }))
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |p, q| p || q)
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |p, q| p && q)
    }

    /// Pixels of `self` not in `other`.
    pub fn difference(&self, other: &Mask) -> Result<Mask> {
        self.combine(other, |p, q| p && !q)
    }

    /// One 4-connected erosion step; off-image counts as background.
    pub fn erode(&self) -> Mask {
        let bm = self.to_bitmap();
        Mask::from_fn(self.width, self.height, |x, y| bm.get(x, y) && !bm.is_edge(x, y))
    }

    /// One 4-connected dilation step, clipped to the frame.
    pub fn dilate(&self) -> Mask {
        let bm = self.to_bitmap();
        Mask::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (i64::from(x), i64::from(y));
            bm.get_signed(x, y)
                || bm.get_signed(x - 1, y)
                || bm.get_signed(x + 1, y)
                || bm.get_signed(x, y - 1)
                || bm.get_signed(x, y + 1)
        })
    }

    /// Shifts the foreground by `(dx, dy)`; pixels leaving the frame are dropped.
    pub fn translate(&self, dx: i64, dy: i64) -> Mask {
        let bm = self.to_bitmap();
        Mask::from_fn(self.width, self.height, |x, y| {
            bm.get_signed(i64::from(x) - dx, i64::from(y) - dy)
        })
    }

    /// Largest 4-connected component (ties: first in row-major order).
    pub fn largest_component(&self) -> Mask {
        let bm = self.to_bitmap();
        let (w, h) = (self.width as usize, self.height as usize);
        let mut label = vec![0u32; w * h];
        let mut best: Option<(usize, u32)> = None;
        let mut next = 0u32;
        for start in 0..w * h {
            if !bm.bits[start] || label[start] != 0 {
                continue;
            }
            next += 1;
            let mut size = 0usize;
            let mut queue = VecDeque::from([start]);
            label[start] = next;
            while let Some(i) = queue.pop_front() {
                size += 1;
                let (x, y) = (i % w, i / w);
                let mut visit = |j: usize| {
                    if bm.bits[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            if best.is_none_or(|(s, _)| size > s) {
                best = Some((size, next));
            }
        }
        match best {
            None => self.clone(),
            Some((_, keep)) => Mask::from_fn(self.width, self.height, |x, y| {
                label[y as usize * w + x as usize] == keep
            }),
        }
    }
}

/// Encodes a row-major boolean grid.
pub fn rle_encode(grid: &[Vec<bool>]) -> Result<Mask> {
    let height = grid.len();
    let width = grid.first().map_or(0, Vec::len);
    if height == 0 || width == 0 {
        return Err(MaskError::Dimension("grid is empty".into()));
    }
    if let Some(row) = grid.iter().position(|r| r.len() != width) {
        return Err(MaskError::Dimension(format!(
            "ragged grid: row {row} has {} columns, expected {width}",
            grid[row].len()
        )));
    }
    let (w, h) = (to_u32(width)?, to_u32(height)?);
    Ok(Mask::from_fn(w, h, |x, y| grid[y as usize][x as usize]))
}

/// Decodes to a grid of `height` rows by `width` columns.
pub fn rle_decode(mask: &Mask) -> Result<Vec<Vec<bool>>> {
    let total: u64 = mask.runs.iter().map(|&r| u64::from(r)).sum();
    if total != u64::from(mask.width) * u64::from(mask.height) {
        return Err(MaskError::Corrupt(format!(
            "runs sum to {total}, expected {}",
            u64::from(mask.width) * u64::from(mask.height)
        )));
    }
    let bm = mask.to_bitmap();
    Ok(bm
        .bits
        .chunks(mask.width as usize)
        .map(<[bool]>::to_vec)
        .collect())
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| MaskError::Dimension(format!("{n} exceeds u32")))
}

/// `|a∩b| / |a∪b|`, or 0 when both masks are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground pixels with a 4-neighbour outside the mask, in row-major order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BoundarySet {
    points: Vec<PixelPoint>,
}

impl BoundarySet {
    pub fn points(&self) -> &[PixelPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, p: PixelPoint) -> bool {
        self.points.binary_search_by(|q| (q.y, q.x).cmp(&(p.y, p.x))).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PixelPoint> {
        self.points.iter()
    }
}

pub fn boundary(mask: &Mask) -> BoundarySet {
    let bm = mask.to_bitmap();
    let points = mask
        .foreground_points()
        .filter(|p| bm.is_edge(p.x, p.y))
        .collect();
    BoundarySet { points }
}

/// `frame_000042.json`
pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.json")
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let text = fs::read_to_string(path).map_err(|source| MaskError::Io {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| MaskError::Json {
        path: path.to_owned(),
        source,
    })
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let text = serde_json::to_string(mask).expect("mask serialization is infallible");
    fs::write(path, text + "\n").map_err(|source| MaskError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads every `frame_NNNNNN.json` in `dir`, sorted by frame index.
pub fn read_mask_dir(dir: &Path) -> Result<Vec<(usize, Mask)>> {
    let entries = fs::read_dir(dir).map_err(|source| MaskError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| MaskError::Io {
            path: dir.to_owned(),
            source,
        })?;
        let name = entry.file_name();
        let Some(index) = name
            .to_str()
            .and_then(|n| n.strip_prefix("frame_"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        out.push((index, read_mask(&entry.path())?));
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

pub fn write_mask_dir(dir: &Path, masks: &[(usize, Mask)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| MaskError::Io {
        path: dir.to_owned(),
        source,
    })?;
    for (index, mask) in masks {
        write_mask(&dir.join(frame_file_name(*index)), mask)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rect(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Mask {
        Mask::from_fn(w, h, |x, y| (x0..=x1).contains(&x) && (y0..=y1).contains(&y))
    }

    #[test]
    fn encode_examples() {
        assert_eq!(rle_encode(&[vec![false; 2], vec![false; 2]]).unwrap().runs(), &[4]);
        assert_eq!(rle_encode(&[vec![true; 2], vec![true; 2]]).unwrap().runs(), &[0, 4]);
        assert_eq!(rle_encode(&[vec![false, true, false]]).unwrap().runs(), &[1, 1, 1]);
    }

    #[test]
    fn encode_rejects_bad_grids() {
        assert!(matches!(rle_encode(&[]), Err(MaskError::Dimension(_))));
        assert!(matches!(rle_encode(&[vec![]]), Err(MaskError::Dimension(_))));
        assert!(matches!(
            rle_encode(&[vec![true, false], vec![true]]),
            Err(MaskError::Dimension(_))
        ));
    }

    #[test]
    fn decode_examples() {
        let m = Mask::new(2, 2, vec![4]).unwrap();
        assert_eq!(rle_decode(&m).unwrap(), vec![vec![false; 2]; 2]);
        let m = Mask::new(2, 2, vec![0, 4]).unwrap();
        assert_eq!(rle_decode(&m).unwrap(), vec![vec![true; 2]; 2]);
        let m = Mask::new(3, 1, vec![1, 1, 1]).unwrap();
        assert_eq!(rle_decode(&m).unwrap(), vec![vec![false, true, false]]);
    }

    #[test]
    fn corrupt_runs_are_rejected() {
        assert!(matches!(Mask::new(2, 2, vec![3]), Err(MaskError::Corrupt(_))));
        assert!(matches!(Mask::new(2, 2, vec![2, 0, 2]), Err(MaskError::Corrupt(_))));
        let err = serde_json::from_str::<Mask>(r#"{"w":2,"h":2,"runs":[5]}"#).unwrap_err();
        assert!(err.to_string().contains("corrupt"));
        // the decode path re-checks sums even for hand-built values
        let bogus = Mask { width: 2, height: 2, runs: vec![1] };
        assert!(matches!(rle_decode(&bogus), Err(MaskError::Corrupt(_))));
    }

    #[test]
    fn json_shape() {
        let m = Mask::new(3, 1, vec![1, 1, 1]).unwrap();
        assert_eq!(serde_json::to_string(&m).unwrap(), r#"{"w":3,"h":1,"runs":[1,1,1]}"#);
        assert!(serde_json::from_str::<Mask>(r#"{"w":3,"h":1,"runs":[3],"x":1}"#).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = rect(4, 4, 0, 0, 1, 1);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = rect(4, 4, 2, 2, 3, 3);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        // 2x2 squares sharing a 2x1 strip: 2 / 6
        let c = rect(4, 4, 1, 0, 2, 1);
        assert!((iou(&a, &c).unwrap() - 2.0 / 6.0).abs() < 1e-12);
        let e = Mask::empty(4, 4);
        assert_eq!(iou(&e, &e).unwrap(), 0.0);
        assert!(matches!(iou(&a, &Mask::empty(3, 4)), Err(MaskError::Dimension(_))));
    }

    #[test]
    fn boundary_examples() {
        let single = rect(1, 1, 0, 0, 0, 0);
        assert_eq!(boundary(&single).points(), &[PixelPoint::new(0, 0)]);
        let square = rect(10, 10, 3, 3, 6, 6);
        let b = boundary(&square);
        assert_eq!(b.len(), 12);
        assert!(!b.contains(PixelPoint::new(4, 4)));
        assert!(b.contains(PixelPoint::new(3, 5)));
        assert!(boundary(&Mask::empty(5, 5)).is_empty());
    }

    #[test]
    fn border_counts_as_background() {
        let full = Mask::from_fn(3, 3, |_, _| true);
        assert_eq!(boundary(&full).len(), 8);
    }

    #[test]
    fn set_ops_and_translate() {
        let a = rect(8, 8, 0, 0, 3, 3);
        let b = rect(8, 8, 2, 0, 5, 3);
        assert_eq!(a.union(&b).unwrap().area(), 24);
        assert_eq!(a.intersection(&b).unwrap().area(), 8);
        assert_eq!(a.difference(&b).unwrap().area(), 8);
        assert_eq!(a.translate(2, 0), b);
        assert_eq!(a.translate(10, 0).area(), 0);
        assert_eq!(a.dilate().area(), 16 + 4 + 4);
    }

    #[test]
    fn largest_component_keeps_biggest_blob() {
        let m = rect(10, 10, 0, 0, 1, 1).union(&rect(10, 10, 5, 5, 8, 8)).unwrap();
        assert_eq!(m.largest_component(), rect(10, 10, 5, 5, 8, 8));
    }

    #[test]
    fn mask_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let masks = vec![(0, rect(5, 5, 1, 1, 2, 2)), (3, Mask::empty(5, 5))];
        write_mask_dir(dir.path(), &masks).unwrap();
        assert!(dir.path().join("frame_000003.json").exists());
        assert_eq!(read_mask_dir(dir.path()).unwrap(), masks);
    }

    fn grid_strategy() -> impl Strategy<Value = Vec<Vec<bool>>> {
        (1usize..=64, 1usize..=64).prop_flat_map(|(w, h)| {
            proptest::collection::vec(proptest::collection::vec(any::<bool>(), w), h)
        })
    }

    fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
        (1u32..=24, 1u32..=24).prop_flat_map(|(w, h)| {
            let n = (w * h) as usize;
            (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(move |(a, b)| {
                    (
                        Mask::from_fn(w, h, |x, y| a[(y * w + x) as usize]),
                        Mask::from_fn(w, h, |x, y| b[(y * w + x) as usize]),
                    )
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn decode_inverts_encode(grid in grid_strategy()) {
            let mask = rle_encode(&grid).unwrap();
            prop_assert_eq!(rle_decode(&mask).unwrap(), grid);
            // canonical: re-validating the runs succeeds and re-encoding is identical
            let again = Mask::new(mask.width(), mask.height(), mask.runs().to_vec()).unwrap();
            prop_assert_eq!(rle_encode(&rle_decode(&again).unwrap()).unwrap(), mask);
        }
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded((a, b) in mask_pair()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn erosion_removes_exactly_the_boundary((a, _) in mask_pair()) {
            let b = boundary(&a);
            let bm = a.to_bitmap();
            for p in b.iter() {
                prop_assert!(bm.get(p.x, p.y));
            }
            let eroded = a.erode();
            prop_assert_eq!(a.difference(&eroded).unwrap().foreground_points().collect::<Vec<_>>(), b.points().to_vec());
        }
    }
}
