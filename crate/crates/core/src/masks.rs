//! Free-form hole masks and foreground masks built from face-parsing labels.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, ForegroundMask, HoleMask};

pub const RATIO_BOUNDS: (f64, f64) = (0.01, 0.60);
pub const MAX_ATTEMPTS: usize = 100;
pub const MIN_MASK_SIDE: usize = 32;

/// Parameters of the brush-stroke random walk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeConfig {
    /// Inclusive range of strokes per mask.
    pub num_strokes: (usize, usize),
    /// Inclusive range of vertices per stroke (including the start point).
    pub vertex_count: (usize, usize),
    /// Inclusive range of segment lengths, in pixels.
    pub segment_length: (f64, f64),
    pub min_stroke_width: f64,
    pub max_stroke_width: f64,
    pub max_turn_angle: f64,
    /// Accepted hole-to-image ratio interval.
    pub target_ratio: (f64, f64),
}

impl StrokeConfig {
    /// Defaults scaled to an image of the given size.
    pub fn for_size(h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        Self {
            num_strokes: (1, 6),
            vertex_count: (4, 10),
            segment_length: (side / 16.0, side / 4.0),
            min_stroke_width: (side / 64.0).max(1.0),
            max_stroke_width: (side / 10.0).max(2.0),
            max_turn_angle: PI / 3.0,
            target_ratio: RATIO_BOUNDS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("stroke config: {m}")));
        if self.num_strokes.0 == 0 || self.num_strokes.0 > self.num_strokes.1 {
            return bad("num_strokes range must be nonempty and start at 1 or more");
        }
        if self.vertex_count.0 < 2 || self.vertex_count.0 > self.vertex_count.1 {
            return bad("vertex_count range must be nonempty with at least 2 vertices");
        }
        if !(self.segment_length.0 >= 0.0 && self.segment_length.0 <= self.segment_length.1) {
            return bad("segment_length range must be nonempty and nonnegative");
        }
        if !(self.min_stroke_width > 0.0 && self.min_stroke_width <= self.max_stroke_width) {
            return bad("stroke width range must be nonempty and positive");
        }
        if !(self.max_turn_angle >= 0.0 && self.max_turn_angle.is_finite()) {
            return bad("max_turn_angle must be a nonnegative finite angle");
        }
        let (lo, hi) = self.target_ratio;
        if !(lo <= hi && lo >= RATIO_BOUNDS.0 && hi <= 1.0) {
            return bad("target_ratio must be a nonempty interval starting at 0.01 or above");
        }
        Ok(())
    }
}

/// Fraction of pixels that are holes.
pub fn hole_to_image_ratio(mask: &HoleMask) -> f64 {
    let (h, w) = mask.dim();
    let holes = mask.data().iter().filter(|v| **v == 0.0).count();
    holes as f64 / (h * w) as f64
}

fn uniform_usize(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn uniform_f64(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Marks as holes all pixels whose integer centre lies within `radius` of the
/// segment `a`–`b`.
fn stamp_segment(mask: &mut Array2<f64>, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (h, w) = mask.dim();
    let (ax, ay) = a;
    let (bx, by) = b;
    let x0 = (ax.min(bx) - radius).floor().max(0.0) as usize;
    let x1 = ((ax.max(bx) + radius).ceil() as usize).min(w - 1);
    let y0 = (ay.min(by) - radius).floor().max(0.0) as usize;
    let y1 = ((ay.max(by) + radius).ceil() as usize).min(h - 1);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64, y as f64);
            let t = if len2 > 0.0 {
                (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (ax + t * dx - px, ay + t * dy - py);
            if cx * cx + cy * cy <= r2 {
                mask[[y, x]] = 0.0;
            }
        }
    }
}

fn draw_strokes(rng: &mut ChaCha8Rng, (h, w): (usize, usize), cfg: &StrokeConfig) -> Array2<f64> {
    let mut mask = Array2::ones((h, w));
    let (maxx, maxy) = ((w - 1) as f64, (h - 1) as f64);
    for _ in 0..uniform_usize(rng, cfg.num_strokes) {
        let width = uniform_f64(rng, cfg.min_stroke_width, cfg.max_stroke_width);
        let radius = width / 2.0;
        let mut p = (rng.random_range(0.0..=maxx), rng.random_range(0.0..=maxy));
        let mut heading = rng.random_range(0.0..2.0 * PI);
        for _ in 1..uniform_usize(rng, cfg.vertex_count) {
            heading += uniform_f64(rng, -cfg.max_turn_angle, cfg.max_turn_angle);
            let len = uniform_f64(rng, cfg.segment_length.0, cfg.segment_length.1);
            let next = (
                (p.0 + len * heading.cos()).clamp(0.0, maxx),
                (p.1 + len * heading.sin()).clamp(0.0, maxy),
            );
            stamp_segment(&mut mask, p, next, radius);
            p = next;
        }
    }
    mask
}

/// Rasterizes random brush strokes as holes, resampling until the
/// hole-to-image ratio lands inside `cfg.target_ratio`.
pub fn generate_freeform_mask(seed: u64, size: (usize, usize), cfg: &StrokeConfig) -> Result<HoleMask> {
    cfg.validate()?;
    let (h, w) = size;
    if h < MIN_MASK_SIDE || w < MIN_MASK_SIDE {
        return Err(Error::Dimension(format!(
            "mask size {h}x{w} below the {MIN_MASK_SIDE}-pixel minimum"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.target_ratio;
    for _ in 0..MAX_ATTEMPTS {
        let mask = HoleMask::new(draw_strokes(&mut rng, size, cfg))?;
        let ratio = hole_to_image_ratio(&mask);
        if ratio >= lo && ratio <= hi {
            return Ok(mask);
        }
    }
    Err(Error::Generation {
        attempts: MAX_ATTEMPTS,
        lo,
        hi,
    })
}

/// `n` masks whose individual seeds are drawn from one stream seeded by
/// `seed`, so a set is reproducible from a single number.
pub fn generate_mask_set(seed: u64, n: usize, size: (usize, usize), cfg: &StrokeConfig) -> Result<Vec<HoleMask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    (0..n)
        .map(|_| generate_freeform_mask(rng.random::<u64>(), size, cfg))
        .collect()
}

/// Per-pixel face-parsing labels plus the name → label mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMap {
    data: Array2<u32>,
    labels: BTreeMap<String, u32>,
}

pub const DEFAULT_FOREGROUND_LABELS: [&str; 2] = ["skin", "hair"];

impl AttributeMap {
    pub fn new(data: Array2<u32>, labels: BTreeMap<String, u32>) -> Result<Self> {
        let known: BTreeSet<u32> = labels.values().copied().collect();
        if let Some(bad) = data.iter().find(|v| !known.contains(v)) {
            return Err(Error::Config(format!("label value {bad} is not named in the label mapping")));
        }
        Ok(Self { data, labels })
    }

    pub fn data(&self) -> &Array2<u32> {
        &self.data
    }

    pub fn labels(&self) -> &BTreeMap<String, u32> {
        &self.labels
    }

    /// Reads an 8-bit indexed or grayscale PNG as raw label indices.
    pub fn load_png(path: &Path, labels: BTreeMap<String, u32>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let decode_err = |e: png::DecodingError| Error::Mask(format!("{}: {e}", path.display()));
        let mut reader = decoder.read_info().map_err(decode_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(decode_err)?;
        if info.bit_depth != png::BitDepth::Eight
            || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
        {
            return Err(Error::Mask(format!(
                "{}: attribute maps must be 8-bit indexed or grayscale PNGs",
                path.display()
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let data = Array2::from_shape_fn((h, w), |(y, x)| buf[y * info.line_size + x] as u32);
        Self::new(data, labels)
    }
}

/// Parses a `labels.json` mapping and checks it names every label in
/// `required`.
pub fn load_labels(path: &Path, required: &[&str]) -> Result<BTreeMap<String, u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let labels: BTreeMap<String, u32> = serde_json::from_str(&text)?;
    check_labels(&labels, required)?;
    Ok(labels)
}

fn check_labels(labels: &BTreeMap<String, u32>, required: &[&str]) -> Result<()> {
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|name| !labels.contains_key(*name))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("label mapping lacks {}", missing.join(", "))))
    }
}

/// Foreground from the skin and hair labels.
pub fn foreground_from_attributes(attrs: &AttributeMap) -> Result<ForegroundMask> {
    foreground_from_labels(attrs, &DEFAULT_FOREGROUND_LABELS)
}

/// A pixel is foreground iff its label is one of `names`.
pub fn foreground_from_labels(attrs: &AttributeMap, names: &[&str]) -> Result<ForegroundMask> {
    check_labels(&attrs.labels, names)?;
    let wanted: BTreeSet<u32> = names.iter().map(|n| attrs.labels[*n]).collect();
    let data = attrs.data.mapv(|l| if wanted.contains(&l) { 1.0 } else { 0.0 });
    Ok(ForegroundMask::from_binary(BinaryMask::new(data)?))
}
