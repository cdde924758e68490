//! Image and mask value types, hole application, resampling and dataset
//! ingestion.
//!
//! Masks follow one convention everywhere: for a [`HoleMask`], `1` marks a
//! valid pixel and `0` a hole; for a [`ForegroundMask`], `1` marks skin or
//! hair.

use std::collections::BTreeMap;
use std::ops::Deref;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Array4, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MIN_SIDE: usize = 8;

/// Numeric range an [`ImageTensor`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 1]`, used by metrics and file I/O.
    Unit,
    /// `[-1, 1]`, used by the networks.
    Symmetric,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }

    fn from_u8(self, v: u8) -> f64 {
        let u = v as f64 / 255.0;
        match self {
            ValueRange::Unit => u,
            ValueRange::Symmetric => u * 2.0 - 1.0,
        }
    }
}

/// An H×W×C image with a declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>, range: ValueRange) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Dimension(format!(
                "image is {h}x{w}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::Dimension(format!("image has {c} channels, expected 1 or 3")));
        }
        let (lo, hi) = range.bounds();
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && **v >= lo && **v <= hi)) {
            return Err(Error::Range(format!("pixel value {bad} outside {lo}..={hi}")));
        }
        Ok(Self { data, range })
    }

    /// Builds an image with values clamped into `range`. Non-finite values
    /// are still rejected.
    pub fn new_clamped(mut data: Array3<f64>, range: ValueRange) -> Result<Self> {
        let (lo, hi) = range.bounds();
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(lo, hi) } else { v });
        Self::new(data, range)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Number of elements, H*W*C.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Linear conversion between value ranges.
    pub fn to_range(&self, target: ValueRange) -> ImageTensor {
        let data = match (self.range, target) {
            (a, b) if a == b => self.data.clone(),
            (ValueRange::Unit, ValueRange::Symmetric) => self.data.mapv(|v| v * 2.0 - 1.0),
            (ValueRange::Symmetric, ValueRange::Unit) => self.data.mapv(|v| (v + 1.0) * 0.5),
            _ => unreachable!(),
        };
        let (lo, hi) = target.bounds();
        ImageTensor {
            data: data.mapv(|v| v.clamp(lo, hi)),
            range: target,
        }
    }

    pub fn load_png(path: &Path, range: ValueRange) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            range.from_u8(img.get_pixel(x as u32, y as u32)[c])
        });
        Self::new(data, range)
    }

    /// Quantizes to 8 bits; grayscale images are written as RGB.
    pub fn to_rgb8(&self) -> RgbImage {
        let unit = self.to_range(ValueRange::Unit);
        let (h, w, c) = unit.data.dim();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = unit.data[[y as usize, x as usize, if c == 1 { 0 } else { ch }]];
                (v * 255.0).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// A strictly binary H×W map.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    data: Array2<f64>,
}

impl BinaryMask {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::Mask(format!("mask entry {bad} is not 0 or 1")));
        }
        Ok(Self { data })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            data: Array2::ones((h, w)),
        }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Array2::zeros((h, w)),
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|v| **v == 1.0).count()
    }

    /// Reads a grayscale PNG, thresholding at mid-gray (255 → 1).
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            if img.get_pixel(x as u32, y as u32)[0] >= 128 {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self { data })
    }

    pub fn to_luma8(&self) -> GrayImage {
        let (h, w) = self.dim();
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.data[[y as usize, x as usize]] == 1.0 { 255 } else { 0 }])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Valid (1) versus hole (0) pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct HoleMask(BinaryMask);

impl HoleMask {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        BinaryMask::new(data).map(Self)
    }

    pub fn from_binary(mask: BinaryMask) -> Self {
        Self(mask)
    }

    pub fn into_binary(self) -> BinaryMask {
        self.0
    }
}

impl Deref for HoleMask {
    type Target = BinaryMask;
    fn deref(&self) -> &BinaryMask {
        &self.0
    }
}

/// Skin-and-hair region (`M_F`).
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask(BinaryMask);

impl ForegroundMask {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        BinaryMask::new(data).map(Self)
    }

    pub fn from_binary(mask: BinaryMask) -> Self {
        Self(mask)
    }

    pub fn into_binary(self) -> BinaryMask {
        self.0
    }
}

impl Deref for ForegroundMask {
    type Target = BinaryMask;
    fn deref(&self) -> &BinaryMask {
        &self.0
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub image: ImageTensor,
    pub foreground: ForegroundMask,
    pub hole: HoleMask,
}

impl SamplePair {
    pub fn new(
        id: impl Into<String>,
        image: ImageTensor,
        foreground: ForegroundMask,
        hole: HoleMask,
    ) -> Result<Self> {
        let id = id.into();
        let hw = (image.height(), image.width());
        if foreground.dim() != hw || hole.dim() != hw {
            return Err(Error::Dimension(format!(
                "sample `{id}`: image {hw:?}, foreground {:?}, hole {:?}",
                foreground.dim(),
                hole.dim()
            )));
        }
        Ok(Self {
            id,
            image,
            foreground,
            hole,
        })
    }

    /// The generator input `M_I`, in the image's own range.
    pub fn masked(&self) -> ImageTensor {
        apply_hole_mask(&self.image, &self.hole).expect("shapes validated at construction")
    }
}

fn check_spatial(image: &ImageTensor, mask: &BinaryMask, what: &str) -> Result<()> {
    let hw = (image.height(), image.width());
    if mask.dim() != hw {
        return Err(Error::Dimension(format!(
            "{what}: image is {hw:?} but mask is {:?}",
            mask.dim()
        )));
    }
    Ok(())
}

/// `M_I[h,w,c] = image[h,w,c] * hole[h,w]`.
pub fn apply_hole_mask(image: &ImageTensor, hole: &HoleMask) -> Result<ImageTensor> {
    check_spatial(image, hole, "apply_hole_mask")?;
    let mut data = image.data.clone();
    Zip::indexed(&mut data).for_each(|(y, x, _), v| *v *= hole.data[[y, x]]);
    Ok(ImageTensor {
        data,
        range: image.range,
    })
}

/// `hole ⊙ gt + (1 − hole) ⊙ pred`: valid pixels come from `gt`, holes from
/// `pred`.
pub fn composite_output(pred: &ImageTensor, gt: &ImageTensor, hole: &HoleMask) -> Result<ImageTensor> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::Dimension(format!(
            "composite_output: pred {:?} vs gt {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    if pred.range != gt.range {
        return Err(Error::Range("composite_output: pred and gt value ranges differ".into()));
    }
    check_spatial(gt, hole, "composite_output")?;
    let mut data = gt.data.clone();
    Zip::indexed(&mut data).and(&pred.data).for_each(|(y, x, _), out, &p| {
        if hole.data[[y, x]] == 0.0 {
            *out = p;
        }
    });
    Ok(ImageTensor {
        data,
        range: gt.range,
    })
}

fn check_target(target: (usize, usize)) -> Result<()> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Dimension(format!("resize target {target:?} must be positive")));
    }
    Ok(())
}

/// Bilinear resampling with half-pixel centre alignment, clamped to the
/// image's value range.
pub fn resize_image(image: &ImageTensor, target: (usize, usize)) -> Result<ImageTensor> {
    check_target(target)?;
    if target.0 < MIN_SIDE || target.1 < MIN_SIDE {
        return Err(Error::Dimension(format!(
            "resize target {target:?} below the {MIN_SIDE}-pixel minimum"
        )));
    }
    let (h, w, c) = image.data.dim();
    if (h, w) == target {
        return Ok(image.clone());
    }
    let (th, tw) = target;
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let coord = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let (lo, hi) = image.range.bounds();
    let src = &image.data;
    let data = Array3::from_shape_fn((th, tw, c), |(y, x, ch)| {
        let (y0, y1, fy) = coord(y, sy, h);
        let (x0, x1, fx) = coord(x, sx, w);
        let top = src[[y0, x0, ch]] * (1.0 - fx) + src[[y0, x1, ch]] * fx;
        let bottom = src[[y1, x0, ch]] * (1.0 - fx) + src[[y1, x1, ch]] * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(lo, hi)
    });
    Ok(ImageTensor {
        data,
        range: image.range,
    })
}

/// Nearest-neighbour resampling; output values are a subset of the input's.
pub fn resize_mask(mask: &BinaryMask, target: (usize, usize)) -> Result<BinaryMask> {
    check_target(target)?;
    let (h, w) = mask.dim();
    if (h, w) == target {
        return Ok(mask.clone());
    }
    let (th, tw) = target;
    let pick = |dst: usize, len: usize, tlen: usize| {
        (((dst as f64 + 0.5) * len as f64 / tlen as f64).floor() as usize).min(len - 1)
    };
    let data = Array2::from_shape_fn((th, tw), |(y, x)| mask.data[[pick(y, h, th), pick(x, w, tw)]]);
    Ok(BinaryMask { data })
}

/// Stacks images into an (N, C, H, W) batch.
pub fn to_nchw(images: &[&ImageTensor]) -> Result<Array4<f64>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dimension("cannot batch zero images".into()))?;
    let (h, w, c) = first.data.dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        if img.data.dim() != (h, w, c) {
            return Err(Error::Dimension(format!(
                "batch element {n} is {:?}, expected {:?}",
                img.data.dim(),
                (h, w, c)
            )));
        }
        for ((y, x, ch), v) in img.data.indexed_iter() {
            out[[n, ch, y, x]] = *v;
        }
    }
    Ok(out)
}

/// Splits an (N, C, H, W) batch back into images, clamping into `range`.
pub fn from_nchw(batch: &Array4<f64>, range: ValueRange) -> Result<Vec<ImageTensor>> {
    let (n, c, h, w) = batch.dim();
    (0..n)
        .map(|i| {
            let data = Array3::from_shape_fn((h, w, c), |(y, x, ch)| batch[[i, ch, y, x]]);
            ImageTensor::new_clamped(data, range)
        })
        .collect()
}

/// Stacks masks into an (N, 1, H, W) batch.
pub fn masks_to_n1hw(masks: &[&BinaryMask]) -> Result<Array4<f64>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Dimension("cannot batch zero masks".into()))?;
    let (h, w) = first.dim();
    let mut out = Array4::zeros((masks.len(), 1, h, w));
    for (n, m) in masks.iter().enumerate() {
        if m.dim() != (h, w) {
            return Err(Error::Dimension(format!("mask {n} is {:?}, expected {:?}", m.dim(), (h, w))));
        }
        out.slice_mut(ndarray::s![n, 0, .., ..]).assign(&m.data);
    }
    Ok(out)
}

/// Which part of a dataset directory to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Seed for the hole-mask assignment.
    pub seed: u64,
    /// Resize images and masks to this square side when set.
    pub image_size: Option<usize>,
    /// Fraction of ids (the lexicographic tail) reserved for the test split.
    pub test_fraction: f64,
    pub range: ValueRange,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: None,
            test_fraction: 0.1,
            range: ValueRange::Unit,
        }
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Index into a pool of `len` items chosen by `(seed, id)` alone.
pub fn seeded_index(seed: u64, id: &str, len: usize) -> usize {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(id.as_bytes())
        .finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) % len as u64) as usize
}

/// Reads `<root>/images/<id>.png`, `<root>/foreground/<id>.png` and the hole
/// pool `<root>/holes/*.png`. Samples come back sorted by id.
pub fn load_dataset(root: &Path, split: Split, opts: &LoadOptions) -> Result<Vec<SamplePair>> {
    let images = png_stems(&root.join("images"))?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let foregrounds = png_stems(&root.join("foreground"))?;
    let holes: Vec<PathBuf> = png_stems(&root.join("holes"))?.into_values().collect();

    let ids: Vec<&String> = images.keys().collect();
    let n_test = ((ids.len() as f64) * opts.test_fraction).round() as usize;
    let n_train = ids.len() - n_test.min(ids.len());
    let selected: &[&String] = match split {
        Split::Train => &ids[..n_train],
        Split::Test => &ids[n_train..],
        Split::All => &ids,
    };

    let missing: Vec<&str> = selected
        .iter()
        .filter(|id| !foregrounds.contains_key(id.as_str()))
        .map(|id| id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Ingestion {
            id: missing.join(", "),
            reason: "no matching foreground mask".into(),
        });
    }
    if !selected.is_empty() && holes.is_empty() {
        return Err(Error::Ingestion {
            id: selected[0].to_string(),
            reason: format!("hole-mask pool {} is empty", root.join("holes").display()),
        });
    }

    let mut out = Vec::with_capacity(selected.len());
    for id in selected {
        let ingest = |e: Error| Error::Ingestion {
            id: id.to_string(),
            reason: e.to_string(),
        };
        let mut image = ImageTensor::load_png(&images[*id], opts.range).map_err(ingest)?;
        let mut fg = BinaryMask::load_png(&foregrounds[*id]).map_err(ingest)?;
        let hole_path = &holes[seeded_index(opts.seed, id, holes.len())];
        let mut hole = BinaryMask::load_png(hole_path).map_err(ingest)?;
        let target = opts
            .image_size
            .map(|s| (s, s))
            .unwrap_or((image.height(), image.width()));
        if (image.height(), image.width()) != target {
            image = resize_image(&image, target).map_err(ingest)?;
        }
        fg = resize_mask(&fg, target).map_err(ingest)?;
        hole = resize_mask(&hole, target).map_err(ingest)?;
        if fg.count_ones() == 0 {
            return Err(Error::Ingestion {
                id: id.to_string(),
                reason: "foreground mask is all zeros".into(),
            });
        }
        out.push(SamplePair::new(
            id.as_str(),
            image,
            ForegroundMask::from_binary(fg),
            HoleMask::from_binary(hole),
        )?);
    }
    Ok(out)
}
