//! Image quality metrics, global or restricted to a foreground mask.
//!
//! Every metric works on `[0, 1]` images. The global variant is the
//! foreground variant with an all-ones mask, so the two agree exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Conv2dGeometry, Tape};
use crate::error::{Error, Result};
use crate::imaging::{resize_image, to_nchw, BinaryMask, ImageTensor, ValueRange};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(gt: &ImageTensor, pred: &ImageTensor, scope: Option<&BinaryMask>) -> Result<Array2<f64>> {
    if gt.data().dim() != pred.data().dim() {
        return Err(Error::Dimension(format!(
            "metric inputs differ: {:?} vs {:?}",
            gt.data().dim(),
            pred.data().dim()
        )));
    }
    let hw = (gt.height(), gt.width());
    match scope {
        Some(m) if m.dim() != hw => Err(Error::Dimension(format!("scope mask {:?} vs image {hw:?}", m.dim()))),
        Some(m) if m.count_ones() == 0 => Err(Error::Metric("scope mask selects no pixels".into())),
        Some(m) => Ok(m.data().clone()),
        None => Ok(Array2::ones(hw)),
    }
}

fn unit(img: &ImageTensor) -> ImageTensor {
    img.to_range(ValueRange::Unit)
}

fn masked_mean(gt: &ImageTensor, pred: &ImageTensor, scope: Option<&BinaryMask>, f: impl Fn(f64) -> f64) -> Result<f64> {
    let m = check_pair(gt, pred, scope)?;
    let (a, b) = (unit(gt), unit(pred));
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((y, x, c), &u) in a.data().indexed_iter() {
        if m[[y, x]] != 0.0 {
            acc += f(u - b.data()[[y, x, c]]);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Mean squared error over the included elements.
pub fn mse(gt: &ImageTensor, pred: &ImageTensor, scope: Option<&BinaryMask>) -> Result<f64> {
    masked_mean(gt, pred, scope, |d| d * d)
}

pub fn mae(gt: &ImageTensor, pred: &ImageTensor, scope: Option<&BinaryMask>) -> Result<f64> {
    masked_mean(gt, pred, scope, f64::abs)
}

/// `10 log10(1 / mse)`, with `+inf` for a perfect match.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(gt: &ImageTensor, pred: &ImageTensor, scope: Option<&BinaryMask>) -> Result<f64> {
    mse(gt, pred, scope).map(psnr_from_mse)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a 2-D plane.
fn filter_valid(plane: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let n = k.len();
    let (h, w) = plane.dim();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(y, x)| (0..n).map(|i| k[i] * plane[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..n).map(|i| k[i] * rows[[y + i, x]]).sum::<f64>())
}

/// Local SSIM map of one channel over valid window positions.
pub fn ssim_map(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut out = Array2::zeros(mu_a.dim());
    ndarray::Zip::from(&mut out)
        .and(&mu_a)
        .and(&mu_b)
        .and(&aa)
        .and(&bb)
        .and(&ab)
        .for_each(|o, &ma, &mb, &saa, &sbb, &sab| {
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            *o = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        });
    out
}

/// Mean local SSIM over all channels and windows; with a scope mask only
/// windows centred on a foreground pixel count.
pub fn ssim(gt: &ImageTensor, pred: &ImageTensor, scope: Option<&BinaryMask>) -> Result<f64> {
    let m = check_pair(gt, pred, scope)?;
    let (h, w) = (gt.height(), gt.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} images, got {h}×{w}"
        )));
    }
    let (a, b) = (unit(gt), unit(pred));
    let half = SSIM_WINDOW / 2;
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..gt.channels() {
        let pa = a.data().index_axis(ndarray::Axis(2), c).to_owned();
        let pb = b.data().index_axis(ndarray::Axis(2), c).to_owned();
        for ((y, x), &v) in ssim_map(&pa, &pb).indexed_iter() {
            if m[[y + half, x + half]] != 0.0 {
                acc += v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Metric("no ssim window is centred on a foreground pixel".into()));
    }
    Ok(acc / count as f64)
}

/// A fixed image embedding network for FID.
pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Three seeded stride-2 convolutions with ReLU and global average pooling,
/// applied to images resized to 64×64 in `[-1, 1]`. Cheap and deterministic.
pub struct FixedConvBackend {
    seed: u64,
    layers: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

const FIXED_WIDTHS: [usize; 3] = [16, 32, 64];
const FIXED_SIDE: usize = 64;

impl FixedConvBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let mut cin = 3;
        let layers = FIXED_WIDTHS
            .iter()
            .map(|&cout| {
                let normal = Normal::new(0.0, (2.0 / (cin * 9) as f64).sqrt()).unwrap();
                let w = ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin, 3, 3]), || normal.sample(&mut rng));
                let b = ArrayD::from_shape_simple_fn(IxDyn(&[cout]), || 0.1 * normal.sample(&mut rng));
                cin = cout;
                (w, b)
            })
            .collect();
        Self { seed, layers }
    }
}

impl Default for FixedConvBackend {
    fn default() -> Self {
        Self::new(0)
    }
}

impl EmbeddingBackend for FixedConvBackend {
    fn name(&self) -> String {
        format!("fixed-conv-d64-seed{}", self.seed)
    }

    fn dim(&self) -> usize {
        FIXED_WIDTHS[FIXED_WIDTHS.len() - 1]
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let mut img = resize_image(&image.to_range(ValueRange::Symmetric), (FIXED_SIDE, FIXED_SIDE))?;
        if img.channels() == 1 {
            let grey = img.data().clone();
            let rgb = ndarray::concatenate(ndarray::Axis(2), &[grey.view(), grey.view(), grey.view()]).unwrap();
            img = ImageTensor::new(rgb, ValueRange::Symmetric)?;
        }
        let mut tape = Tape::new();
        let mut h = tape.constant(to_nchw(&[&img])?.into_dyn());
        for (w, b) in &self.layers {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            h = tape.conv2d(h, wv, Some(bv), Conv2dGeometry { stride: 2, padding: 1 });
            h = tape.relu(h);
        }
        let pooled = tape.global_avg_pool(h);
        let out: Vec<f64> = tape.value(pooled).iter().copied().collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(out)
    }
}

/// Looks up a backend by CLI name.
pub fn backend_by_name(name: &str) -> Result<Box<dyn EmbeddingBackend>> {
    match name {
        "fixed-conv" | "test" => Ok(Box::new(FixedConvBackend::default())),
        other => Err(Error::Config(format!(
            "unknown embedding backend `{other}` (available: fixed-conv)"
        ))),
    }
}

fn mean_cov(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Metric(format!("fid needs at least 2 samples per set, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension("embeddings have differing lengths".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

/// Square root of a symmetric positive semi-definite matrix, clamping
/// slightly negative eigenvalues to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-6 * scale {
            return Err(Error::Metric(format!("covariance has eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to two embedding sets.
pub fn fid_from_embeddings(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = mean_cov(a)?;
    let (mu_b, cov_b) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Dimension("embedding sets differ in dimension".into()));
    }
    // Tr((Σa Σb)^½) = Tr((Σa^½ Σb Σa^½)^½), the latter being symmetric.
    let ra = sqrt_psd(&cov_a)?;
    let inner = &ra * &cov_b * &ra;
    let cross = sqrt_psd(&inner)?.trace();
    let diff = &mu_a - &mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("fid".into()));
    }
    Ok(value.max(0.0))
}

fn embed_all(
    set: &[&ImageTensor],
    masks: Option<&[&BinaryMask]>,
    backend: &dyn EmbeddingBackend,
) -> Result<Vec<Vec<f64>>> {
    set.iter()
        .enumerate()
        .map(|(i, img)| match masks {
            Some(ms) => {
                let m = ms
                    .get(i)
                    .ok_or_else(|| Error::Dimension("one scope mask per image required".into()))?;
                let u = img.to_range(ValueRange::Unit);
                if m.dim() != (u.height(), u.width()) {
                    return Err(Error::Dimension(format!("scope mask {:?} vs image", m.dim())));
                }
                let mut data = u.data().clone();
                ndarray::Zip::indexed(&mut data).for_each(|(y, x, _), v| *v *= m.data()[[y, x]]);
                backend.embed(&ImageTensor::new(data, ValueRange::Unit)?)
            }
            None => backend.embed(img),
        })
        .collect()
}

/// FID between two image sets. Scope masks, when given, multiply each image
/// (of both sets, paired by index) before embedding.
pub fn fid(
    set_a: &[&ImageTensor],
    set_b: &[&ImageTensor],
    backend: &dyn EmbeddingBackend,
    masks: Option<&[&BinaryMask]>,
) -> Result<f64> {
    let ea = embed_all(set_a, masks, backend)?;
    let eb = embed_all(set_b, masks, backend)?;
    fid_from_embeddings(&ea, &eb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Foreground,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Global => "global",
            Scope::Foreground => "foreground",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Absent when a set holds fewer than two images.
    pub fid: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub scope: Scope,
    pub per_image: BTreeMap<String, ImageMetrics>,
    pub aggregate: AggregateMetrics,
}

/// One evaluation example: ground truth, prediction and an optional
/// foreground mask.
pub struct EvalItem {
    pub id: String,
    pub gt: ImageTensor,
    pub pred: ImageTensor,
    pub fg: Option<BinaryMask>,
}

/// Per-image metrics plus means and FID, computed over `items` in order.
pub fn build_report(items: &[EvalItem], scope: Scope, backend: &dyn EmbeddingBackend) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::Metric("nothing to evaluate".into()));
    }
    let mask_of = |it: &EvalItem| -> Result<Option<BinaryMask>> {
        match scope {
            Scope::Global => Ok(None),
            Scope::Foreground => it
                .fg
                .clone()
                .map(Some)
                .ok_or_else(|| Error::Metric(format!("`{}` has no foreground mask", it.id))),
        }
    };
    let mut per_image = BTreeMap::new();
    let mut masks = Vec::new();
    for it in items {
        let m = mask_of(it)?;
        let scope_mask = m.as_ref();
        let e = ImageMetrics {
            mse: mse(&it.gt, &it.pred, scope_mask)?,
            mae: mae(&it.gt, &it.pred, scope_mask)?,
            psnr: psnr(&it.gt, &it.pred, scope_mask)?,
            ssim: ssim(&it.gt, &it.pred, scope_mask)?,
        };
        per_image.insert(it.id.clone(), e);
        masks.extend(m);
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.values().map(f).sum::<f64>() / n;
    let fid_value = if items.len() >= 2 {
        let gts: Vec<&ImageTensor> = items.iter().map(|i| &i.gt).collect();
        let preds: Vec<&ImageTensor> = items.iter().map(|i| &i.pred).collect();
        let mrefs: Vec<&BinaryMask> = masks.iter().collect();
        let scope_masks = (scope == Scope::Foreground).then_some(mrefs.as_slice());
        Some(fid(&gts, &preds, backend, scope_masks)?)
    } else {
        log::warn!("fid skipped: it needs at least two images");
        None
    };
    Ok(MetricReport {
        scope,
        aggregate: AggregateMetrics {
            mse: mean(|m| m.mse),
            mae: mean(|m| m.mae),
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            fid: fid_value,
        },
        per_image,
    })
}

fn png_ids(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads matching `<id>.png` files from the ground-truth, prediction and
/// (optional) foreground directories and reports on them: always a global
/// report, plus a foreground one when `dir_fg` is given.
pub fn evaluate_pairs(
    dir_gt: &Path,
    dir_pred: &Path,
    dir_fg: Option<&Path>,
    backend: &dyn EmbeddingBackend,
) -> Result<(MetricReport, Option<MetricReport>)> {
    let gt = png_ids(dir_gt)?;
    let pred = png_ids(dir_pred)?;
    let fg = dir_fg.map(png_ids).transpose()?;
    let mut offenders: Vec<&str> = gt
        .keys()
        .filter(|k| !pred.contains_key(*k))
        .chain(pred.keys().filter(|k| !gt.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if let Some(fg) = &fg {
        offenders.extend(gt.keys().filter(|k| !fg.contains_key(*k)).map(String::as_str));
    }
    offenders.sort_unstable();
    offenders.dedup();
    if !offenders.is_empty() {
        return Err(Error::Ingestion {
            id: offenders.join(", "),
            reason: "id missing from one of the evaluation directories".into(),
        });
    }
    let mut items = Vec::with_capacity(gt.len());
    for (id, gpath) in &gt {
        items.push(EvalItem {
            id: id.clone(),
            gt: ImageTensor::load_png(gpath, ValueRange::Unit)?,
            pred: ImageTensor::load_png(&pred[id], ValueRange::Unit)?,
            fg: fg.as_ref().map(|f| BinaryMask::load_png(&f[id])).transpose()?,
        });
    }
    let global = build_report(&items, Scope::Global, backend)?;
    let foreground = match dir_fg {
        Some(_) => Some(build_report(&items, Scope::Foreground, backend)?),
        None => None,
    };
    Ok((global, foreground))
}

fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

fn json_metric(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!(fmt_metric(v))
    }
}

impl MetricReport {
    /// Per-image rows followed by an `aggregate` row carrying FID.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "mse", "mae", "psnr", "ssim", "fid"])?;
        for (id, m) in &self.per_image {
            w.write_record([id.clone(), fmt_metric(m.mse), fmt_metric(m.mae), fmt_metric(m.psnr), fmt_metric(m.ssim), String::new()])?;
        }
        let a = &self.aggregate;
        w.write_record([
            "aggregate".to_string(),
            fmt_metric(a.mse),
            fmt_metric(a.mae),
            fmt_metric(a.psnr),
            fmt_metric(a.ssim),
            a.fid.map(fmt_metric).unwrap_or_default(),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let a = &self.aggregate;
        serde_json::json!({
            "scope": self.scope.as_str(),
            "count": self.per_image.len(),
            "aggregate": {
                "mse": json_metric(a.mse),
                "mae": json_metric(a.mae),
                "psnr": json_metric(a.psnr),
                "ssim": json_metric(a.ssim),
                "fid": a.fid.map(json_metric),
            },
        })
    }
}

/// Writes `report_global.csv`, `report_foreground.csv` (when present) and
/// `report.json` into `out_dir`.
pub fn write_reports(
    out_dir: &Path,
    global: &MetricReport,
    foreground: Option<&MetricReport>,
    backend: &dyn EmbeddingBackend,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    global.write_csv(&out_dir.join("report_global.csv"))?;
    if let Some(fg) = foreground {
        fg.write_csv(&out_dir.join("report_foreground.csv"))?;
    }
    let settings = serde_json::json!({
        "backend": backend.name(),
        "value_range": "unit",
        "ssim_window": SSIM_WINDOW,
        "ssim_sigma": SSIM_SIGMA,
        "ssim_c1": SSIM_C1,
        "ssim_c2": SSIM_C2,
    });
    let hash: String = Sha256::digest(settings.to_string().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let mut reports = vec![global.to_json()];
    reports.extend(foreground.map(MetricReport::to_json));
    let doc = serde_json::json!({
        "backend": backend.name(),
        "embedding_dim": backend.dim(),
        "image_count": global.per_image.len(),
        "config_hash": hash,
        "settings": settings,
        "reports": reports,
    });
    let path = out_dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_img(seed: u64, h: usize, w: usize, c: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((h, w, c), |_| rng.random_range(0.0..1.0)), ValueRange::Unit).unwrap()
    }

    fn constant(v: f64, side: usize) -> ImageTensor {
        ImageTensor::new(Array3::from_elem((side, side, 1), v), ValueRange::Unit).unwrap()
    }

    /// The 2×2 fixture placed in the corner of an 8×8 canvas; the scope mask
    /// selects only its top row.
    fn fixture() -> (ImageTensor, ImageTensor, BinaryMask) {
        let mut g = Array3::zeros((8, 8, 1));
        let mut p = Array3::zeros((8, 8, 1));
        g[[0, 0, 0]] = 1.0;
        p[[0, 0, 0]] = 0.5;
        g[[1, 0, 0]] = 0.3;
        let mut m = Array2::zeros((8, 8));
        m[[0, 0]] = 1.0;
        m[[0, 1]] = 1.0;
        (
            ImageTensor::new(g, ValueRange::Unit).unwrap(),
            ImageTensor::new(p, ValueRange::Unit).unwrap(),
            BinaryMask::new(m).unwrap(),
        )
    }

    #[test]
    fn scoped_fixture_values() {
        let (g, p, m) = fixture();
        assert!((mse(&g, &p, Some(&m)).unwrap() - 0.125).abs() < 1e-12);
        assert!((mae(&g, &p, Some(&m)).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn extremes_and_offsets() {
        let z = constant(0.0, 8);
        let o = constant(1.0, 8);
        assert_eq!(mse(&z, &o, None).unwrap(), 1.0);
        assert_eq!(mse(&o, &o, None).unwrap(), 0.0);
        assert!((mae(&constant(0.5, 8), &constant(0.75, 8), None).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(psnr(&o, &o, None).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-9);
        assert!((psnr_from_mse(0.25) - 6.020599913279624).abs() < 1e-9);
        let zeros = BinaryMask::zeros(8, 8);
        assert!(matches!(mse(&z, &o, Some(&zeros)), Err(Error::Metric(_))));
    }

    /// Direct double sum over each 11×11 window.
    fn naive_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
        let (h, w, ch) = a.data().dim();
        let mut acc = 0.0;
        let mut n = 0;
        for c in 0..ch {
            for y0 in 0..=h - SSIM_WINDOW {
                for x0 in 0..=w - SSIM_WINDOW {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wt = k[i] * k[j];
                            let u = a.data()[[y0 + i, x0 + j, c]];
                            let v = b.data()[[y0 + i, x0 + j, c]];
                            ma += wt * u;
                            mb += wt * v;
                            saa += wt * u * u;
                            sbb += wt * v * v;
                            sab += wt * u * v;
                        }
                    }
                    let va = saa - ma * ma;
                    let vb = sbb - mb * mb;
                    let cv = sab - ma * mb;
                    acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cv + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    n += 1;
                }
            }
        }
        acc / n as f64
    }

    #[test]
    fn ssim_matches_naive_windows() {
        let a = rand_img(1, 32, 32, 3);
        let b = rand_img(2, 32, 32, 3);
        assert!((ssim(&a, &b, None).unwrap() - naive_ssim(&a, &b)).abs() < 1e-8);
    }

    #[test]
    fn ssim_closed_forms() {
        let a = rand_img(3, 16, 16, 3);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let (c1, c2) = (0.2, 0.7);
        let want = (2.0 * c1 * c2 + SSIM_C1) / (c1 * c1 + c2 * c2 + SSIM_C1);
        assert!((ssim(&constant(c1, 16), &constant(c2, 16), None).unwrap() - want).abs() < 1e-9);
        assert!(matches!(ssim(&constant(0.1, 10), &constant(0.1, 10), None), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_scope_uses_window_centres() {
        let a = rand_img(4, 16, 16, 1);
        let b = rand_img(5, 16, 16, 1);
        let mut m = Array2::zeros((16, 16));
        m[[5, 5]] = 1.0; // centre of the first window only
        let m = BinaryMask::new(m).unwrap();
        let map = ssim_map(&a.data().index_axis(ndarray::Axis(2), 0).to_owned(), &b.data().index_axis(ndarray::Axis(2), 0).to_owned());
        assert!((ssim(&a, &b, Some(&m)).unwrap() - map[[0, 0]]).abs() < 1e-15);
        let mut edge = Array2::zeros((16, 16));
        edge[[0, 0]] = 1.0;
        assert!(matches!(ssim(&a, &b, Some(&BinaryMask::new(edge).unwrap())), Err(Error::Metric(_))));
    }

    #[test]
    fn psnr_drops_with_noise() {
        let base = rand_img(6, 16, 16, 3);
        let noise = rand_img(7, 16, 16, 3);
        let values: Vec<f64> = [0.02, 0.1, 0.3]
            .iter()
            .map(|&amp| {
                let noisy = base.data() + &((noise.data() - 0.5) * amp);
                let noisy = ImageTensor::new_clamped(noisy, ValueRange::Unit).unwrap();
                psnr(&base, &noisy, None).unwrap()
            })
            .collect();
        assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
    }

    #[test]
    fn fid_point_masses_and_identity() {
        let ea = vec![vec![1.0, 2.0, 3.0]; 4];
        let eb = vec![vec![0.0, 2.0, 5.0]; 4];
        assert!((fid_from_embeddings(&ea, &eb).unwrap() - 5.0).abs() < 1e-9);
        let imgs: Vec<ImageTensor> = (0..4).map(|s| rand_img(s, 16, 16, 3)).collect();
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let be = FixedConvBackend::default();
        assert!(fid(&refs, &refs, &be, None).unwrap() <= 1e-6);
        assert!(fid(&refs[..1], &refs, &be, None).is_err());
    }

    #[test]
    fn fid_matches_gaussian_population_value() {
        // Populations N(0, I) and N(m, diag(s²)): FID = |m|² + Σ (1 - s)².
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let shift: Vec<f64> = (0..d).map(|i| 0.5 + 0.1 * i as f64).collect();
        let scale: Vec<f64> = (0..d).map(|i| 1.0 + 0.15 * i as f64).collect();
        let a: Vec<Vec<f64>> = (0..500).map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..d).map(|j| shift[j] + scale[j] * normal.sample(&mut rng)).collect())
            .collect();
        let want: f64 = shift.iter().map(|m| m * m).sum::<f64>() + scale.iter().map(|s| (1.0 - s).powi(2)).sum::<f64>();
        let got = fid_from_embeddings(&a, &b).unwrap();
        assert!(((got - want) / want).abs() < 0.15, "got {got}, want {want}");
        let back = fid_from_embeddings(&b, &a).unwrap();
        assert!((got - back).abs() < 1e-6);
    }

    #[test]
    fn backend_is_deterministic_and_sized() {
        let be = FixedConvBackend::new(3);
        let img = rand_img(1, 24, 24, 3);
        let e = be.embed(&img).unwrap();
        assert_eq!(e.len(), be.dim());
        assert_eq!(e, be.embed(&img).unwrap());
        assert!(be.name().contains("seed3"));
        assert_eq!(be.embed(&rand_img(1, 24, 24, 1)).unwrap().len(), 64);
    }

    fn items(n: usize, with_fg: bool) -> Vec<EvalItem> {
        (0..n)
            .map(|i| EvalItem {
                id: format!("img{i}"),
                gt: rand_img(10 + i as u64, 16, 16, 3),
                pred: rand_img(20 + i as u64, 16, 16, 3),
                fg: with_fg.then(|| BinaryMask::ones(16, 16)),
            })
            .collect()
    }

    #[test]
    fn all_ones_foreground_equals_global() {
        let its = items(3, true);
        let be = FixedConvBackend::default();
        let g = build_report(&its, Scope::Global, &be).unwrap();
        let f = build_report(&its, Scope::Foreground, &be).unwrap();
        assert_eq!(g.per_image, f.per_image);
        assert_eq!(g.aggregate, f.aggregate);
    }

    #[test]
    fn aggregate_is_mean_of_per_image() {
        let its = items(3, false);
        let r = build_report(&its, Scope::Global, &FixedConvBackend::default()).unwrap();
        let oracle: Vec<f64> = its.iter().map(|i| mse(&i.gt, &i.pred, None).unwrap()).collect();
        assert!((r.aggregate.mse - oracle.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!(r.aggregate.fid.is_some());
    }

    #[test]
    fn evaluate_directories_and_write_reports() {
        let dir = tempfile::tempdir().unwrap();
        let (gt, pred, fg) = (dir.path().join("gt"), dir.path().join("pred"), dir.path().join("fg"));
        for d in [&gt, &pred, &fg] {
            std::fs::create_dir_all(d).unwrap();
        }
        for (i, it) in items(3, true).iter().enumerate() {
            it.gt.save_png(&gt.join(format!("{i}.png"))).unwrap();
            it.gt.save_png(&pred.join(format!("{i}.png"))).unwrap();
            it.fg.as_ref().unwrap().save_png(&fg.join(format!("{i}.png"))).unwrap();
        }
        let be = FixedConvBackend::default();
        let (g, f) = evaluate_pairs(&gt, &pred, Some(&fg), &be).unwrap();
        assert_eq!(g.aggregate.mse, 0.0);
        assert!((g.aggregate.ssim - 1.0).abs() < 1e-12);
        assert!(g.aggregate.fid.unwrap() < 1e-6);
        assert_eq!(f.as_ref().unwrap().aggregate, g.aggregate);
        let out = dir.path().join("out");
        write_reports(&out, &g, f.as_ref(), &be).unwrap();
        let csv = std::fs::read_to_string(out.join("report_global.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().contains(",inf,"));
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(json["image_count"], 3);
        assert_eq!(json["reports"][0]["aggregate"]["psnr"], "inf");

        std::fs::remove_file(pred.join("2.png")).unwrap();
        match evaluate_pairs(&gt, &pred, None, &be) {
            Err(Error::Ingestion { id, .. }) => assert_eq!(id, "2"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = rand_img(s1, 12, 12, 1);
            let b = rand_img(s2, 12, 12, 1);
            let ab = ssim(&a, &b, None).unwrap();
            let ba = ssim(&b, &a, None).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab <= 1.0 + 1e-12);
        }

        #[test]
        fn errors_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = rand_img(s1, 8, 8, 3);
            let b = rand_img(s2, 8, 8, 3);
            prop_assert!(mse(&a, &b, None).unwrap() >= 0.0);
            prop_assert!(mae(&a, &b, None).unwrap() >= 0.0);
            prop_assert_eq!(mse(&a, &a, None).unwrap(), 0.0);
        }
    }
}
