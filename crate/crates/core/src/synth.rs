//! Seeded synthetic face-like images for demos and tests.
//!
//! Each image is a smooth background with an elliptical "face" (skin), a
//! darker cap of "hair" and a few facial blobs. The foreground mask is the
//! union of skin and hair, mirroring what attribute maps give for real data.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{ForegroundMask, ImageTensor, ValueRange};
use crate::masks::{generate_freeform_mask, StrokeConfig};

/// One synthetic face and its foreground mask, `size`×`size`, unit range.
pub fn synthetic_face(seed: u64, size: usize) -> Result<(ImageTensor, ForegroundMask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let bg0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let bg1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let skin = [rng.random_range(0.55..0.95), rng.random_range(0.4..0.75), rng.random_range(0.3..0.6)];
    let hair: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02..0.4));
    let (cx, cy) = (s * rng.random_range(0.42..0.58), s * rng.random_range(0.48..0.6));
    let (rx, ry) = (s * rng.random_range(0.22..0.3), s * rng.random_range(0.28..0.36));
    let eye_dx = rx * 0.45;
    let eye_y = cy - ry * 0.2;
    let mouth_y = cy + ry * 0.45;

    let mut data = Array3::zeros((size, size, 3));
    let mut fg = Array2::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (px + py) / (2.0 * s);
            let mut c: [f64; 3] = std::array::from_fn(|k| bg0[k] * (1.0 - t) + bg1[k] * t);
            let face = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
            let head = ((px - cx) / (rx * 1.18)).powi(2) + ((py - cy + ry * 0.12) / (ry * 1.12)).powi(2);
            if head <= 1.0 && (face > 1.0 || py < cy - ry * 0.55) {
                c = hair;
                fg[[y, x]] = 1.0;
            } else if face <= 1.0 {
                let shade = 1.0 - 0.25 * face;
                c = std::array::from_fn(|k| skin[k] * shade);
                fg[[y, x]] = 1.0;
                let eye = |ex: f64| ((px - ex) / (rx * 0.14)).powi(2) + ((py - eye_y) / (ry * 0.08)).powi(2) <= 1.0;
                if eye(cx - eye_dx) || eye(cx + eye_dx) {
                    c = [0.1, 0.08, 0.08];
                }
                if ((px - cx) / (rx * 0.35)).powi(2) + ((py - mouth_y) / (ry * 0.06)).powi(2) <= 1.0 {
                    c = [0.6, 0.2, 0.2];
                }
            }
            for k in 0..3 {
                data[[y, x, k]] = c[k];
            }
        }
    }
    Ok((ImageTensor::new_clamped(data, ValueRange::Unit)?, ForegroundMask::new(fg)?))
}

/// Writes `n` synthetic faces plus `n` free-form holes in the dataset layout
/// `images/`, `foreground/`, `holes/`.
pub fn write_synthetic_dataset(root: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    for sub in ["images", "foreground", "holes"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let cfg = StrokeConfig::for_size(size, size);
    for i in 0..n {
        let (img, fg) = synthetic_face(seed.wrapping_add(i as u64), size)?;
        let id = format!("face_{i:04}");
        img.save_png(&root.join("images").join(format!("{id}.png")))?;
        fg.save_png(&root.join("foreground").join(format!("{id}.png")))?;
        let hole = generate_freeform_mask(seed.wrapping_mul(31).wrapping_add(i as u64), (size, size), &cfg)?;
        hole.save_png(&root.join("holes").join(format!("hole_{i:04}.png")))?;
    }
    Ok(())
}
