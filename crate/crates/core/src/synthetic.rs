//! Procedural fundus-like fixtures: a circular field of view, a branching
//! vessel tree, an optic disc and grade-dependent lesions. Used by tests,
//! the smoke GAN run and the examples; not a substitute for real data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::descriptor::LesionBox;
use crate::error::Result;
use crate::imaging::{RetinalImage, VesselMask};

#[derive(Debug, Clone)]
pub struct SyntheticFundus {
    pub id: String,
    pub image: RetinalImage,
    pub vessel: VesselMask,
    pub grade: u8,
    pub lesions: Vec<LesionBox>,
}

fn stamp_disc(plane: &mut Array2<f64>, cy: f64, cx: f64, r: f64, value: f64) {
    let (h, w) = plane.dim();
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h.saturating_sub(1));
    let x1 = ((cx + r).ceil() as usize).min(w.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                plane[[y, x]] = plane[[y, x]].max(value);
            }
        }
    }
}

fn grow_vessel(rng: &mut ChaCha8Rng, mask: &mut Array2<f64>, start: (f64, f64), heading: f64, width: f64, len: f64, depth: u32) {
    let (mut y, mut x) = start;
    let mut a = heading;
    let step = 1.0_f64;
    let n = len as usize;
    for i in 0..n {
        a += rng.random_range(-0.12..0.12);
        y += step * a.sin();
        x += step * a.cos();
        stamp_disc(mask, y, x, width / 2.0, 1.0);
        if depth > 0 && i == n / 2 {
            let turn = if rng.random_bool(0.5) { 0.6 } else { -0.6 };
            grow_vessel(rng, mask, (y, x), a + turn, (width * 0.7).max(1.0), len * 0.6, depth - 1);
        }
    }
}

/// A `size x size` fixture. Lesion count grows with `grade` (0-4).
pub fn synthetic_fundus(id: &str, size: usize, grade: u8, seed: u64) -> SyntheticFundus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (cy, cx, radius) = (s / 2.0, s / 2.0, 0.46 * s);
    let inside = |y: f64, x: f64| (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius;

    let disc = (cy + rng.random_range(-0.05..0.05) * s, cx + rng.random_range(0.18..0.24) * s);
    let mut vessel = Array2::zeros((size, size));
    let base_width = (s / 64.0).max(1.0);
    for k in 0..4 {
        let heading = std::f64::consts::FRAC_PI_2 * k as f64 + std::f64::consts::FRAC_PI_4 + rng.random_range(-0.3..0.3);
        grow_vessel(&mut rng, &mut vessel, disc, heading, base_width, 0.55 * s, 2);
    }
    let fov = Array2::from_shape_fn((size, size), |(y, x)| inside(y as f64 + 0.5, x as f64 + 0.5));
    vessel.zip_mut_with(&fov, |v, &f| *v = if f { *v } else { 0.0 });

    let mut lesion_map = Array2::<f64>::zeros((size, size));
    let mut exudate_map = Array2::<f64>::zeros((size, size));
    let mut lesions = Vec::new();
    let count = if grade == 0 { 0 } else { 2 * grade as usize + rng.random_range(0..2) };
    while lesions.len() < count {
        let (ly, lx) = (rng.random_range(0.15..0.85) * s, rng.random_range(0.15..0.85) * s);
        if !inside(ly, lx) {
            continue;
        }
        let r = rng.random_range(0.01..0.03) * s + 0.5;
        let exudate = lesions.len() % 3 == 2;
        stamp_disc(if exudate { &mut exudate_map } else { &mut lesion_map }, ly, lx, r, 1.0);
        let left = (lx - r).floor().max(0.0) as usize;
        let top = (ly - r).floor().max(0.0) as usize;
        let right = ((lx + r).ceil() as usize).min(size - 1);
        let bottom = ((ly + r).ceil() as usize).min(size - 1);
        lesions.push(LesionBox {
            left,
            top,
            width: right - left + 1,
            height: bottom - top + 1,
        });
    }

    let tint: [f64; 3] = [rng.random_range(0.72..0.85), rng.random_range(0.32..0.42), rng.random_range(0.1..0.16)];
    let pixels = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        if !fov[[y, x]] {
            return 0.0;
        }
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let rr = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt() / radius;
        let mut v = tint[c] * (1.0 - 0.35 * rr * rr);
        let dd = ((fy - disc.0).powi(2) + (fx - disc.1).powi(2)).sqrt() / (0.07 * s);
        v += (1.0 - dd).max(0.0) * [0.2, 0.45, 0.35][c];
        v *= 1.0 - 0.45 * vessel[[y, x]];
        v = v * (1.0 - 0.6 * lesion_map[[y, x]]) + lesion_map[[y, x]] * [0.25, 0.02, 0.02][c];
        v = v * (1.0 - exudate_map[[y, x]]) + exudate_map[[y, x]] * [0.95, 0.85, 0.35][c];
        v.clamp(0.0, 1.0)
    });
    let image = RetinalImage::new(pixels)
        .and_then(|i| i.with_fov(fov))
        .expect("fixture pixels are in range");
    SyntheticFundus {
        id: id.into(),
        image,
        vessel: VesselMask::new(vessel).expect("binary"),
        grade,
        lesions,
    }
}

/// `n` fixtures with grades cycling 0-4.
pub fn synthetic_set(n: usize, size: usize, seed: u64) -> Vec<SyntheticFundus> {
    (0..n)
        .map(|i| synthetic_fundus(&format!("syn{i:03}"), size, (i % 5) as u8, seed.wrapping_add(i as u64)))
        .collect()
}

/// Write fixtures as `images/`, `vessels/` and a `manifest.toml` (every
/// fifth image in the test split). Returns the manifest path.
pub fn write_synthetic_dataset(dir: impl AsRef<Path>, n: usize, size: usize, seed: u64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("vessels"))?;
    let mut manifest = String::from("dataset = \"synthetic\"\n");
    for (i, f) in synthetic_set(n, size, seed).iter().enumerate() {
        f.image.save_png(dir.join(format!("images/{}.png", f.id)))?;
        f.vessel.save_png(dir.join(format!("vessels/{}.png", f.id)))?;
        let split = if i % 5 == 4 { "test" } else { "train" };
        let _ = write!(
            manifest,
            "\n[[images]]\nid = \"{id}\"\nimage = \"images/{id}.png\"\nvessel = \"vessels/{id}.png\"\ngrade = {g}\nsplit = \"{split}\"\n",
            id = f.id,
            g = f.grade
        );
    }
    let path = dir.join("manifest.toml");
    fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{fov_mask, DatasetManifest};

    #[test]
    fn deterministic_and_graded() {
        let a = synthetic_fundus("a", 64, 3, 9);
        let b = synthetic_fundus("a", 64, 3, 9);
        assert_eq!(a.image, b.image);
        assert!(a.lesions.len() >= 6);
        assert!(synthetic_fundus("z", 64, 0, 9).lesions.is_empty());
        assert!(a.vessel.data().sum() > 50.0);
    }

    #[test]
    fn fov_detects_fixture_disc() {
        let f = synthetic_fundus("a", 64, 1, 2);
        let m = fov_mask(&f.image, 0.04);
        let truth = f.image.fov.as_ref().unwrap();
        let agree = m.iter().zip(truth.iter()).filter(|(a, b)| a == b).count();
        assert!(agree as f64 / m.len() as f64 > 0.97);
    }

    #[test]
    fn dataset_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_synthetic_dataset(dir.path(), 5, 64, 0).unwrap();
        let m = DatasetManifest::load(path).unwrap();
        assert_eq!(m.images.len(), 5);
        assert_eq!(m.images[4].split, crate::preprocess::Split::Test);
    }
}
