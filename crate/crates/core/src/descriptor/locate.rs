//! Lesion localisation on the input-resolution projection map: Gaussian
//! blur, Otsu threshold, 8-connected components, minimal bounding boxes.

use std::cmp::Ordering;
use std::collections::VecDeque;

use ndarray::Array2;

use super::LesionBox;
use crate::error::{Error, Result};
use crate::imaging::reflect_index;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LocateParams {
    pub sigma: f64,
    /// Kernel radius in units of sigma.
    pub truncate: f64,
    pub bins: usize,
}

impl Default for LocateParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            truncate: 4.0,
            bins: 256,
        }
    }
}

impl LocateParams {
    /// Default blur scaled from the 512-pixel reference to `size`.
    pub fn for_size(size: usize) -> Self {
        Self {
            sigma: 10.0 * size as f64 / 512.0,
            ..Self::default()
        }
    }
}

fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f64> {
    let r = (truncate * sigma).round() as isize;
    let raw: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(map: &Array2<f64>, sigma: f64, truncate: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let k = gaussian_kernel(sigma, truncate);
    let r = (k.len() / 2) as isize;
    let (h, w) = map.dim();
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * map[[y, reflect_index(x as isize + i as isize - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * rows[[reflect_index(y as isize + i as isize - r, h), x]])
            .sum::<f64>()
    })
}

/// Value range and bin mapping used to histogram a map.
#[derive(Debug, Clone, Copy)]
pub struct Binning {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
}

impl Binning {
    pub fn of(values: &[f64], bins: usize) -> Option<Self> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min.is_finite() && max.is_finite() && max > min).then_some(Self { min, max, bins })
    }

    pub fn bin(&self, v: f64) -> usize {
        let t = (v - self.min) / (self.max - self.min) * self.bins as f64;
        (t.floor().max(0.0) as usize).min(self.bins - 1)
    }

    /// Lower edge of bin `k`.
    pub fn edge(&self, k: usize) -> f64 {
        self.min + (self.max - self.min) * k as f64 / self.bins as f64
    }

    pub fn histogram(&self, values: &[f64]) -> Vec<u64> {
        let mut h = vec![0u64; self.bins];
        for &v in values {
            h[self.bin(v)] += 1;
        }
        h
    }
}

/// Between-class variance of splitting at `k` (classes `[0, k)` and
/// `[k, B)`), as the exact fraction `(n1*s0 - n0*s1)^2 / (n0*n1)` scaled by
/// `N^2`. Bin indices are the class values.
fn split_score(n0: u64, s0: u64, n1: u64, s1: u64) -> (u128, u128) {
    let a = n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128;
    let num = a.unsigned_abs().checked_mul(a.unsigned_abs()).unwrap_or(u128::MAX);
    (num, n0 as u128 * n1 as u128)
}

fn score_cmp(a: (u128, u128), b: (u128, u128)) -> Ordering {
    match (a.0.checked_mul(b.1), b.0.checked_mul(a.1)) {
        (Some(l), Some(r)) => l.cmp(&r),
        _ => {
            let (fa, fb) = (a.0 as f64 / a.1 as f64, b.0 as f64 / b.1 as f64);
            fa.partial_cmp(&fb).unwrap_or(Ordering::Equal)
        }
    }
}

/// Otsu split of a histogram: the first bin of the upper class, chosen to
/// maximise the between-class variance; ties go to the lowest bin. `None`
/// when fewer than two bins are occupied.
pub fn otsu_bin(hist: &[u64]) -> Option<usize> {
    let total_n: u64 = hist.iter().sum();
    let total_s: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, (u128, u128))> = None;
    for k in 1..hist.len() {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let score = split_score(n0, s0, n1, total_s - s0);
        if best.is_none_or(|(_, b)| score_cmp(score, b) == Ordering::Greater) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k)
}

/// Otsu threshold over a 256-bin histogram of `values`. Values `>=` the
/// returned threshold form the foreground. `None` for constant input.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    otsu_with_bins(values, 256).map(|(b, k)| b.edge(k))
}

fn otsu_with_bins(values: &[f64], bins: usize) -> Option<(Binning, usize)> {
    let binning = Binning::of(values, bins)?;
    let k = otsu_bin(&binning.histogram(values))?;
    Some((binning, k))
}

/// Label 8-connected components of `mask`; returns one box per component.
pub fn component_boxes(mask: &Array2<bool>) -> Vec<LesionBox> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !mask[[y0, x0]] || seen[[y0, x0]] {
                continue;
            }
            seen[[y0, x0]] = true;
            queue.push_back((y0, x0));
            let (mut top, mut bottom, mut left, mut right) = (y0, y0, x0, x0);
            while let Some((y, x)) = queue.pop_front() {
                top = top.min(y);
                bottom = bottom.max(y);
                left = left.min(x);
                right = right.max(x);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            boxes.push(LesionBox {
                left,
                top,
                width: right - left + 1,
                height: bottom - top + 1,
            });
        }
    }
    boxes.sort_by_key(|b| (b.top, b.left));
    boxes
}

pub fn locate_lesions(a0: &Array2<f64>) -> Result<Vec<LesionBox>> {
    locate_lesions_with(a0, &LocateParams::default())
}

pub fn locate_lesions_with(a0: &Array2<f64>, params: &LocateParams) -> Result<Vec<LesionBox>> {
    if let Some(v) = a0.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Invalid(format!("projection map must be finite and non-negative, found {v}")));
    }
    if !(params.sigma > 0.0 && params.sigma.is_finite() && params.truncate > 0.0 && params.bins >= 2) {
        return Err(Error::Invalid(format!("invalid localisation parameters {params:?}")));
    }
    let blurred = gaussian_blur(a0, params.sigma, params.truncate);
    let values: Vec<f64> = blurred.iter().copied().collect();
    let Some((binning, k)) = otsu_with_bins(&values, params.bins) else {
        return Ok(Vec::new());
    };
    let mask = blurred.mapv(|v| binning.bin(v) >= k);
    Ok(component_boxes(&mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(h: usize, w: usize, cy: f64, cx: f64, s: f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            (-d2 / (2.0 * s * s)).exp()
        })
    }

    #[test]
    fn zero_map_has_no_lesions() {
        assert!(locate_lesions(&Array2::zeros((64, 64))).unwrap().is_empty());
    }

    #[test]
    fn negative_map_is_rejected() {
        let mut m = Array2::zeros((8, 8));
        m[[1, 1]] = -1.0;
        assert!(locate_lesions(&m).is_err());
    }

    #[test]
    fn otsu_two_level() {
        let t = otsu_threshold(&[0.0, 0.0, 0.0, 0.0, 10.0, 10.0]).unwrap();
        assert!(t > 0.0 && t <= 10.0);
        let t = otsu_threshold(&[0.0, 1.0]).unwrap();
        assert!(t > 0.0 && t <= 1.0);
        assert!(otsu_threshold(&[3.0; 5]).is_none());
    }

    #[test]
    fn single_blob_one_box() {
        let m = blob(256, 256, 100.0, 150.0, 6.0);
        let boxes = locate_lesions(&m).unwrap();
        assert_eq!(boxes.len(), 1);
        assert!(boxes[0].contains(100, 150));
        // the blurred peak lies inside the returned box
        let b = gaussian_blur(&m, 10.0, 4.0);
        let (mut py, mut px, mut best) = (0, 0, f64::MIN);
        for ((y, x), &v) in b.indexed_iter() {
            if v > best {
                best = v;
                py = y;
                px = x;
            }
        }
        assert!(boxes[0].contains(py, px));
    }

    #[test]
    fn translation_covariance() {
        let a = locate_lesions(&blob(200, 200, 80.0, 90.0, 5.0)).unwrap();
        let b = locate_lesions(&blob(200, 200, 87.0, 78.0, 5.0)).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].top as isize - a[0].top as isize, 7);
        assert_eq!(b[0].left as isize - a[0].left as isize, -12);
        assert_eq!((a[0].width, a[0].height), (b[0].width, b[0].height));
    }

    #[test]
    fn blur_preserves_interior_mass() {
        let m = blob(160, 160, 80.0, 80.0, 4.0);
        let b = gaussian_blur(&m, 10.0, 4.0);
        assert!((b.sum() - m.sum()).abs() / m.sum() < 1e-3);
    }
}
