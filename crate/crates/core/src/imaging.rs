//! Retinal images, vessel masks and the pixel-level helpers around them.
//!
//! Images are stored channel-first (`[3, H, W]`) with values in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{imageops::FilterType, DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RetinalImage {
    pixels: Array3<f64>,
    pub fov: Option<Array2<bool>>,
}

impl RetinalImage {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.dim().0 != 3 {
            return Err(Error::shape("retinal image channels", &[3], &[pixels.dim().0]));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels, fov: None })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array3::zeros((3, height, width)),
            fov: None,
        }
    }

    pub fn with_fov(mut self, fov: Array2<bool>) -> Result<Self> {
        if fov.dim() != self.hw() {
            return Err(Error::shape("field-of-view mask", &[self.height(), self.width()], fov.shape()));
        }
        self.fov = Some(fov);
        Ok(self)
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// `[1, 3, H, W]` tensor of the raw `[0, 1]` values.
    pub fn to_tensor(&self) -> Tensor {
        self.pixels.clone().insert_axis(Axis(0))
    }

    /// Builds an image from a `[1, 3, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, _, _) = t.dim();
        if n != 1 || c != 3 {
            return Err(Error::shape("image tensor", &[1, 3], &[n, c]));
        }
        if !crate::nn::kernels::all_finite(t) {
            return Err(Error::NonFinite {
                layer: "image output".into(),
            });
        }
        Ok(Self {
            pixels: t.index_axis(Axis(0), 0).mapv(|v| v.clamp(0.0, 1.0)),
            fov: None,
        })
    }

    pub fn luminance(&self) -> Array2<f64> {
        let p = &self.pixels;
        Array2::from_shape_fn(self.hw(), |(i, j)| 0.299 * p[[0, i, j]] + 0.587 * p[[1, i, j]] + 0.114 * p[[2, i, j]])
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self { pixels, fov: None }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.hw();
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let q = |c: usize| (self.pixels[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([q(0), q(1), q(2)])
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_dynamic(&image::open(path)?))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_dynamic(&image::load_from_memory(bytes)?))
    }

    /// Resample to `height x width` (triangle filter). The field of view, if
    /// present, is resampled by nearest neighbour.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if self.hw() == (height, width) {
            return self.clone();
        }
        let planes: Vec<Array2<f64>> = (0..3)
            .map(|c| resize_plane(self.pixels.index_axis(Axis(0), c), height, width, FilterType::Triangle))
            .collect();
        let pixels = Array3::from_shape_fn((3, height, width), |(c, y, x)| planes[c][[y, x]].clamp(0.0, 1.0));
        let fov = self.fov.as_ref().map(|f| {
            let as_f = f.mapv(|b| b as u8 as f64);
            resize_plane(as_f.view(), height, width, FilterType::Nearest).mapv(|v| v > 0.5)
        });
        Self { pixels, fov }
    }
}

/// Binary vessel segmentation, values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselMask {
    data: Array2<f64>,
}

impl VesselMask {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("vessel mask must be binary".into()));
        }
        Ok(Self { data })
    }

    /// Threshold an arbitrary map at 0.5.
    pub fn from_soft(map: &Array2<f64>) -> Self {
        Self {
            data: map.mapv(|v| (v >= 0.5) as u8 as f64),
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn hw(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// `[1, 1, H, W]` tensor in `{0, 1}`.
    pub fn to_tensor(&self) -> Tensor {
        self.data.clone().insert_axis(Axis(0)).insert_axis(Axis(0))
    }

    /// PNG values above 127 map to 1, everything else to 0.
    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        Self {
            data: Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                (g.get_pixel(x as u32, y as u32)[0] > 127) as u8 as f64
            }),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_dynamic(&image::open(path)?))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_dynamic(&image::load_from_memory(bytes)?))
    }

    pub fn to_gray8(&self) -> GrayImage {
        let (h, w) = self.hw();
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([(self.data[[y as usize, x as usize]] * 255.0) as u8]))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn resized(&self, height: usize, width: usize) -> Self {
        if self.hw() == (height, width) {
            return self.clone();
        }
        Self::from_soft(&resize_plane(self.data.view(), height, width, FilterType::Triangle))
    }
}

pub fn resize_plane(plane: ArrayView2<f64>, height: usize, width: usize, filter: FilterType) -> Array2<f64> {
    let (h, w) = plane.dim();
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([plane[[y as usize, x as usize]] as f32]));
    let out = image::imageops::resize(&buf, width as u32, height as u32, filter);
    Array2::from_shape_fn((height, width), |(y, x)| out.get_pixel(x as u32, y as u32)[0] as f64)
}

/// Reflect an out-of-range index back into `0..n` (mirror including the
/// edge sample: `d c b a | a b c d | d c b a`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
}

/// Rotate a plane by `degrees` (counter-clockwise) about its centre with
/// reflective fill outside the source.
pub fn rotate_plane(plane: ArrayView2<f64>, degrees: f64, interp: Interp) -> Array2<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    warp_plane(plane, [c, -s, s, c], interp)
}

/// Resample `plane` through a centred linear map. `inverse` is the row-major
/// 2x2 matrix taking a destination offset `(dx, dy)` to a source offset;
/// samples outside the source are reflected back inside.
pub fn warp_plane(plane: ArrayView2<f64>, inverse: [f64; 4], interp: Interp) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let sample = |y: isize, x: isize| plane[[reflect_index(y, h), reflect_index(x, w)]];
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sx = inverse[0] * dx + inverse[1] * dy + cx;
        let sy = inverse[2] * dx + inverse[3] * dy + cy;
        match interp {
            Interp::Nearest => sample(sy.round() as isize, sx.round() as isize),
            Interp::Bilinear => {
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                sample(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + sample(y0, x0 + 1) * (1.0 - fy) * fx
                    + sample(y0 + 1, x0) * fy * (1.0 - fx)
                    + sample(y0 + 1, x0 + 1) * fy * fx
            }
        }
    })
}

/// Rotate every `[c, :, :]` plane of a `[1, C, H, W]` tensor.
pub fn rotate_tensor(t: &Tensor, degrees: f64, interp: Interp) -> Tensor {
    let mut out = t.clone();
    for c in 0..t.dim().1 {
        let r = rotate_plane(t.slice(ndarray::s![0, c, .., ..]), degrees, interp);
        out.slice_mut(ndarray::s![0, c, .., ..]).assign(&r);
    }
    out
}

/// Heat-map PNG of a non-negative scalar map, normalised by its maximum.
pub fn heatmap_png(map: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let max = map.iter().cloned().fold(0.0_f64, f64::max);
    let (h, w) = map.dim();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = if max > 0.0 { map[[y as usize, x as usize]] / max } else { 0.0 };
        // black -> red -> yellow -> white
        let r = (3.0 * v).min(1.0);
        let g = (3.0 * v - 1.0).clamp(0.0, 1.0);
        let b = (3.0 * v - 2.0).clamp(0.0, 1.0);
        Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
    });
    img.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}
