//! Pathological descriptors: one bounding box per lesion plus the boxed
//! activation crops at the descriptor taps (A_1 at stride 2, A_2 at stride 4
//! under the default detector).

pub mod io;
pub mod locate;
pub mod manip;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::activation::{project, ActivationNet, ActivationStack};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::imaging::RetinalImage;
use crate::nn::Tensor;

pub use io::DescriptorDocument;
pub use locate::{locate_lesions, locate_lesions_with, otsu_bin, otsu_threshold, LocateParams};
pub use io::{load_descriptors, save_descriptors};
pub use manip::{apply_edits, clone_remove, multiply, relocate, remove_all, sample_subset, EditOp};

/// Box at input (A_0) resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LesionBox {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl LesionBox {
    pub fn new(left: usize, top: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid("lesion box must be at least 1x1".into()));
        }
        Ok(Self {
            left,
            top,
            width,
            height,
        })
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.bottom()).contains(&y) && (self.left..self.right()).contains(&x)
    }

    pub fn fits(&self, size: (usize, usize)) -> bool {
        self.width >= 1 && self.height >= 1 && self.bottom() <= size.0 && self.right() <= size.1
    }

    /// Region at a coarser layer: floor on the origin, ceil on the far edge.
    pub fn scaled(&self, stride: usize) -> Region {
        let (x0, y0) = (self.left / stride, self.top / stride);
        Region {
            left: x0,
            top: y0,
            width: self.right().div_ceil(stride) - x0,
            height: self.bottom().div_ceil(stride) - y0,
        }
    }

    pub fn moved_to(&self, left: usize, top: usize) -> Self {
        Self { left, top, ..*self }
    }
}

impl std::fmt::Display for LesionBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(left {}, top {}, {}x{})", self.left, self.top, self.width, self.height)
    }
}

/// Integer rectangle at some layer's resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathologicalDescriptor {
    pub id: u64,
    pub bbox: LesionBox,
    /// One `[1, C, h, w]` crop per descriptor tap, in tap order.
    pub crops: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub descriptors: Vec<PathologicalDescriptor>,
    /// `(height, width)` of the A_0 grid.
    pub image_size: (usize, usize),
}

impl DescriptorSet {
    pub fn empty(image_size: (usize, usize)) -> Self {
        Self {
            descriptors: Vec::new(),
            image_size,
        }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&PathologicalDescriptor> {
        self.descriptors.iter().find(|d| d.id == id)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.descriptors.iter().map(|d| d.id).collect()
    }

    pub fn next_id(&self) -> u64 {
        self.descriptors.iter().map(|d| d.id + 1).max().unwrap_or(0)
    }

    /// Check id uniqueness and box bounds.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for d in &self.descriptors {
            if !ids.insert(d.id) {
                return Err(Error::Invalid(format!("duplicate descriptor id {}", d.id)));
            }
            if !d.bbox.fits(self.image_size) {
                return Err(Error::OutOfBounds(d.bbox.to_string()));
            }
            if d.crops.iter().any(|c| c.iter().any(|v| *v < 0.0 || !v.is_finite())) {
                return Err(Error::Invalid(format!("descriptor {} has negative or non-finite crops", d.id)));
            }
        }
        Ok(())
    }
}

/// Crop every tap of `stack` inside each box. Boxes whose scaled region
/// leaves a tap grid are clamped; each clamp is reported in the returned
/// warning list.
pub fn extract_descriptors(stack: &ActivationStack, boxes: &[LesionBox]) -> Result<(DescriptorSet, Vec<String>)> {
    let a0 = stack.a0();
    let image_size = (a0.dim().2, a0.dim().3);
    let taps: Vec<(&Tensor, usize)> = (1..=stack.taps.len())
        .map(|k| stack.tap(k).ok_or_else(|| Error::Invalid(format!("activation stack lacks tap A_{k}"))))
        .collect::<Result<_>>()?;
    let mut warnings = Vec::new();
    let mut descriptors = Vec::with_capacity(boxes.len());
    for (id, b) in boxes.iter().enumerate() {
        let mut crops = Vec::with_capacity(taps.len());
        for (k, (map, stride)) in taps.iter().enumerate() {
            let (_, _, mh, mw) = map.dim();
            let r = b.scaled(*stride);
            let (x1, y1) = ((r.left + r.width).min(mw), (r.top + r.height).min(mh));
            if r.left >= mw || r.top >= mh || x1 == r.left || y1 == r.top {
                return Err(Error::OutOfBounds(format!("{b} at tap A_{}", k + 1)));
            }
            if x1 != r.left + r.width || y1 != r.top + r.height {
                warnings.push(format!("descriptor {id}: box {b} clamped at tap A_{}", k + 1));
            }
            crops.push(map.slice(s![.., .., r.top..y1, r.left..x1]).to_owned());
        }
        descriptors.push(PathologicalDescriptor {
            id: id as u64,
            bbox: *b,
            crops,
        });
    }
    Ok((
        DescriptorSet {
            descriptors,
            image_size,
        },
        warnings,
    ))
}

/// Everything one extraction run produces.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub set: DescriptorSet,
    pub stack: ActivationStack,
    pub boxes: Vec<LesionBox>,
    pub warnings: Vec<String>,
}

/// Detector forward pass, projection, localisation and cropping. The image
/// is resized to the detector input first.
pub fn describe_image(
    detector: &Detector,
    net: &ActivationNet,
    image: &RetinalImage,
    params: &LocateParams,
) -> Result<Extraction> {
    let s = detector.config().input_size;
    let features = detector.forward(&image.resized(s, s))?;
    let stack = project(&features, net)?;
    let boxes = locate_lesions_with(&stack.a0_map(), params)?;
    let (set, warnings) = extract_descriptors(&stack, &boxes)?;
    Ok(Extraction {
        set,
        stack,
        boxes,
        warnings,
    })
}

/// Stride `s` with `grid == ceil(image / s)` in both dims, if any.
pub fn tap_stride(image: (usize, usize), grid: (usize, usize)) -> Option<usize> {
    if grid.0 == 0 || grid.1 == 0 {
        return None;
    }
    (1..=image.0.max(image.1)).find(|&s| image.0.div_ceil(s) == grid.0 && image.1.div_ceil(s) == grid.1)
}

/// Rebuild zero-initialised tap maps of `target_shapes` (`(C, H, W)` per tap)
/// by adding each crop at its box's scaled position. Crops that stick out of
/// the grid are clipped; overlapping crops add.
pub fn reconstruct_projections(set: &DescriptorSet, target_shapes: &[(usize, usize, usize)]) -> Result<Vec<Tensor>> {
    let mut maps: Vec<Tensor> = target_shapes.iter().map(|&(c, h, w)| Tensor::zeros((1, c, h, w))).collect();
    let strides: Vec<usize> = target_shapes
        .iter()
        .map(|&(_, h, w)| {
            tap_stride(set.image_size, (h, w))
                .ok_or_else(|| Error::shape("reconstruction target", &[set.image_size.0, set.image_size.1], &[h, w]))
        })
        .collect::<Result<_>>()?;
    for d in &set.descriptors {
        if !d.bbox.fits(set.image_size) {
            return Err(Error::OutOfBounds(d.bbox.to_string()));
        }
        if d.crops.len() != target_shapes.len() {
            return Err(Error::shape(format!("descriptor {} tap count", d.id), &[target_shapes.len()], &[d.crops.len()]));
        }
        for ((map, crop), &stride) in maps.iter_mut().zip(&d.crops).zip(&strides) {
            let (_, c, ch, cw) = crop.dim();
            let (_, mc, mh, mw) = map.dim();
            let max_h = d.bbox.height.div_ceil(stride) + 1;
            let max_w = d.bbox.width.div_ceil(stride) + 1;
            if c != mc || ch == 0 || cw == 0 || ch > max_h || cw > max_w {
                return Err(Error::shape(format!("descriptor {} crop", d.id), &[mc, max_h, max_w], &[c, ch, cw]));
            }
            let (y0, x0) = (d.bbox.top / stride, d.bbox.left / stride);
            let (y1, x1) = ((y0 + ch).min(mh), (x0 + cw).min(mw));
            let mut dst = map.slice_mut(s![.., .., y0..y1, x0..x1]);
            dst += &crop.slice(s![.., .., ..y1 - y0, ..x1 - x0]);
        }
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn stack_with(a1: Tensor, a2: Tensor, size: usize) -> ActivationStack {
        let mut projections = BTreeMap::new();
        projections.insert(0, Tensor::zeros((1, 3, size, size)));
        projections.insert(3, a1);
        projections.insert(6, a2);
        ActivationStack {
            projections,
            taps: vec![(3, 2), (6, 4)],
        }
    }

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_shape_fn((1, c, h, w), |(_, ch, y, x)| (ch * 1000 + y * 37 + x) as f64)
    }

    #[test]
    fn scaled_coordinates() {
        let b = LesionBox::new(64, 32, 16, 16).unwrap();
        assert_eq!(
            b.scaled(2),
            Region {
                left: 32,
                top: 16,
                width: 8,
                height: 8
            }
        );
        // outward rounding on unaligned boxes
        let b = LesionBox::new(3, 5, 4, 2).unwrap();
        assert_eq!(
            b.scaled(2),
            Region {
                left: 1,
                top: 2,
                width: 3,
                height: 2
            }
        );
    }

    #[test]
    fn empty_boxes_give_empty_set() {
        let stack = stack_with(ramp(2, 16, 16), ramp(3, 8, 8), 32);
        let (set, warnings) = extract_descriptors(&stack, &[]).unwrap();
        assert!(set.is_empty() && warnings.is_empty());
        assert_eq!(set.image_size, (32, 32));
        let maps = reconstruct_projections(&set, &[(2, 16, 16), (3, 8, 8)]).unwrap();
        assert!(maps.iter().all(|m| m.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn crop_matches_slice() {
        let a1 = ramp(2, 16, 16);
        let stack = stack_with(a1.clone(), ramp(3, 8, 8), 32);
        let b = LesionBox::new(6, 10, 8, 4).unwrap();
        let (set, _) = extract_descriptors(&stack, &[b]).unwrap();
        let crop = &set.descriptors[0].crops[0];
        assert_eq!(crop.dim(), (1, 2, 2, 4));
        for ((_, c, y, x), v) in crop.indexed_iter() {
            assert_eq!(*v, a1[[0, c, 5 + y, 3 + x]]);
        }
    }

    #[test]
    fn duplicate_descriptors_double() {
        let stack = stack_with(ramp(1, 8, 8), ramp(1, 4, 4), 16);
        let b = LesionBox::new(4, 4, 4, 4).unwrap();
        let (mut set, _) = extract_descriptors(&stack, &[b, b]).unwrap();
        set.descriptors[1].id = 7;
        let maps = reconstruct_projections(&set, &[(1, 8, 8), (1, 4, 4)]).unwrap();
        assert_eq!(maps[0][[0, 0, 2, 3]], 2.0 * stack.projections[&3][[0, 0, 2, 3]]);
    }

    #[test]
    fn clamped_boxes_warn() {
        let stack = stack_with(ramp(1, 8, 8), ramp(1, 4, 4), 15);
        let (_, warnings) = extract_descriptors(&stack, &[LesionBox::new(13, 0, 2, 2).unwrap()]).unwrap();
        assert!(warnings.is_empty());
        let stack = stack_with(ramp(1, 7, 7), ramp(1, 4, 4), 15);
        let (_, warnings) = extract_descriptors(&stack, &[LesionBox::new(13, 0, 2, 2).unwrap()]).unwrap();
        assert!(!warnings.is_empty());
    }

    #[test]
    fn crop_geometry_is_checked() {
        let mut set = DescriptorSet::empty((16, 16));
        set.descriptors.push(PathologicalDescriptor {
            id: 0,
            bbox: LesionBox::new(0, 0, 2, 2).unwrap(),
            crops: vec![Tensor::ones((1, 1, 5, 5))],
        });
        assert!(matches!(reconstruct_projections(&set, &[(1, 8, 8)]), Err(Error::Shape { .. })));
    }
}
