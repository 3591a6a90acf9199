//! Descriptor-set manipulations. All of them return a new set and touch only
//! geometry or cardinality, never crop contents.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DescriptorSet, LesionBox};
use crate::error::{Error, Result};

/// Rejection-sampling attempts per clone before `multiply` gives up.
pub const PLACEMENT_RETRIES: usize = 1000;

/// Minimum fraction of a cloned box that must fall inside the field of view.
pub const FOV_COVERAGE: f64 = 0.9;

pub fn relocate(set: &DescriptorSet, id: u64, new_left: usize, new_top: usize) -> Result<DescriptorSet> {
    let mut out = set.clone();
    let d = out
        .descriptors
        .iter_mut()
        .find(|d| d.id == id)
        .ok_or(Error::UnknownDescriptor(id))?;
    let moved = d.bbox.moved_to(new_left, new_top);
    if !moved.fits(set.image_size) {
        return Err(Error::OutOfBounds(moved.to_string()));
    }
    d.bbox = moved;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum EditOp {
    Move { id: u64, left: usize, top: usize },
    Clone { id: u64, left: usize, top: usize },
    Remove { id: u64 },
    RemoveAll,
}

/// Apply clone/remove edits in order. Clones get fresh ids.
pub fn clone_remove(set: &DescriptorSet, ops: &[EditOp]) -> Result<DescriptorSet> {
    apply_edits(set, ops)
}

/// Apply any sequence of edits in order; the first failing edit aborts.
pub fn apply_edits(set: &DescriptorSet, ops: &[EditOp]) -> Result<DescriptorSet> {
    let mut out = set.clone();
    for op in ops {
        match *op {
            EditOp::Move { id, left, top } => out = relocate(&out, id, left, top)?,
            EditOp::RemoveAll => out = remove_all(&out),
            EditOp::Remove { id } => {
                let pos = out.descriptors.iter().position(|d| d.id == id).ok_or(Error::UnknownDescriptor(id))?;
                out.descriptors.remove(pos);
            }
            EditOp::Clone { id, left, top } => {
                let src = out.get(id).ok_or(Error::UnknownDescriptor(id))?;
                let moved = src.bbox.moved_to(left, top);
                if !moved.fits(out.image_size) {
                    return Err(Error::OutOfBounds(moved.to_string()));
                }
                let mut copy = src.clone();
                copy.id = out.next_id();
                copy.bbox = moved;
                out.descriptors.push(copy);
            }
        }
    }
    Ok(out)
}

pub fn remove_all(set: &DescriptorSet) -> DescriptorSet {
    DescriptorSet::empty(set.image_size)
}

/// Keep `round(keep_fraction * n)` descriptors chosen uniformly at random.
/// The choice is the prefix of one seeded permutation, so for a fixed seed
/// smaller fractions keep subsets of larger ones. Original order is kept.
pub fn sample_subset(set: &DescriptorSet, keep_fraction: f64, seed: u64) -> Result<DescriptorSet> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::Invalid(format!("keep fraction {keep_fraction} outside [0, 1]")));
    }
    let n = set.len();
    let keep = (keep_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = order[..keep].to_vec();
    chosen.sort_unstable();
    Ok(DescriptorSet {
        descriptors: chosen.into_iter().map(|i| set.descriptors[i].clone()).collect(),
        image_size: set.image_size,
    })
}

fn coverage(b: &LesionBox, fov: &Array2<bool>) -> f64 {
    let inside = (b.top..b.bottom())
        .flat_map(|y| (b.left..b.right()).map(move |x| (y, x)))
        .filter(|&(y, x)| fov[[y, x]])
        .count();
    inside as f64 / (b.width * b.height) as f64
}

/// Clone every descriptor `factor - 1` times at random positions. With a
/// field-of-view mask, a placement is accepted only when at least 90% of the
/// box lies inside it. Clone rounds are drawn in order, so for a fixed seed
/// the clones of a smaller factor are a prefix of a larger one's.
pub fn multiply(set: &DescriptorSet, factor: usize, seed: u64, fov: Option<&Array2<bool>>) -> Result<DescriptorSet> {
    if factor == 0 {
        return Err(Error::Invalid("multiply factor must be at least 1".into()));
    }
    if let Some(f) = fov {
        if f.dim() != set.image_size {
            return Err(Error::shape("field-of-view mask", &[set.image_size.0, set.image_size.1], f.shape()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = set.clone();
    let (h, w) = set.image_size;
    for _round in 1..factor {
        for src in &set.descriptors {
            let b = src.bbox;
            if b.width > w || b.height > h {
                return Err(Error::OutOfBounds(b.to_string()));
            }
            let placed = (0..PLACEMENT_RETRIES).find_map(|_| {
                let cand = b.moved_to(rng.random_range(0..=w - b.width), rng.random_range(0..=h - b.height));
                fov.is_none_or(|f| coverage(&cand, f) >= FOV_COVERAGE).then_some(cand)
            });
            let Some(bbox) = placed else {
                return Err(Error::Invalid(format!(
                    "could not place a clone of descriptor {} inside the field of view after {PLACEMENT_RETRIES} attempts",
                    src.id
                )));
            };
            let mut copy = src.clone();
            copy.id = out.next_id();
            copy.bbox = bbox;
            out.descriptors.push(copy);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{reconstruct_projections, PathologicalDescriptor};
    use crate::nn::Tensor;
    use proptest::prelude::*;

    fn fixture(n: usize) -> DescriptorSet {
        DescriptorSet {
            descriptors: (0..n)
                .map(|i| PathologicalDescriptor {
                    id: i as u64,
                    bbox: LesionBox::new(4 * i, 20, 4, 4).unwrap(),
                    crops: vec![Tensor::from_elem((1, 1, 2, 2), i as f64 + 1.0)],
                })
                .collect(),
            image_size: (64, 64),
        }
    }

    #[test]
    fn relocate_moves_only_target() {
        let mut set = fixture(3);
        set.descriptors[1].bbox = LesionBox::new(10, 20, 4, 4).unwrap();
        let moved = relocate(&set, 1, 15, 15).unwrap();
        assert_eq!((moved.descriptors[1].bbox.left, moved.descriptors[1].bbox.top), (15, 15));
        assert_eq!(moved.descriptors[0], set.descriptors[0]);
        assert_eq!(moved.descriptors[1].crops, set.descriptors[1].crops);
        assert_eq!(relocate(&moved, 1, 10, 20).unwrap(), set);
        assert!(matches!(relocate(&set, 9, 0, 0), Err(Error::UnknownDescriptor(9))));
        assert!(matches!(relocate(&set, 0, 62, 0), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn clone_and_remove_cardinality() {
        let set = fixture(3);
        let all: Vec<EditOp> = set.ids().into_iter().map(|id| EditOp::Remove { id }).collect();
        assert!(clone_remove(&set, &all).unwrap().is_empty());
        let clones: Vec<EditOp> = set.ids().into_iter().map(|id| EditOp::Clone { id, left: 40, top: 40 }).collect();
        let doubled = clone_remove(&set, &clones).unwrap();
        assert_eq!(doubled.len(), 6);
        doubled.validate().unwrap();
        let swapped = clone_remove(&set, &[EditOp::Remove { id: 0 }, EditOp::Clone { id: 1, left: 0, top: 0 }]).unwrap();
        assert_eq!(swapped.len(), 3);
        assert!(matches!(clone_remove(&set, &[EditOp::Remove { id: 11 }]), Err(Error::UnknownDescriptor(11))));
    }

    #[test]
    fn subset_fractions() {
        let set = fixture(4);
        assert!(sample_subset(&set, 0.0, 1).unwrap().is_empty());
        assert_eq!(sample_subset(&set, 1.0, 1).unwrap(), set);
        let half = sample_subset(&set, 0.5, 42).unwrap();
        assert_eq!(half.len(), 2);
        assert_eq!(half, sample_subset(&set, 0.5, 42).unwrap());
        assert!(sample_subset(&set, 1.5, 0).is_err());
    }

    #[test]
    fn multiply_counts_and_fov() {
        let set = fixture(3);
        assert_eq!(multiply(&set, 1, 0, None).unwrap(), set);
        let fov = Array2::from_shape_fn((64, 64), |(y, x)| {
            let (dy, dx) = (y as f64 - 31.5, x as f64 - 31.5);
            dy * dy + dx * dx < 28.0 * 28.0
        });
        let tripled = multiply(&set, 3, 9, Some(&fov)).unwrap();
        assert_eq!(tripled.len(), 9);
        tripled.validate().unwrap();
        for d in &tripled.descriptors[3..] {
            let inside = (d.bbox.top..d.bbox.bottom())
                .flat_map(|y| (d.bbox.left..d.bbox.right()).map(move |x| (y, x)))
                .filter(|p| fov[*p])
                .count();
            assert!(inside * 10 >= 9 * d.bbox.width * d.bbox.height);
        }
        let tiny = Array2::from_elem((64, 64), false);
        assert!(multiply(&set, 2, 0, Some(&tiny)).is_err());
    }

    proptest! {
        #[test]
        fn relocation_translates_reconstruction(dx in 0usize..10, dy in 0usize..10, left in 0usize..10, top in 0usize..10) {
            let mut set = DescriptorSet::empty((64, 64));
            set.descriptors.push(PathologicalDescriptor {
                id: 0,
                bbox: LesionBox::new(2 * left, 2 * top, 8, 6).unwrap(),
                crops: vec![Tensor::from_shape_fn((1, 1, 3, 4), |(_, _, y, x)| (y * 4 + x + 1) as f64)],
            });
            let before = reconstruct_projections(&set, &[(1, 32, 32)]).unwrap();
            let moved = relocate(&set, 0, 2 * (left + dx), 2 * (top + dy)).unwrap();
            let after = reconstruct_projections(&moved, &[(1, 32, 32)]).unwrap();
            for ((_, _, y, x), v) in before[0].indexed_iter().filter(|(_, v)| **v != 0.0) {
                prop_assert_eq!(*v, after[0][[0, 0, y + dy, x + dx]]);
            }
            prop_assert_eq!(before[0].sum(), after[0].sum());
        }

        #[test]
        fn manipulations_never_touch_crops(seed in 0u64..1000, frac in 0.0f64..=1.0, factor in 1usize..4) {
            let set = fixture(5);
            for out in [sample_subset(&set, frac, seed).unwrap(), multiply(&set, factor, seed, None).unwrap()] {
                for d in &out.descriptors {
                    let original = set.descriptors.iter().find(|o| o.crops == d.crops);
                    prop_assert!(original.is_some());
                }
            }
        }
    }
}
