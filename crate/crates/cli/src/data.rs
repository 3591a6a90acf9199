//! Loading ingested stores and image folders for the subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use patho_core::activation::ActivationNet;
use patho_core::descriptor::{describe_image, save_descriptors, LocateParams};
use patho_core::detector::{Detector, LabeledImage};
use patho_core::imaging::RetinalImage;
use patho_core::pathogan::GanSample;
use patho_core::preprocess::{Split, Store};

pub fn labeled_images(store: &Store, split: Option<Split>, size: usize) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::new();
    for e in store.entries(split) {
        let Some(grade) = e.grade else { continue };
        out.push(LabeledImage {
            id: e.id.clone(),
            image: store.image(e)?.resized(size, size),
            grade,
        });
    }
    if out.is_empty() {
        bail!("store {} has no graded images in the selected split", store.root.display());
    }
    Ok(out)
}

/// Images with vessel masks, their descriptors extracted by `detector`.
/// Descriptor files are written to `cache` when given.
pub fn gan_samples(
    store: &Store,
    split: Option<Split>,
    detector: &Detector,
    net: &ActivationNet,
    size: usize,
    cache: Option<&Path>,
) -> Result<Vec<GanSample>> {
    if let Some(dir) = cache {
        fs::create_dir_all(dir)?;
    }
    let params = LocateParams::for_size(detector.config().input_size);
    let mut out = Vec::new();
    for e in store.entries(split) {
        if e.vessel.is_none() {
            log::warn!("skipping `{}`: no vessel mask", e.id);
            continue;
        }
        let image = store.image(e)?.resized(size, size);
        let vessel = store.vessel(e)?.resized(size, size);
        let ex = describe_image(detector, net, &image, &params).with_context(|| format!("extracting `{}`", e.id))?;
        for w in &ex.warnings {
            log::warn!("{}: {w}", e.id);
        }
        if let Some(dir) = cache {
            save_descriptors(dir.join(format!("{}.json", e.id)), &ex.set, &e.id)?;
        }
        out.push(GanSample {
            id: e.id.clone(),
            image,
            vessel,
            descriptors: ex.set,
        });
    }
    if out.is_empty() {
        bail!("store {} has no images with vessel masks in the selected split", store.root.display());
    }
    Ok(out)
}

/// PNG/JPEG/TIFF files of a folder keyed by file stem.
pub fn image_dir(dir: &Path) -> Result<BTreeMap<String, RetinalImage>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        if !["png", "jpg", "jpeg", "tif", "tiff"].contains(&ext.as_str()) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.insert(stem, RetinalImage::load(&path).with_context(|| format!("loading {}", path.display()))?);
    }
    if out.len() < 2 {
        bail!("{} holds {} images; at least 2 are needed", dir.display(), out.len());
    }
    Ok(out)
}
