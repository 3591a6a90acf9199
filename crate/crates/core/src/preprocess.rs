//! Dataset manifests and ingestion into a normalised on-disk store: square
//! padding, resizing, field-of-view masks and checksums.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{RetinalImage, VesselMask};

pub const STORE_FORMAT: &str = "patho-store/1";
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum DatasetId {
    Idrid,
    RetinalLesions,
    Fgadr,
    Custom(String),
}

impl From<String> for DatasetId {
    fn from(s: String) -> Self {
        match s.as_str() {
            "IDRiD" => Self::Idrid,
            "Retinal-Lesions" => Self::RetinalLesions,
            "FGADR" => Self::Fgadr,
            _ => Self::Custom(s),
        }
    }
}

impl From<DatasetId> for String {
    fn from(d: DatasetId) -> Self {
        d.to_string()
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Idrid => "IDRiD",
            Self::RetinalLesions => "Retinal-Lesions",
            Self::Fgadr => "FGADR",
            Self::Custom(s) => s,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vessel: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<u8>,
    pub split: Split,
}

/// TOML manifest. Relative paths resolve against the manifest's directory.
///
/// ```toml
/// dataset = "IDRiD"
///
/// [[images]]
/// id = "IDRiD_001"
/// image = "images/IDRiD_001.jpg"
/// vessel = "vessels/IDRiD_001.png"
/// grade = 3
/// split = "train"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset: DatasetId,
    #[serde(default)]
    pub images: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        for e in &mut m.images {
            e.image = base.join(&e.image);
            e.vessel = e.vessel.as_ref().map(|v| base.join(v));
        }
        Ok(m)
    }

    /// Parse and validate; every referenced file must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let m = Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Ids are unique (so the splits are disjoint), no source image is listed
    /// twice, grades are 0-4 and every file exists.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut sources = BTreeSet::new();
        for e in &self.images {
            if !ids.insert(&e.id) {
                return Err(Error::Config(format!("manifest lists id `{}` more than once", e.id)));
            }
            if !sources.insert(&e.image) {
                return Err(Error::Config(format!("manifest lists {} more than once", e.image.display())));
            }
            if let Some(g) = e.grade.filter(|g| *g > 4) {
                return Err(Error::Config(format!("grade {g} of `{}` outside 0-4", e.id)));
            }
            for p in std::iter::once(&e.image).chain(e.vessel.as_ref()) {
                if !p.is_file() {
                    return Err(Error::Config(format!("`{}` references missing file {}", e.id, p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Ingest parameters. `target_size` must be a positive multiple of 64 so the
/// generator's six stride-2 blocks divide it. Pixels map to `[0, 1]` by
/// dividing 8-bit values by 255.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    pub target_size: usize,
    /// Luminance threshold in `[0, 1]` for the field of view.
    pub fov_threshold: f64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            target_size: 512,
            fov_threshold: 0.04,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 || self.target_size % 64 != 0 {
            return Err(Error::Config(format!(
                "target size {} must be a positive multiple of 64",
                self.target_size
            )));
        }
        if !(0.0..1.0).contains(&self.fov_threshold) {
            return Err(Error::Config(format!("fov threshold {} outside [0, 1)", self.fov_threshold)));
        }
        Ok(())
    }
}

/// Centre the image on a black square canvas.
pub fn pad_to_square(image: &RetinalImage) -> RetinalImage {
    let (h, w) = image.hw();
    if h == w {
        return image.clone();
    }
    let s = h.max(w);
    let (oy, ox) = ((s - h) / 2, (s - w) / 2);
    let src = image.pixels();
    let px = Array3::from_shape_fn((3, s, s), |(c, y, x)| {
        if y >= oy && y < oy + h && x >= ox && x < ox + w {
            src[[c, y - oy, x - ox]]
        } else {
            0.0
        }
    });
    RetinalImage::new(px).expect("values copied from a valid image")
}

fn pad_mask_to_square(mask: &VesselMask) -> VesselMask {
    let (h, w) = mask.hw();
    let s = h.max(w);
    let (oy, ox) = ((s - h) / 2, (s - w) / 2);
    let d = mask.data();
    VesselMask::new(Array2::from_shape_fn((s, s), |(y, x)| {
        if y >= oy && y < oy + h && x >= ox && x < ox + w {
            d[[y - oy, x - ox]]
        } else {
            0.0
        }
    }))
    .expect("binary values copied")
}

/// Field of view: luminance above `threshold`, keep the largest 8-connected
/// component, fill its holes. An all-dark image gives an empty mask.
pub fn fov_mask(image: &RetinalImage, threshold: f64) -> Array2<bool> {
    let lum = image.luminance();
    let bright = lum.mapv(|v| v > threshold);
    fill_holes(&largest_component(&bright))
}

fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut label = Array2::<usize>::zeros((h, w));
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !mask[[y0, x0]] || label[[y0, x0]] != 0 {
                continue;
            }
            let id = sizes.len();
            sizes.push(0);
            label[[y0, x0]] = id;
            queue.push_back((y0, x0));
            while let Some((y, x)) = queue.pop_front() {
                sizes[id] += 1;
                for (ny, nx) in neighbours(y, x, h, w, true) {
                    if mask[[ny, nx]] && label[[ny, nx]] == 0 {
                        label[[ny, nx]] = id;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    // Ties go to the first component in raster order.
    let best = (1..sizes.len()).fold(0, |b, i| if sizes[i] > sizes[b] { i } else { b });
    label.mapv(|l| best != 0 && l == best)
}

/// Background pixels not 4-connected to the border become foreground.
fn fill_holes(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) && !mask[[y, x]] {
                outside[[y, x]] = true;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        for (ny, nx) in neighbours(y, x, h, w, false) {
            if !mask[[ny, nx]] && !outside[[ny, nx]] {
                outside[[ny, nx]] = true;
                queue.push_back((ny, nx));
            }
        }
    }
    outside.mapv(|o| !o)
}

fn neighbours(y: usize, x: usize, h: usize, w: usize, diagonal: bool) -> impl Iterator<Item = (usize, usize)> {
    (-1isize..=1)
        .flat_map(|dy| (-1isize..=1).map(move |dx| (dy, dx)))
        .filter(move |&(dy, dx)| (dy, dx) != (0, 0) && (diagonal || dy == 0 || dx == 0))
        .filter_map(move |(dy, dx)| {
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            (ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize).then_some((ny as usize, nx as usize))
        })
}

/// Zero every pixel outside the reference field of view.
pub fn crop_to_fov(generated: &RetinalImage, reference_mask: &Array2<bool>) -> Result<RetinalImage> {
    let (h, w) = generated.hw();
    if reference_mask.dim() != (h, w) {
        let (mh, mw) = reference_mask.dim();
        return Err(Error::shape("field-of-view mask", &[h, w], &[mh, mw]));
    }
    let src = generated.pixels();
    let px = Array3::from_shape_fn((3, h, w), |(c, y, x)| if reference_mask[[y, x]] { src[[c, y, x]] } else { 0.0 });
    RetinalImage::new(px)?.with_fov(reference_mask.clone())
}

pub fn mask_to_gray(mask: &Array2<bool>) -> VesselMask {
    VesselMask::new(mask.mapv(|b| b as u8 as f64)).expect("binary")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<u8>,
    /// Digest over the source files and the preprocess spec; unchanged
    /// digests are skipped on re-ingest.
    pub source_sha256: String,
    pub image: String,
    pub fov: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vessel: Option<String>,
    pub image_sha256: String,
    pub fov_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub format: String,
    pub dataset: DatasetId,
    pub spec: PreprocessSpec,
    pub entries: Vec<StoreEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
    pub warnings: Vec<String>,
}

fn source_digest(entry: &ManifestEntry, spec: &PreprocessSpec) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec)?);
    h.update(sha256_file(&entry.image)?.as_bytes());
    if let Some(v) = &entry.vessel {
        h.update(b"vessel");
        h.update(sha256_file(v)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Normalise every manifest image into `out_dir`:
/// `images/<id>.png`, `fov/<id>.png`, `vessels/<id>.png` (if given),
/// `index.json`, and `<split>_labels.csv` for graded entries.
pub fn ingest(manifest: &DatasetManifest, spec: &PreprocessSpec, out_dir: impl AsRef<Path>) -> Result<IngestReport> {
    manifest.validate()?;
    spec.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "fov", "vessels"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let previous: BTreeMap<String, StoreEntry> = match Store::open(out) {
        Ok(store) if store.index.spec == *spec => store.index.entries.into_iter().map(|e| (e.id.clone(), e)).collect(),
        _ => BTreeMap::new(),
    };
    let mut report = IngestReport::default();
    let mut entries = Vec::with_capacity(manifest.images.len());
    for e in &manifest.images {
        let digest = source_digest(e, spec)?;
        if let Some(prev) = previous.get(&e.id) {
            let outputs_exist = [Some(&prev.image), Some(&prev.fov), prev.vessel.as_ref()]
                .into_iter()
                .flatten()
                .all(|p| out.join(p).is_file());
            if prev.source_sha256 == digest && prev.split == e.split && prev.grade == e.grade && outputs_exist {
                report.skipped.push(e.id.clone());
                entries.push(prev.clone());
                continue;
            }
        }
        let s = spec.target_size;
        let image = pad_to_square(&RetinalImage::load(&e.image)?).resized(s, s);
        let fov = fov_mask(&image, spec.fov_threshold);
        let fov_fraction = fov.iter().filter(|b| **b).count() as f64 / fov.len() as f64;
        if fov_fraction == 0.0 {
            let msg = format!("`{}` has an empty field of view", e.id);
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        let image_rel = format!("images/{}.png", e.id);
        let fov_rel = format!("fov/{}.png", e.id);
        image.save_png(out.join(&image_rel))?;
        mask_to_gray(&fov).save_png(out.join(&fov_rel))?;
        let vessel = match &e.vessel {
            Some(v) => {
                let rel = format!("vessels/{}.png", e.id);
                pad_mask_to_square(&VesselMask::load(v)?).resized(s, s).save_png(out.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(StoreEntry {
            id: e.id.clone(),
            split: e.split,
            grade: e.grade,
            source_sha256: digest,
            image_sha256: sha256_file(&out.join(&image_rel))?,
            image: image_rel,
            fov: fov_rel,
            vessel,
            fov_fraction,
        });
        report.written.push(e.id.clone());
    }
    let index = StoreIndex {
        format: STORE_FORMAT.into(),
        dataset: manifest.dataset.clone(),
        spec: *spec,
        entries,
    };
    fs::write(out.join(INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
    for split in [Split::Train, Split::Test] {
        let name = format!("{}_labels.csv", if split == Split::Train { "train" } else { "test" });
        let mut w = csv::Writer::from_path(out.join(name))?;
        w.write_record(["image_id", "grade"])?;
        for e in index.entries.iter().filter(|e| e.split == split) {
            if let Some(g) = e.grade {
                w.write_record([e.id.clone(), g.to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok(report)
}

/// Read access to an ingested store.
#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
    pub index: StoreIndex,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let index: StoreIndex = serde_json::from_str(&fs::read_to_string(root.join(INDEX_FILE))?)?;
        if index.format != STORE_FORMAT {
            return Err(Error::Config(format!("unsupported store format `{}`", index.format)));
        }
        Ok(Self { root, index })
    }

    pub fn entries(&self, split: Option<Split>) -> impl Iterator<Item = &StoreEntry> {
        self.index.entries.iter().filter(move |e| split.is_none_or(|s| e.split == s))
    }

    pub fn entry(&self, id: &str) -> Result<&StoreEntry> {
        self.index
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Invalid(format!("store has no image `{id}`")))
    }

    /// The image with its field of view attached.
    pub fn image(&self, e: &StoreEntry) -> Result<RetinalImage> {
        let fov = VesselMask::load(self.root.join(&e.fov))?.data().mapv(|v| v > 0.5);
        RetinalImage::load(self.root.join(&e.image))?.with_fov(fov)
    }

    pub fn vessel(&self, e: &StoreEntry) -> Result<VesselMask> {
        let rel = e
            .vessel
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("`{}` has no vessel mask; one must accompany every image", e.id)))?;
        VesselMask::load(self.root.join(rel))
    }
}
