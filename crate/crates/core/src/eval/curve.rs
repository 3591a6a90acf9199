//! Severity as a function of lesion count: remove a fraction of the
//! descriptors or clone them several times, synthesize, and score.

use std::io::Write;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::descriptor::{multiply, reconstruct_projections, sample_subset, DescriptorSet};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::imaging::{RetinalImage, VesselMask};
use crate::pathogan::{Generator, NoiseCode};

/// Lesion-count scales: removal of 100/75/50/25/0 percent, then 2..5 times.
pub const CURVE_SCALES: [f64; 9] = [0.0, 0.25, 0.5, 0.75, 1.0, 2.0, 3.0, 4.0, 5.0];

pub trait Synthesizer {
    fn synthesize(&self, vessel: &VesselMask, set: &DescriptorSet, seed: u64) -> Result<RetinalImage>;
}

pub trait SeverityModel {
    fn severity(&self, image: &RetinalImage) -> Result<f64>;
}

impl Synthesizer for Generator {
    fn synthesize(&self, vessel: &VesselMask, set: &DescriptorSet, seed: u64) -> Result<RetinalImage> {
        self.generate(vessel, set, &NoiseCode::for_seed(self.config().noise_dim, seed))
    }
}

impl SeverityModel for Detector {
    fn severity(&self, image: &RetinalImage) -> Result<f64> {
        Ok(self.predict_severity(image)?.0)
    }
}

/// Paints the reconstructed first-tap activation mass into the red channel
/// as `1 - exp(-gain * mass)`; green carries the vessel mask. Strictly
/// monotone in added mass, so it stands in for a trained generator.
#[derive(Debug, Clone)]
pub struct StubSynthesizer {
    pub tap_shapes: Vec<(usize, usize, usize)>,
    pub gain: f64,
}

impl Synthesizer for StubSynthesizer {
    fn synthesize(&self, vessel: &VesselMask, set: &DescriptorSet, _seed: u64) -> Result<RetinalImage> {
        let (h, w) = vessel.hw();
        let maps = reconstruct_projections(set, &self.tap_shapes)?;
        let mass: Array2<f64> = maps[0].index_axis(Axis(0), 0).sum_axis(Axis(0));
        let (mh, mw) = mass.dim();
        let px = Array3::from_shape_fn((3, h, w), |(c, y, x)| match c {
            0 => 1.0 - (-self.gain * mass[[y * mh / h, x * mw / w]]).exp(),
            1 => vessel.data()[[y, x]],
            _ => 0.0,
        });
        RetinalImage::new(px)
    }
}

/// Normalised activation mass: the mean of the red channel.
#[derive(Debug, Clone, Copy)]
pub struct StubSeverity;

impl SeverityModel for StubSeverity {
    fn severity(&self, image: &RetinalImage) -> Result<f64> {
        Ok(image.pixels().index_axis(Axis(0), 0).mean().unwrap_or(0.0))
    }
}

#[derive(Debug, Clone)]
pub struct CurveItem {
    pub id: String,
    pub vessel: VesselMask,
    pub descriptors: DescriptorSet,
    pub fov: Option<Array2<bool>>,
}

/// Apply one curve scale. For a fixed seed, the sets are nested in scale.
pub fn scale_descriptors(set: &DescriptorSet, scale: f64, seed: u64, fov: Option<&Array2<bool>>) -> Result<DescriptorSet> {
    if (0.0..=1.0).contains(&scale) {
        sample_subset(set, scale, seed)
    } else if scale > 1.0 && scale.fract() == 0.0 {
        multiply(set, scale as usize, seed, fov)
    } else {
        Err(Error::Invalid(format!("lesion scale {scale} must be in [0, 1] or a whole multiplier")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    /// Most extreme values within 1.5 IQR of the quartiles.
    pub whisker_low: f64,
    pub whisker_high: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
    let iqr = q3 - q1;
    let whisker_low = *v.iter().find(|&&x| x >= q1 - 1.5 * iqr).unwrap();
    let whisker_high = *v.iter().rev().find(|&&x| x <= q3 + 1.5 * iqr).unwrap();
    Some(BoxStats {
        q1,
        median,
        q3,
        whisker_low,
        whisker_high,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub id: String,
    pub scale: f64,
    pub descriptors: usize,
    pub severity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub scale: f64,
    pub n: usize,
    pub failures: usize,
    pub stats: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub rows: Vec<CurveRow>,
    pub records: Vec<CurveRecord>,
}

impl CurveReport {
    /// Box-plot table: `scale,n,q1,median,q3,whisker_low,whisker_high,failures`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scale", "n", "q1", "median", "q3", "whisker_low", "whisker_high", "failures"])?;
        for r in &self.rows {
            let s = |f: fn(&BoxStats) -> f64| r.stats.as_ref().map(|b| f(b).to_string()).unwrap_or_default();
            w.write_record([
                r.scale.to_string(),
                r.n.to_string(),
                s(|b| b.q1),
                s(|b| b.median),
                s(|b| b.q3),
                s(|b| b.whisker_low),
                s(|b| b.whisker_high),
                r.failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-image table: `id,scale,descriptors,severity,error`.
    pub fn write_records_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn medians(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.stats.map(|s| s.median)).collect()
    }
}

/// Score every item at every scale. Item `i` uses seed `seed + i` for both
/// descriptor sampling and synthesis, so scales differ only in lesion count.
/// Per-image failures are recorded and the run continues.
pub fn severity_curve(
    items: &[CurveItem],
    scales: &[f64],
    synth: &dyn Synthesizer,
    model: &dyn SeverityModel,
    seed: u64,
) -> Result<CurveReport> {
    if scales.is_empty() {
        return Err(Error::Invalid("severity curve needs at least one scale".into()));
    }
    let mut records = Vec::with_capacity(items.len() * scales.len());
    let mut rows = Vec::with_capacity(scales.len());
    for &scale in scales {
        let mut values = Vec::new();
        let mut failures = 0;
        for (i, item) in items.iter().enumerate() {
            let item_seed = seed.wrapping_add(i as u64);
            let outcome = scale_descriptors(&item.descriptors, scale, item_seed, item.fov.as_ref()).and_then(|set| {
                let image = synth.synthesize(&item.vessel, &set, item_seed)?;
                Ok((set.len(), model.severity(&image)?))
            });
            let record = match outcome {
                Ok((count, s)) => {
                    values.push(s);
                    CurveRecord {
                        id: item.id.clone(),
                        scale,
                        descriptors: count,
                        severity: Some(s),
                        error: None,
                    }
                }
                Err(e) => {
                    failures += 1;
                    log::warn!("severity curve: {} at scale {scale}: {e}", item.id);
                    CurveRecord {
                        id: item.id.clone(),
                        scale,
                        descriptors: 0,
                        severity: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            records.push(record);
        }
        rows.push(CurveRow {
            scale,
            n: values.len(),
            failures,
            stats: box_stats(&values),
        });
    }
    Ok(CurveReport { rows, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{LesionBox, PathologicalDescriptor};
    use crate::nn::Tensor;

    fn item(n: usize, seed: u64) -> CurveItem {
        let descriptors = DescriptorSet {
            descriptors: (0..n)
                .map(|i| PathologicalDescriptor {
                    id: i as u64,
                    bbox: LesionBox::new(8 * (i % 6), 8 * (i / 6), 6, 6).unwrap(),
                    crops: vec![Tensor::from_elem((1, 2, 3, 3), 0.1 + 0.01 * (seed as f64))],
                })
                .collect(),
            image_size: (64, 64),
        };
        CurveItem {
            id: format!("img{seed}"),
            vessel: VesselMask::new(Array2::zeros((64, 64))).unwrap(),
            descriptors,
            fov: None,
        }
    }

    #[test]
    fn quartiles_and_whiskers() {
        let b = box_stats(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 4.0));
        assert!(box_stats(&[]).is_none());
    }

    #[test]
    fn stub_curve_is_monotone_with_nine_rows() {
        let items: Vec<CurveItem> = (0..6).map(|s| item(4 + s as usize, s)).collect();
        let synth = StubSynthesizer {
            tap_shapes: vec![(2, 32, 32)],
            gain: 0.5,
        };
        let report = severity_curve(&items, &CURVE_SCALES, &synth, &StubSeverity, 3).unwrap();
        assert_eq!(report.rows.len(), 9);
        let medians: Vec<f64> = report.medians().into_iter().map(Option::unwrap).collect();
        assert_eq!(medians[0], 0.0);
        assert!(medians.windows(2).all(|w| w[0] <= w[1]), "{medians:?}");
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 10);
    }

    #[test]
    fn failures_are_isolated() {
        let mut items = vec![item(3, 0), item(3, 1)];
        items[1].descriptors.descriptors[0].crops = vec![Tensor::zeros((1, 5, 1, 1))];
        let synth = StubSynthesizer {
            tap_shapes: vec![(2, 32, 32)],
            gain: 0.5,
        };
        let report = severity_curve(&items, &[1.0], &synth, &StubSeverity, 0).unwrap();
        assert_eq!((report.rows[0].n, report.rows[0].failures), (1, 1));
    }

    #[test]
    fn fractional_multiplier_rejected() {
        assert!(scale_descriptors(&item(2, 0).descriptors, 1.5, 0, None).is_err());
    }
}
