//! Perceptual-weight sweep: one desk-scale model per `w_p`, a gallery with
//! one column per weight, and the loss logs of every run.

use std::io::Write;
use std::path::Path;

use image::{imageops, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::imaging::RetinalImage;
use crate::pathogan::{
    Discriminator, DiscriminatorConfig, FrozenNets, GanSample, GanSchedule, GanTrainer, Generator, GeneratorConfig,
    LossRecord, NoiseCode,
};

pub struct AblationSetup<'a> {
    pub dataset: &'a [GanSample],
    /// Rendered after training; one gallery row each.
    pub preview: &'a [GanSample],
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub frozen: FrozenNets<'a>,
    /// `weights.percept` is overridden per run.
    pub schedule: GanSchedule,
    /// Initialisation seed shared by every run.
    pub model_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub weight: f64,
    pub label: String,
    pub log: Vec<LossRecord>,
    pub final_record: Option<LossRecord>,
    /// One per preview sample; empty when the run failed before training.
    pub images: Vec<RetinalImage>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub tile: usize,
}

pub fn ablation_label(weight: f64) -> String {
    if weight == 0.0 {
        "w_p=0 (no perceptual loss)".into()
    } else {
        format!("w_p={weight}")
    }
}

/// Train one model per perceptual weight. A failing run is recorded and the
/// sweep moves on; a diverged run still renders its last good state.
pub fn ablation_percept(setup: &AblationSetup<'_>, weights: &[f64]) -> Result<AblationReport> {
    if weights.is_empty() {
        return Err(Error::Invalid("ablation needs at least one weight".into()));
    }
    let runs = weights.iter().map(|&w| run_one(setup, w)).collect();
    Ok(AblationReport {
        runs,
        tile: setup.generator.image_size,
    })
}

fn run_one(setup: &AblationSetup<'_>, weight: f64) -> AblationRun {
    let mut run = AblationRun {
        weight,
        label: ablation_label(weight),
        log: Vec::new(),
        final_record: None,
        images: Vec::new(),
        error: None,
    };
    let mut schedule = setup.schedule.clone();
    schedule.weights.percept = weight;
    let built = Generator::new(setup.generator.clone(), setup.model_seed).and_then(|g| {
        let d = Discriminator::new(setup.discriminator.clone(), setup.model_seed.wrapping_add(1))?;
        GanTrainer::new(g, d, setup.frozen, setup.dataset, schedule)
    });
    let mut trainer = match built {
        Ok(t) => t,
        Err(e) => {
            log::warn!("ablation {}: {e}", run.label);
            run.error = Some(e.to_string());
            return run;
        }
    };
    if let Err(e) = trainer.run(|_, _| Ok(())) {
        log::warn!("ablation {}: {e}", run.label);
        run.error = Some(e.to_string());
    }
    let (generator, _, log) = trainer.into_models();
    run.final_record = log.last().cloned();
    run.log = log;
    let noise_dim = generator.config().noise_dim;
    let rendered: Result<Vec<RetinalImage>> = setup
        .preview
        .iter()
        .enumerate()
        .map(|(i, s)| generator.generate(&s.vessel, &s.descriptors, &NoiseCode::for_seed(noise_dim, i as u64)))
        .collect();
    match rendered {
        Ok(images) => run.images = images,
        Err(e) => {
            run.error.get_or_insert_with(|| e.to_string());
        }
    }
    run
}

impl AblationReport {
    pub fn columns(&self) -> usize {
        self.runs.len()
    }

    /// Columns are runs in weight order, rows are preview samples. Missing
    /// images are left mid-grey.
    pub fn gallery(&self) -> RgbImage {
        let rows = self.runs.iter().map(|r| r.images.len()).max().unwrap_or(0).max(1);
        let t = self.tile as u32;
        let mut grid = RgbImage::from_pixel(t * self.columns() as u32, t * rows as u32, Rgb([128, 128, 128]));
        for (c, run) in self.runs.iter().enumerate() {
            for (r, img) in run.images.iter().enumerate() {
                let tile = img.resized(self.tile, self.tile).to_rgb8();
                imageops::replace(&mut grid, &tile, (c as u32 * t).into(), (r as u32 * t).into());
            }
        }
        grid
    }

    pub fn save_gallery(&self, path: impl AsRef<Path>) -> Result<()> {
        self.gallery().save(path.as_ref())?;
        Ok(())
    }

    /// `label,w_p,steps,L_adv,L_percept,L_severity,L_G,L_D,error` with the
    /// last logged record of each run.
    pub fn write_summary_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "w_p", "steps", "L_adv", "L_percept", "L_severity", "L_G", "L_D", "error"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for run in &self.runs {
            let f = run.final_record.as_ref();
            w.write_record([
                run.label.clone(),
                run.weight.to_string(),
                run.log.len().to_string(),
                opt(f.map(|r| r.l_adv)),
                opt(f.and_then(|r| r.l_percept)),
                opt(f.and_then(|r| r.l_severity)),
                opt(f.and_then(|r| r.l_g)),
                opt(f.and_then(|r| r.l_d)),
                run.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{DescriptorSet, LesionBox, PathologicalDescriptor};
    use crate::detector::{Detector, DetectorConfig};
    use crate::imaging::VesselMask;
    use crate::nn::Tensor;
    use crate::pathogan::generator::tests::tiny_config;
    use crate::pathogan::{FeatureNet, FeatureNetConfig};
    use ndarray::{Array2, Array3};

    fn sample(seed: u64) -> GanSample {
        let mut descriptors = DescriptorSet::empty((8, 8));
        descriptors.descriptors.push(PathologicalDescriptor {
            id: 0,
            bbox: LesionBox::new(2, 2, 4, 4).unwrap(),
            crops: vec![Tensor::from_elem((1, 1, 2, 2), 0.3), Tensor::from_elem((1, 1, 1, 1), 0.2)],
        });
        let v = seed as f64 * 0.1;
        GanSample {
            id: format!("s{seed}"),
            image: RetinalImage::new(Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c + y + x) as f64 * 0.05 + v) % 1.0))
                .unwrap(),
            vessel: VesselMask::new(Array2::from_shape_fn((8, 8), |(y, x)| ((x + y) % 3 == 0) as u8 as f64)).unwrap(),
            descriptors,
        }
    }

    fn sweep(weights: &[f64]) -> AblationReport {
        let data: Vec<GanSample> = (0..3).map(sample).collect();
        let detector = Detector::new(DetectorConfig::tiny_8(), 2).unwrap();
        let feat = FeatureNet::random(FeatureNetConfig::reduced(), 3);
        let setup = AblationSetup {
            dataset: &data,
            preview: &data[..2],
            generator: tiny_config(),
            discriminator: DiscriminatorConfig {
                image_size: 8,
                kernel: 3,
                channels: vec![2, 3],
                batch_norm: true,
                leaky_slope: 0.2,
            },
            frozen: FrozenNets {
                perceptual: &feat,
                detector: &detector,
            },
            schedule: GanSchedule {
                max_steps: Some(4),
                ..GanSchedule::default()
            },
            model_seed: 11,
        };
        ablation_percept(&setup, weights).unwrap()
    }

    #[test]
    fn sweep_is_labelled_deterministic_and_gridded() {
        let a = sweep(&[0.0, 1.0, -1.0]);
        assert_eq!(a.runs[0].label, "w_p=0 (no perceptual loss)");
        assert!(a.runs[0].error.is_none() && a.runs[0].log.len() == 4);
        assert_eq!(a.runs[1].label, "w_p=1");
        // A negative weight is rejected by the trainer; the other runs survive.
        assert!(a.runs[2].error.is_some() && a.runs[2].images.is_empty());
        let g = a.gallery();
        assert_eq!((g.width(), g.height()), (3 * 8, 2 * 8));
        let b = sweep(&[0.0, 1.0, -1.0]);
        assert_eq!(a.runs[0].log, b.runs[0].log);
        assert_eq!(a.runs[1].log, b.runs[1].log);
        let mut buf = Vec::new();
        a.write_summary_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
