//! Adversarial training: two generator updates, then one discriminator
//! update, batch size 1, Adam.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{tape_adversarial, tape_generator_adv, tape_perceptual, tape_severity, LossParts, LossWeights};
use super::{Discriminator, FeatureNet, Generator, NoiseCode, TRAIN_NOISE_STD};
use crate::descriptor::DescriptorSet;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::imaging::{rotate_tensor, Interp, RetinalImage, VesselMask};
use crate::nn::{param_grads, Adam, AdamConfig, Mode, NormUpdates, ParamStore, Tape, Tensor};

/// One training triple.
#[derive(Debug, Clone)]
pub struct GanSample {
    pub id: String,
    pub image: RetinalImage,
    pub vessel: VesselMask,
    pub descriptors: DescriptorSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanSchedule {
    pub epochs: usize,
    /// Overrides `epochs * dataset size` when set.
    pub max_steps: Option<usize>,
    pub g_learning_rate: f64,
    pub d_learning_rate: f64,
    pub weights: LossWeights,
    pub noise_std: f64,
    pub rotate: bool,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for GanSchedule {
    fn default() -> Self {
        Self {
            epochs: 1000,
            max_steps: None,
            g_learning_rate: 2e-4,
            d_learning_rate: 1e-4,
            weights: LossWeights::default(),
            noise_std: TRAIN_NOISE_STD,
            rotate: true,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateKind {
    Generator,
    Discriminator,
}

impl UpdateKind {
    /// Steps `3k` and `3k + 1` update the generator, `3k + 2` the discriminator.
    pub fn at(step: usize) -> Self {
        if step % 3 == 2 {
            UpdateKind::Discriminator
        } else {
            UpdateKind::Generator
        }
    }
}

/// One row of the loss log. Generator steps fill `l_adv` with the
/// generator's adversarial term; discriminator steps fill it with the full
/// adversarial objective. Terms not computed in a step are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(rename = "L_adv")]
    pub l_adv: f64,
    #[serde(rename = "L_percept")]
    pub l_percept: Option<f64>,
    #[serde(rename = "L_severity")]
    pub l_severity: Option<f64>,
    #[serde(rename = "L_G")]
    pub l_g: Option<f64>,
    #[serde(rename = "L_D")]
    pub l_d: Option<f64>,
}

impl LossRecord {
    pub fn update(&self) -> UpdateKind {
        UpdateKind::at(self.step)
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.l_adv).chain([self.l_percept, self.l_severity, self.l_g, self.l_d].into_iter().flatten())
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// CSV with header `step,L_adv,L_percept,L_severity,L_G,L_D`.
pub fn write_loss_csv(out: impl Write, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(["step", "L_adv", "L_percept", "L_severity", "L_G", "L_D"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// The pre-trained, frozen networks used by the generator losses.
#[derive(Debug, Clone, Copy)]
pub struct FrozenNets<'a> {
    pub perceptual: &'a FeatureNet,
    pub detector: &'a Detector,
}

impl FrozenNets<'_> {
    pub fn fingerprint(&self) -> (String, String) {
        (self.perceptual.params().fingerprint(), self.detector.params().fingerprint())
    }
}

/// One prepared training input. `x` is in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GanBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub maps: Vec<Tensor>,
    pub z: Tensor,
}

impl GanBatch {
    /// Scale the image to `[-1, 1]`, reconstruct descriptor maps, optionally
    /// rotate image, mask and maps jointly, and draw training noise.
    pub fn prepare(
        sample: &GanSample,
        generator: &Generator,
        rotation_degrees: Option<f64>,
        noise: NoiseCode,
    ) -> Result<Self> {
        let s = generator.config().image_size;
        if sample.image.hw() != (s, s) || sample.vessel.hw() != (s, s) {
            return Err(Error::shape(
                format!("training sample `{}`", sample.id),
                &[s, s],
                &[sample.image.height(), sample.image.width()],
            ));
        }
        let mut x = sample.image.to_tensor().mapv(|v| 2.0 * v - 1.0);
        let mut y = sample.vessel.to_tensor();
        let mut maps = generator.descriptor_maps(&sample.descriptors)?;
        if let Some(deg) = rotation_degrees {
            x = rotate_tensor(&x, deg, Interp::Bilinear);
            y = rotate_tensor(&y, deg, Interp::Nearest);
            maps = maps.iter().map(|m| rotate_tensor(m, deg, Interp::Bilinear)).collect();
        }
        Ok(Self {
            x,
            y,
            maps,
            z: noise.to_tensor(),
        })
    }
}

/// Which generator objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossTerm {
    Adversarial,
    Perceptual,
    Severity,
    Total(LossWeights),
}

#[derive(Debug)]
pub struct GeneratorEval {
    pub parts: LossParts,
    pub objective: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub updates: NormUpdates,
}

/// Forward the generator in training mode, evaluate all three loss terms
/// and differentiate `term` with respect to the generator parameters. The
/// discriminator, perceptual net and detector are bound as constants.
pub fn generator_objective(
    generator: &Generator,
    discriminator: &Discriminator,
    frozen: FrozenNets<'_>,
    batch: &GanBatch,
    term: LossTerm,
) -> Result<GeneratorEval> {
    let mut tape = Tape::new();
    let mut updates = NormUpdates::default();
    let y = tape.constant(batch.y.clone());
    let maps: Vec<_> = batch.maps.iter().map(|m| tape.constant(m.clone())).collect();
    let z = tape.constant(batch.z.clone());
    let x = tape.constant(batch.x.clone());
    let x_hat = generator.forward_tape(&mut tape, y, &maps, z, Mode::Train, true, &mut updates)?;

    let p_fake = discriminator.forward_tape(&mut tape, x_hat, y, Mode::Train, false, &mut NormUpdates::default())?;
    let adv = tape_generator_adv(&mut tape, p_fake);
    let percept = tape_perceptual(&mut tape, frozen.perceptual, x, x_hat)?;
    let severity = tape_severity(&mut tape, frozen.detector, x, x_hat)?;
    let objective = match term {
        LossTerm::Adversarial => adv,
        LossTerm::Perceptual => percept,
        LossTerm::Severity => severity,
        LossTerm::Total(w) => {
            let p = tape.scale(percept, w.percept);
            let s = tape.scale(severity, w.severity);
            let ps = tape.add(p, s);
            tape.add(adv, ps)
        }
    };
    let parts = LossParts {
        adv: tape.scalar(adv),
        percept: tape.scalar(percept),
        severity: tape.scalar(severity),
    };
    let grads = param_grads(&tape, &tape.backward(objective));
    Ok(GeneratorEval {
        parts,
        objective: tape.scalar(objective),
        grads,
        updates,
    })
}

#[derive(Debug)]
pub struct DiscriminatorEval {
    /// `log D(x, y) + log(1 - D(x_hat, y))`.
    pub l_adv: f64,
    /// The minimised objective, `-l_adv`.
    pub l_d: f64,
    pub grads: BTreeMap<String, Tensor>,
    pub updates: NormUpdates,
}

pub fn discriminator_objective(
    generator: &Generator,
    discriminator: &Discriminator,
    batch: &GanBatch,
) -> Result<DiscriminatorEval> {
    let mut tape = Tape::new();
    let y = tape.constant(batch.y.clone());
    let maps: Vec<_> = batch.maps.iter().map(|m| tape.constant(m.clone())).collect();
    let z = tape.constant(batch.z.clone());
    let x_hat = generator.forward_tape(&mut tape, y, &maps, z, Mode::Train, false, &mut NormUpdates::default())?;
    let x_hat = tape.constant(tape.value(x_hat).clone());
    let x = tape.constant(batch.x.clone());
    let mut updates = NormUpdates::default();
    let p_real = discriminator.forward_tape(&mut tape, x, y, Mode::Train, true, &mut updates)?;
    let p_fake = discriminator.forward_tape(&mut tape, x_hat, y, Mode::Train, true, &mut updates)?;
    let l_adv = tape_adversarial(&mut tape, p_real, p_fake);
    let l_d = tape.scale(l_adv, -1.0);
    let grads = param_grads(&tape, &tape.backward(l_d));
    Ok(DiscriminatorEval {
        l_adv: tape.scalar(l_adv),
        l_d: tape.scalar(l_d),
        grads,
        updates,
    })
}

pub struct GanTrainer<'a> {
    generator: Generator,
    discriminator: Discriminator,
    frozen: FrozenNets<'a>,
    frozen_fingerprint: (String, String),
    dataset: &'a [GanSample],
    schedule: GanSchedule,
    g_opt: Adam,
    d_opt: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    step: usize,
    g_updates: usize,
    d_updates: usize,
    log: Vec<LossRecord>,
}

impl<'a> GanTrainer<'a> {
    pub fn new(
        generator: Generator,
        discriminator: Discriminator,
        frozen: FrozenNets<'a>,
        dataset: &'a [GanSample],
        schedule: GanSchedule,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        schedule.weights.validate()?;
        let s = generator.config().image_size;
        if discriminator.config().image_size != s {
            return Err(Error::Config(format!(
                "generator size {s} and discriminator size {} differ",
                discriminator.config().image_size
            )));
        }
        if frozen.detector.config().input_size != s {
            return Err(Error::Config(format!(
                "detector input size {} does not match image size {s}",
                frozen.detector.config().input_size
            )));
        }
        Ok(Self {
            g_opt: Adam::new(AdamConfig::with_lr(schedule.g_learning_rate)),
            d_opt: Adam::new(AdamConfig::with_lr(schedule.d_learning_rate)),
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            frozen_fingerprint: frozen.fingerprint(),
            generator,
            discriminator,
            frozen,
            dataset,
            schedule,
            order: Vec::new(),
            step: 0,
            g_updates: 0,
            d_updates: 0,
            log: Vec::new(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.schedule
            .max_steps
            .unwrap_or(self.schedule.epochs * self.dataset.len())
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn into_models(self) -> (Generator, Discriminator, Vec<LossRecord>) {
        (self.generator, self.discriminator, self.log)
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn g_updates(&self) -> usize {
        self.g_updates
    }

    pub fn d_updates(&self) -> usize {
        self.d_updates
    }

    /// Check that the frozen networks still match their initial fingerprints.
    pub fn verify_frozen(&self) -> Result<()> {
        if self.frozen.fingerprint() != self.frozen_fingerprint {
            return Err(Error::Invalid("frozen network parameters changed during training".into()));
        }
        Ok(())
    }

    fn next_sample(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = (0..self.dataset.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.order.reverse();
        }
        self.order.pop().expect("refilled above")
    }

    fn next_batch(&mut self) -> Result<GanBatch> {
        let idx = self.next_sample();
        let angle = self.schedule.rotate.then(|| self.rng.random_range(0.0..360.0));
        let z = NoiseCode::sample_with(self.generator.config().noise_dim, self.schedule.noise_std, &mut self.rng);
        GanBatch::prepare(&self.dataset[idx], &self.generator, angle, z)
    }

    /// Run one optimizer step. On a non-finite loss or update the models are
    /// left at their last good state and `Error::Diverged` is returned.
    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.step;
        let batch = self.next_batch()?;
        let diverged = |reason: String| Error::Diverged { step, reason };
        let record = match UpdateKind::at(step) {
            UpdateKind::Generator => {
                let eval = generator_objective(
                    &self.generator,
                    &self.discriminator,
                    self.frozen,
                    &batch,
                    LossTerm::Total(self.schedule.weights),
                )?;
                let record = LossRecord {
                    step,
                    l_adv: eval.parts.adv,
                    l_percept: Some(eval.parts.percept),
                    l_severity: Some(eval.parts.severity),
                    l_g: Some(eval.objective),
                    l_d: None,
                };
                if !record.all_finite() {
                    return Err(diverged(format!("non-finite generator loss {record:?}")));
                }
                let snapshot = self.generator.params().clone();
                self.g_opt.step(self.generator.params_mut(), &eval.grads);
                eval.updates.apply(self.generator.params_mut(), self.schedule.bn_momentum);
                Self::guard(self.generator.params_mut(), snapshot, &diverged)?;
                self.g_updates += 1;
                record
            }
            UpdateKind::Discriminator => {
                let eval = discriminator_objective(&self.generator, &self.discriminator, &batch)?;
                let record = LossRecord {
                    step,
                    l_adv: eval.l_adv,
                    l_percept: None,
                    l_severity: None,
                    l_g: None,
                    l_d: Some(eval.l_d),
                };
                if !record.all_finite() {
                    return Err(diverged(format!("non-finite discriminator loss {record:?}")));
                }
                let snapshot = self.discriminator.params().clone();
                self.d_opt.step(self.discriminator.params_mut(), &eval.grads);
                eval.updates.apply(self.discriminator.params_mut(), self.schedule.bn_momentum);
                Self::guard(self.discriminator.params_mut(), snapshot, &diverged)?;
                self.d_updates += 1;
                record
            }
        };
        self.step += 1;
        self.log.push(record.clone());
        Ok(record)
    }

    fn guard(params: &mut ParamStore, snapshot: ParamStore, diverged: &dyn Fn(String) -> Error) -> Result<()> {
        if params.all_finite() {
            return Ok(());
        }
        *params = snapshot;
        Err(diverged("non-finite parameters after update".into()))
    }

    /// Train to `total_steps`, calling `after_step` after every step (for
    /// logging and periodic checkpoints).
    pub fn run(&mut self, mut after_step: impl FnMut(&Self, &LossRecord) -> Result<()>) -> Result<()> {
        while self.step < self.total_steps() {
            let record = self.step()?;
            after_step(self, &record)?;
        }
        self.verify_frozen()
    }
}

#[cfg(test)]
mod tests {
    use super::super::generator::tests::tiny_config;
    use super::super::{DiscriminatorConfig, FeatureNetConfig};
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::descriptor::{LesionBox, PathologicalDescriptor};
    use ndarray::{Array2, Array3};

    fn tiny_sample(seed: u64) -> GanSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut descriptors = DescriptorSet::empty((8, 8));
        descriptors.descriptors.push(PathologicalDescriptor {
            id: 0,
            bbox: LesionBox::new(2, 2, 4, 4).unwrap(),
            crops: vec![
                Tensor::from_shape_fn((1, 1, 2, 2), |_| rng.random_range(0.0..1.0)),
                Tensor::from_shape_fn((1, 1, 1, 1), |_| rng.random_range(0.0..1.0)),
            ],
        });
        GanSample {
            id: format!("s{seed}"),
            image: RetinalImage::new(Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(0.0..1.0))).unwrap(),
            vessel: VesselMask::new(Array2::from_shape_fn((8, 8), |_| rng.random_bool(0.3) as u8 as f64)).unwrap(),
            descriptors,
        }
    }

    fn tiny_disc() -> DiscriminatorConfig {
        DiscriminatorConfig {
            image_size: 8,
            kernel: 3,
            channels: vec![2, 3],
            batch_norm: true,
            leaky_slope: 0.2,
        }
    }

    fn tiny_feature() -> FeatureNetConfig {
        FeatureNetConfig {
            blocks: vec![vec![2], vec![3]],
            ..FeatureNetConfig::reduced()
        }
    }

    #[test]
    fn schedule_ratio() {
        let g = (0..30).filter(|&s| UpdateKind::at(s) == UpdateKind::Generator).count();
        assert_eq!((g, 30 - g), (20, 10));
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            LossRecord {
                step: 0,
                l_adv: 0.5,
                l_percept: Some(0.25),
                l_severity: Some(0.0),
                l_g: Some(0.75),
                l_d: None,
            },
            LossRecord {
                step: 2,
                l_adv: -1.5,
                l_percept: None,
                l_severity: None,
                l_g: None,
                l_d: Some(1.5),
            },
        ];
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,L_adv,L_percept,L_severity,L_G,L_D\n0,0.5,0.25,0.0,0.75,\n2,-1.5,,,,1.5\n"
        );
    }

    #[test]
    fn tiny_training_run() {
        let data: Vec<GanSample> = (0..3).map(tiny_sample).collect();
        let det = Detector::new(DetectorConfig::tiny_8(), 1).unwrap();
        let feat = FeatureNet::random(tiny_feature(), 2);
        let frozen = FrozenNets {
            perceptual: &feat,
            detector: &det,
        };
        let before = frozen.fingerprint();
        let schedule = GanSchedule {
            max_steps: Some(9),
            ..GanSchedule::default()
        };
        let g = Generator::new(tiny_config(), 3).unwrap();
        let d = Discriminator::new(tiny_disc(), 4).unwrap();
        let mut trainer = GanTrainer::new(g.clone(), d, frozen, &data, schedule).unwrap();
        trainer.run(|_, _| Ok(())).unwrap();
        assert_eq!((trainer.g_updates(), trainer.d_updates()), (6, 3));
        assert!(trainer.log().iter().all(LossRecord::all_finite));
        assert_ne!(trainer.generator().params(), g.params());
        assert_eq!(frozen.fingerprint(), before);
    }

    #[test]
    fn rotation_is_joint() {
        let g = Generator::new(tiny_config(), 3).unwrap();
        let s = tiny_sample(5);
        let z = NoiseCode::sample(4, 0.001, 0);
        let plain = GanBatch::prepare(&s, &g, None, z.clone()).unwrap();
        let turned = GanBatch::prepare(&s, &g, Some(90.0), z).unwrap();
        assert_eq!(turned.y, rotate_tensor(&plain.y, 90.0, Interp::Nearest));
        assert_eq!(turned.maps[0], rotate_tensor(&plain.maps[0], 90.0, Interp::Bilinear));
        assert!(turned.y.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let det = Detector::new(DetectorConfig::tiny_8(), 1).unwrap();
        let feat = FeatureNet::random(tiny_feature(), 2);
        let frozen = FrozenNets {
            perceptual: &feat,
            detector: &det,
        };
        let g = Generator::new(tiny_config(), 3).unwrap();
        let d = Discriminator::new(tiny_disc(), 4).unwrap();
        let batch = GanBatch::prepare(&tiny_sample(7), &g, Some(30.0), NoiseCode::sample(4, 0.5, 1)).unwrap();
        let terms = [
            LossTerm::Adversarial,
            LossTerm::Perceptual,
            LossTerm::Severity,
            LossTerm::Total(LossWeights::default()),
        ];
        for term in terms {
            let eval = generator_objective(&g, &d, frozen, &batch, term).unwrap();
            let (mut num, mut den_a, mut den_n) = (0.0, 0.0, 0.0);
            let h = 1e-6;
            for (name, grad) in &eval.grads {
                for i in 0..grad.len() {
                    let probe = |delta: f64| {
                        let mut gp = g.clone();
                        let t = gp.params_mut().params.get_mut(name).unwrap();
                        *t.iter_mut().nth(i).unwrap() += delta;
                        generator_objective(&gp, &d, frozen, &batch, term).unwrap().objective
                    };
                    let fd = (probe(h) - probe(-h)) / (2.0 * h);
                    let a = *grad.iter().nth(i).unwrap();
                    num += (a - fd) * (a - fd);
                    den_a += a * a;
                    den_n += fd * fd;
                }
            }
            let rel = num.sqrt() / den_a.sqrt().max(den_n.sqrt()).max(1e-12);
            assert!(rel <= 1e-3, "{term:?}: relative error {rel:e}");
            assert!(den_a > 0.0, "{term:?}: zero gradient");
        }
    }
}
