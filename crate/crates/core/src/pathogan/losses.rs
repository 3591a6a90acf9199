//! Adversarial, perceptual and severity losses, as plain scalars and as tape
//! nodes.

use serde::{Deserialize, Serialize};

use super::{Discriminator, FeatureNet};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::imaging::{RetinalImage, VesselMask};
use crate::nn::{Mode, NormUpdates, Tape, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub percept: f64,
    pub severity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            percept: 1.0,
            severity: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.percept < 0.0 || self.severity < 0.0 || !self.percept.is_finite() || !self.severity.is_finite() {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted generator loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv: f64,
    pub percept: f64,
    pub severity: f64,
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `log D(x, y) + log(1 - D(x_hat, y))`.
pub fn adversarial_value(p_real: f64, p_fake: f64) -> f64 {
    clamp_p(p_real).ln() + (1.0 - clamp_p(p_fake)).ln()
}

/// `-log D(x_hat, y)`.
pub fn generator_adv_value(p_fake: f64) -> f64 {
    -clamp_p(p_fake).ln()
}

pub fn severity_value(dr_real: f64, dr_fake: f64) -> f64 {
    (dr_real - dr_fake).abs()
}

pub fn total_generator_loss(parts: LossParts, weights: LossWeights) -> f64 {
    parts.adv + weights.percept * parts.percept + weights.severity * parts.severity
}

pub fn tape_generator_adv(tape: &mut Tape, p_fake: Var) -> Var {
    let p = tape.clamp(p_fake, PROB_EPS, 1.0 - PROB_EPS);
    let l = tape.ln(p);
    tape.scale(l, -1.0)
}

pub fn tape_adversarial(tape: &mut Tape, p_real: Var, p_fake: Var) -> Var {
    let pr = tape.clamp(p_real, PROB_EPS, 1.0 - PROB_EPS);
    let pf = tape.clamp(p_fake, PROB_EPS, 1.0 - PROB_EPS);
    let lr = tape.ln(pr);
    let nf = tape.scale(pf, -1.0);
    let one_minus = tape.add_scalar(nf, 1.0);
    let lf = tape.ln(one_minus);
    tape.add(lr, lf)
}

/// L1 mean of feature differences; both inputs in `[-1, 1]`.
pub fn tape_perceptual(tape: &mut Tape, net: &FeatureNet, x: Var, x_hat: Var) -> Result<Var> {
    let fa = net.features(tape, x)?;
    let fb = net.features(tape, x_hat)?;
    Ok(tape.l1_mean(fa, fb))
}

/// Severity score of a `[-1, 1]` image through the frozen detector.
pub fn tape_severity_score(tape: &mut Tape, detector: &Detector, x: Var) -> Result<Var> {
    let half = tape.scale(x, 0.5);
    let x01 = tape.add_scalar(half, 0.5);
    Ok(detector
        .forward_tape(tape, x01, Mode::Eval, false, &mut NormUpdates::default())?
        .score)
}

/// `|DR(x) - DR(x_hat)|`; both inputs in `[-1, 1]`.
pub fn tape_severity(tape: &mut Tape, detector: &Detector, x: Var, x_hat: Var) -> Result<Var> {
    let a = tape_severity_score(tape, detector, x)?;
    let b = tape_severity_score(tape, detector, x_hat)?;
    let d = tape.sub(a, b);
    Ok(tape.abs(d))
}

fn signed(image: &RetinalImage) -> crate::nn::Tensor {
    image.to_tensor().mapv(|v| 2.0 * v - 1.0)
}

pub fn adversarial_loss(x: &RetinalImage, x_hat: &RetinalImage, y: &VesselMask, disc: &Discriminator) -> Result<f64> {
    Ok(adversarial_value(disc.discriminate(x, y)?, disc.discriminate(x_hat, y)?))
}

pub fn generator_adv_loss(x_hat: &RetinalImage, y: &VesselMask, disc: &Discriminator) -> Result<f64> {
    Ok(generator_adv_value(disc.discriminate(x_hat, y)?))
}

pub fn perceptual_loss(x: &RetinalImage, x_hat: &RetinalImage, net: &FeatureNet) -> Result<f64> {
    if x.hw() != x_hat.hw() {
        return Err(Error::shape("perceptual inputs", &[x.height(), x.width()], &[x_hat.height(), x_hat.width()]));
    }
    let mut tape = Tape::new();
    let a = tape.constant(signed(x));
    let b = tape.constant(signed(x_hat));
    let l = tape_perceptual(&mut tape, net, a, b)?;
    Ok(tape.scalar(l))
}

pub fn severity_loss(x: &RetinalImage, x_hat: &RetinalImage, detector: &Detector) -> Result<f64> {
    Ok(severity_value(
        detector.predict_severity(x)?.0,
        detector.predict_severity(x_hat)?.0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::kernels::scalar;
    use crate::nn::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plug_in_values() {
        assert!(adversarial_value(1.0 - PROB_EPS, PROB_EPS).abs() < 1e-6);
        assert!((adversarial_value(0.5, 0.5) - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((adversarial_value(0.5, 0.5) + 1.3863).abs() < 1e-4);
        assert!(generator_adv_value(1.0 - PROB_EPS).abs() < 1e-6);
        assert!((generator_adv_value(0.5) - 0.6931).abs() < 1e-4);
        assert_eq!(severity_value(2.0, 3.5), 1.5);
        assert_eq!(severity_value(3.0, 3.0), 0.0);
        // clamping keeps logs finite at the ends
        assert!(adversarial_value(0.0, 1.0).is_finite());
        assert!(generator_adv_value(0.0).is_finite());
    }

    #[test]
    fn weighted_sum() {
        let w = LossWeights::default();
        let parts = LossParts {
            adv: 0.7,
            percept: 0.2,
            severity: 0.05,
        };
        assert!((total_generator_loss(parts, w) - 1.4).abs() < 1e-12);
        assert_eq!(total_generator_loss(LossParts::default(), w), 0.0);
        let doubled = LossWeights { severity: 20.0, ..w };
        let delta = total_generator_loss(parts, doubled) - total_generator_loss(parts, w);
        assert!((delta - 10.0 * 0.05).abs() < 1e-12);
    }

    #[test]
    fn tape_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (pr, pf) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let mut tape = Tape::new();
            let a = tape.constant(scalar(pr));
            let b = tape.constant(scalar(pf));
            let l = tape_adversarial(&mut tape, a, b);
            let g = tape_generator_adv(&mut tape, b);
            let oracle = pr.max(PROB_EPS).min(1.0 - PROB_EPS).ln() + (1.0 - pf.max(PROB_EPS).min(1.0 - PROB_EPS)).ln();
            assert!((tape.scalar(l) - oracle).abs() < 1e-12);
            assert!((tape.scalar(g) + pf.max(PROB_EPS).min(1.0 - PROB_EPS).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn perceptual_symmetry_and_identity() {
        let net = FeatureNet::random(super::super::FeatureNetConfig::reduced(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = || RetinalImage::new(ndarray::Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(0.0..1.0))).unwrap();
        let (a, b) = (img(), img());
        assert_eq!(perceptual_loss(&a, &a, &net).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, &net).unwrap();
        assert!(ab > 0.0);
        assert!((ab - perceptual_loss(&b, &a, &net).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn one_conv_feature_net_by_hand() {
        let cfg = super::super::FeatureNetConfig {
            blocks: vec![vec![1]],
            mean: [0.5; 3],
            std: [0.5; 3],
        };
        let mut params = crate::nn::ParamStore::new();
        let mut w = Tensor::zeros((1, 3, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        w[[0, 2, 1, 1]] = -2.0;
        params.params.insert("features.0.weight".into(), w);
        params.params.insert("features.0.bias".into(), Tensor::from_elem((1, 1, 1, 1), 0.25));
        let net = FeatureNet::from_params(cfg, params).unwrap();
        let a = RetinalImage::new(ndarray::Array3::from_shape_fn((3, 2, 2), |(c, y, x)| (c + y + x) as f64 / 5.0)).unwrap();
        let b = RetinalImage::new(ndarray::Array3::from_elem((3, 2, 2), 0.5)).unwrap();
        // with mean = std = 0.5 the net sees 2v - 1
        let feat = |img: &RetinalImage, y: usize, x: usize| {
            let p = img.pixels();
            let v = (2.0 * p[[0, y, x]] - 1.0) - 2.0 * (2.0 * p[[2, y, x]] - 1.0) + 0.25;
            v.max(0.0)
        };
        let mut want = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                want += (feat(&a, y, x) - feat(&b, y, x)).abs();
            }
        }
        want /= 4.0;
        assert!((perceptual_loss(&a, &b, &net).unwrap() - want).abs() < 1e-12);
    }
}
