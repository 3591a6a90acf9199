//! Descriptor-conditioned retinal image synthesis: generator,
//! discriminator, the three generator losses and the training loop.

pub mod discriminator;
pub mod generator;
pub mod losses;
pub mod perceptual;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{DescriptorTap, GenOp, Generator, GeneratorConfig};
pub use losses::{
    adversarial_loss, generator_adv_loss, perceptual_loss, severity_loss, total_generator_loss, LossParts,
    LossWeights, PROB_EPS,
};
pub use perceptual::{FeatureNet, FeatureNetConfig};
pub use train::{
    discriminator_objective, generator_objective, write_loss_csv, FrozenNets, GanBatch, GanSample, GanSchedule,
    GanTrainer, LossRecord, LossTerm, UpdateKind,
};

pub const NOISE_DIM: usize = 400;
pub const TRAIN_NOISE_STD: f64 = 0.001;
pub const TEST_NOISE_STD: f64 = 0.1;

/// Noise vector `z`, element-wise zero-mean Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCode(Vec<f64>);

impl NoiseCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("noise code must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn sample_with(dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("noise std must be finite and non-negative");
        Self((0..dim).map(|_| normal.sample(rng)).collect())
    }

    pub fn sample(dim: usize, std: f64, seed: u64) -> Self {
        Self::sample_with(dim, std, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Test-time code for a seed.
    pub fn for_seed(dim: usize, seed: u64) -> Self {
        Self::sample(dim, TEST_NOISE_STD, seed)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `[1, Z, 1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_shape_vec((1, self.0.len(), 1, 1), self.0.clone()).expect("length matches")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_seeded() {
        let a = NoiseCode::for_seed(400, 7);
        assert_eq!(a, NoiseCode::for_seed(400, 7));
        assert_ne!(a, NoiseCode::for_seed(400, 8));
        let sd = (a.values().iter().map(|v| v * v).sum::<f64>() / 400.0).sqrt();
        assert!((sd - TEST_NOISE_STD).abs() < 0.02);
        assert!(NoiseCode::new(vec![f64::NAN]).is_err());
    }
}
