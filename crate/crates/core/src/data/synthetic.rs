//! Gaussian identity clusters for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, PayloadMode, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rejection-sampling attempts allowed per identity center.
pub const MAX_CENTER_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthShape {
    Vector {
        dim: usize,
    },
    /// RGB image, quantized to 8-bit levels so that PPM storage is lossless.
    Image {
        width: usize,
        height: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub shape: SynthShape,
    pub intra_class_stddev: f64,
    pub inter_class_separation: f64,
    pub seed: u64,
    /// Sample `k` of each identity is assigned camera `k % cameras`.
    pub cameras: u64,
}

impl SynthSpec {
    pub fn vector(num_identities: usize, samples_per_identity: usize, dim: usize) -> Self {
        Self {
            num_identities,
            samples_per_identity,
            shape: SynthShape::Vector { dim },
            intra_class_stddev: 1.0,
            inter_class_separation: 6.0,
            seed: 0,
            cameras: 2,
        }
    }
}

/// Identity centers are drawn until all pairwise distances reach
/// `inter_class_separation`: vector centers from `N(0, separation^2 I)`,
/// image centers uniformly from `[0, 1]^n`. Samples are center plus
/// `N(0, stddev^2)` noise; image samples are then clamped to `[0, 1]` and
/// rounded to multiples of 1/255.
pub fn generate_synthetic<T: Scalar>(spec: &SynthSpec) -> Result<LabeledDataset<T>> {
    if spec.num_identities < 3 {
        return Err(Error::Config(format!(
            "need at least 3 identities for quartet sampling, got {}",
            spec.num_identities
        )));
    }
    if spec.samples_per_identity == 0 || spec.cameras == 0 {
        return Err(Error::Config(
            "samples per identity and cameras must be positive".into(),
        ));
    }
    if !(spec.intra_class_stddev >= 0.0 && spec.intra_class_stddev.is_finite()) {
        return Err(Error::Config("intra-class stddev must be >= 0".into()));
    }
    if !(spec.inter_class_separation >= 0.0 && spec.inter_class_separation.is_finite()) {
        return Err(Error::Config("inter-class separation must be >= 0".into()));
    }
    let (mode, shape) = match spec.shape {
        SynthShape::Vector { dim } => (PayloadMode::Vector, vec![dim]),
        SynthShape::Image { width, height } => (PayloadMode::Image, vec![3, height, width]),
    };
    let n: usize = shape.iter().product();
    if n == 0 {
        return Err(Error::Config("sample shape must be non-empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sep2 = spec.inter_class_separation * spec.inter_class_separation;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.num_identities);
    for _ in 0..spec.num_identities {
        let mut placed = false;
        for _ in 0..MAX_CENTER_ATTEMPTS {
            let c: Vec<f64> = match mode {
                PayloadMode::Vector => (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * spec.inter_class_separation
                    })
                    .collect(),
                PayloadMode::Image => (0..n).map(|_| rng.random::<f64>()).collect(),
            };
            let far = centers.iter().all(|o| {
                o.iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    >= sep2
            });
            if far {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InfeasibleSeparation {
                requested: spec.num_identities,
                separation: spec.inter_class_separation,
                attempts: MAX_CENTER_ATTEMPTS,
            });
        }
    }

    let noise = Normal::new(0.0, spec.intra_class_stddev).expect("validated stddev");
    let mut samples = Vec::with_capacity(spec.num_identities * spec.samples_per_identity);
    for (id, c) in centers.iter().enumerate() {
        for k in 0..spec.samples_per_identity {
            let data: Vec<T> = c
                .iter()
                .map(|&m| {
                    let v = m + noise.sample(&mut rng);
                    match mode {
                        PayloadMode::Vector => T::lit(v),
                        PayloadMode::Image => T::lit((v.clamp(0.0, 1.0) * 255.0).round() / 255.0),
                    }
                })
                .collect();
            samples.push(Sample {
                payload: Tensor::new(shape.clone(), data)?,
                identity: id as u64,
                camera: k as u64 % spec.cameras,
            });
        }
    }
    LabeledDataset::new(mode, shape, samples)
}
