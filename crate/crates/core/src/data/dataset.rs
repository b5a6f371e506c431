use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::backbone::InputShape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadMode {
    /// `[3, height, width]` RGB in `[0, 1]`, stored as PPM P6.
    Image,
    /// `[dim]`, stored as QVEC blobs.
    Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub payload: Tensor<T>,
    pub identity: u64,
    pub camera: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T> {
    mode: PayloadMode,
    shape: Vec<usize>,
    samples: Vec<Sample<T>>,
    pub manifest_path: Option<PathBuf>,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(mode: PayloadMode, shape: Vec<usize>, samples: Vec<Sample<T>>) -> Result<Self> {
        let rank_ok = match mode {
            PayloadMode::Image => shape.len() == 3,
            PayloadMode::Vector => shape.len() == 1,
        };
        if !rank_ok || shape.contains(&0) {
            return Err(Error::Config(format!(
                "invalid {mode:?} sample shape {shape:?}"
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.payload.shape() != shape {
                return Err(Error::InvalidShape {
                    op: "dataset",
                    msg: format!(
                        "sample {i} has shape {:?}, dataset shape is {shape:?}",
                        s.payload.shape()
                    ),
                });
            }
        }
        Ok(Self {
            mode,
            shape,
            samples,
            manifest_path: None,
        })
    }

    pub fn mode(&self) -> PayloadMode {
        self.mode
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn input_shape(&self) -> InputShape {
        match self.mode {
            PayloadMode::Image => InputShape::Image {
                channels: self.shape[0],
                height: self.shape[1],
                width: self.shape[2],
            },
            PayloadMode::Vector => InputShape::Vector { dim: self.shape[0] },
        }
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn identity(&self, i: usize) -> u64 {
        self.samples[i].identity
    }

    pub fn payload(&self, i: usize) -> &Tensor<T> {
        &self.samples[i].payload
    }

    /// Distinct identity ids in ascending order.
    pub fn identities(&self) -> Vec<u64> {
        self.samples
            .iter()
            .map(|s| s.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// New dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            mode: self.mode,
            shape: self.shape.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            manifest_path: self.manifest_path.clone(),
        }
    }
}
