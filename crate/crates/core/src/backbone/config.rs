use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample input geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InputShape {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    Vector {
        dim: usize,
    },
}

impl InputShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            InputShape::Vector { dim } => vec![dim],
        }
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_vector(&self) -> bool {
        matches!(self, InputShape::Vector { .. })
    }
}

fn one() -> usize {
    1
}

/// One trunk layer. In vector mode the layer is fully connected with
/// `out_channels` units and kernel, stride and pool must all be 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool window applied after the activation; 1 disables pooling.
    #[serde(default = "one")]
    pub pool: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            pool: 1,
        }
    }

    pub fn dense(units: usize) -> Self {
        Self::new(units, 1, 1)
    }

    pub fn with_pool(mut self, pool: usize) -> Self {
        self.pool = pool;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_shape: InputShape,
    pub conv_specs: Vec<ConvSpec>,
    /// 1-based index of the last shared layer; its activation feeds both
    /// the verification projection and the identification pair fusion.
    pub verification_tap_layer: usize,
    #[serde(rename = "fcV_dim")]
    pub fcv_dim: usize,
    /// Hidden fully connected widths between the last conv layer and the
    /// two-way similarity output.
    pub fc_dims: Vec<usize>,
}

impl BackboneConfig {
    /// Five dense layers on raw vectors, tap after the second.
    pub fn vector_default(dim: usize) -> Self {
        Self {
            input_shape: InputShape::Vector { dim },
            conv_specs: vec![ConvSpec::dense(32); 5],
            verification_tap_layer: 2,
            fcv_dim: 16,
            fc_dims: vec![16],
        }
    }

    /// Five conv layers on 3x32x32 images, tap after the second.
    pub fn image_default() -> Self {
        Self {
            input_shape: InputShape::Image {
                channels: 3,
                height: 32,
                width: 32,
            },
            conv_specs: vec![
                ConvSpec::new(8, 5, 1).with_pool(2),
                ConvSpec::new(16, 3, 1).with_pool(2),
                ConvSpec::new(16, 3, 1),
                ConvSpec::new(16, 3, 1),
                ConvSpec::new(16, 1, 1),
            ],
            verification_tap_layer: 2,
            fcv_dim: 32,
            fc_dims: vec![32],
        }
    }

    /// Per-sample activation shape after every conv layer (index 0 is the
    /// input itself).
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.dims()];
        for (i, spec) in self.conv_specs.iter().enumerate() {
            let layer = i + 1;
            if spec.out_channels == 0 || spec.kernel == 0 || spec.stride == 0 || spec.pool == 0 {
                return Err(Error::Config(format!(
                    "conv layer {layer}: all sizes must be positive"
                )));
            }
            let prev = shapes.last().expect("input shape");
            let next = if self.input_shape.is_vector() {
                if spec.kernel != 1 || spec.stride != 1 || spec.pool != 1 {
                    return Err(Error::Config(format!(
                        "conv layer {layer}: vector mode needs kernel, stride and pool of 1"
                    )));
                }
                vec![spec.out_channels]
            } else {
                let (h, w) = (prev[1], prev[2]);
                if h < spec.kernel || w < spec.kernel {
                    return Err(Error::Config(format!(
                        "conv layer {layer}: kernel {} exceeds activation {h}x{w}",
                        spec.kernel
                    )));
                }
                let ho = (h - spec.kernel) / spec.stride + 1;
                let wo = (w - spec.kernel) / spec.stride + 1;
                if ho < spec.pool || wo < spec.pool {
                    return Err(Error::Config(format!(
                        "conv layer {layer}: pool {} exceeds activation {ho}x{wo}",
                        spec.pool
                    )));
                }
                vec![spec.out_channels, ho / spec.pool, wo / spec.pool]
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.dims().contains(&0) {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.conv_specs.is_empty() {
            return Err(Error::Config("at least one conv layer is required".into()));
        }
        if self.verification_tap_layer < 1 || self.verification_tap_layer > self.conv_specs.len() {
            return Err(Error::Config(format!(
                "verification_tap_layer {} outside 1..={}",
                self.verification_tap_layer,
                self.conv_specs.len()
            )));
        }
        if self.fcv_dim == 0 || self.fc_dims.contains(&0) {
            return Err(Error::Config(
                "fully connected widths must be positive".into(),
            ));
        }
        self.activation_shapes().map(|_| ())
    }
}
