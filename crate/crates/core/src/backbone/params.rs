use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::BackboneConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which forward path a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Trunk layers up to and including the verification tap.
    Shared,
    /// The fcV projection.
    Verification,
    /// Conv layers past the tap, hidden fc layers and the two-way output.
    Identification,
}

/// Name, shape, fan-in and fan-out.
pub(crate) type LayoutEntry = (String, Vec<usize>, usize, usize);

/// Every parameter tensor, in storage order.
pub(crate) fn layout(config: &BackboneConfig) -> Result<Vec<LayoutEntry>> {
    let shapes = config.activation_shapes()?;
    let vector = config.input_shape.is_vector();
    let mut out = Vec::new();
    for (i, spec) in config.conv_specs.iter().enumerate() {
        let inp = &shapes[i];
        let o = spec.out_channels;
        let name = format!("conv{}", i + 1);
        if vector {
            out.push((format!("{name}.weight"), vec![inp[0], o], inp[0], o));
        } else {
            let k = spec.kernel;
            out.push((
                format!("{name}.weight"),
                vec![o, inp[0], k, k],
                inp[0] * k * k,
                o * k * k,
            ));
        }
        out.push((format!("{name}.bias"), vec![o], 0, 0));
    }
    let tap: usize = shapes[config.verification_tap_layer].iter().product();
    out.push((
        "fcv.weight".into(),
        vec![tap, config.fcv_dim],
        tap,
        config.fcv_dim,
    ));
    out.push(("fcv.bias".into(), vec![config.fcv_dim], 0, 0));
    let mut width: usize = shapes.last().expect("layers").iter().product();
    for (j, &d) in config.fc_dims.iter().enumerate() {
        out.push((format!("fc{}.weight", j + 1), vec![width, d], width, d));
        out.push((format!("fc{}.bias", j + 1), vec![d], 0, 0));
        width = d;
    }
    out.push(("head.weight".into(), vec![width, 2], width, 2));
    out.push(("head.bias".into(), vec![2], 0, 0));
    Ok(out)
}

/// The one weight collection applied to every input stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    tensors: Vec<(String, Tensor<T>)>,
    version: u64,
}

impl<T: Scalar> ParameterSet<T> {
    /// Glorot-uniform weights in `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(config)?
            .into_iter()
            .map(|(name, shape, fan_in, fan_out)| {
                let n: usize = shape.iter().product();
                let data = if fan_in + fan_out == 0 {
                    vec![T::zero(); n]
                } else {
                    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.random_range(-s..=s))).collect()
                };
                (name, Tensor::from_parts(shape, data))
            })
            .collect();
        Ok(Self {
            tensors,
            version: 0,
        })
    }

    pub fn zeros(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let tensors = layout(config)?
            .into_iter()
            .map(|(name, shape, ..)| (name, Tensor::zeros(shape)))
            .collect();
        Ok(Self {
            tensors,
            version: 0,
        })
    }

    /// Rebuilds a set from stored tensors, checking them against `config`.
    pub fn from_tensors(
        config: &BackboneConfig,
        tensors: Vec<(String, Tensor<T>)>,
        version: u64,
    ) -> Result<Self> {
        let expected = layout(config)?;
        if expected.len() != tensors.len() {
            return Err(Error::Incompatible(format!(
                "config expects {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape, ..), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { tensors, version })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub(crate) fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i].1
    }

    pub(crate) fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i].1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Plain SGD: `w <- w - lr * grad`, one gradient slice per tensor in
    /// storage order. Increments the version counter.
    pub fn sgd_step(&mut self, grads: &[Vec<T>], lr: T) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), g) in self.tensors.iter_mut().zip(grads) {
            if g.len() != t.numel() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: t.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            debug_assert!(!name.is_empty());
            for (w, &d) in t.data_mut().iter_mut().zip(g) {
                *w = *w - lr * d;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Flattened copy of every parameter value in storage order.
    pub fn flat(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }
}

/// Role of a named parameter under `config`.
pub fn param_role(config: &BackboneConfig, name: &str) -> ParamRole {
    let layer = name.split('.').next().unwrap_or_default();
    if layer == "fcv" {
        return ParamRole::Verification;
    }
    if let Some(idx) = layer
        .strip_prefix("conv")
        .and_then(|s| s.parse::<usize>().ok())
    {
        if idx <= config.verification_tap_layer {
            return ParamRole::Shared;
        }
    }
    ParamRole::Identification
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::config::ConvSpec;

    #[test]
    fn init_is_seeded_and_bounded() {
        let c = BackboneConfig::vector_default(8);
        let a = ParameterSet::<f64>::init(&c, 3).unwrap();
        let b = ParameterSet::<f64>::init(&c, 3).unwrap();
        let d = ParameterSet::<f64>::init(&c, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
        let w = a.get("conv1.weight").unwrap();
        let s = (6.0f64 / (8.0 + 32.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= s));
        assert!(a
            .get("conv1.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn layout_names_and_roles() {
        let c = BackboneConfig {
            conv_specs: vec![ConvSpec::dense(4); 3],
            fc_dims: vec![],
            ..BackboneConfig::vector_default(2)
        };
        let p = ParameterSet::<f64>::zeros(&c).unwrap();
        let names: Vec<_> = p.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(
            names,
            [
                "conv1.weight",
                "conv1.bias",
                "conv2.weight",
                "conv2.bias",
                "conv3.weight",
                "conv3.bias",
                "fcv.weight",
                "fcv.bias",
                "head.weight",
                "head.bias"
            ]
        );
        assert_eq!(param_role(&c, "conv2.bias"), ParamRole::Shared);
        assert_eq!(param_role(&c, "conv3.weight"), ParamRole::Identification);
        assert_eq!(param_role(&c, "fcv.weight"), ParamRole::Verification);
        assert_eq!(param_role(&c, "head.bias"), ParamRole::Identification);
    }

    #[test]
    fn sgd_step_updates_and_versions() {
        let c = BackboneConfig::vector_default(2);
        let mut p = ParameterSet::<f64>::init(&c, 1).unwrap();
        let before = p.flat();
        let grads: Vec<Vec<f64>> = p.iter().map(|(_, t)| vec![1.0; t.numel()]).collect();
        p.sgd_step(&grads, 0.5).unwrap();
        assert_eq!(p.version(), 1);
        for (a, b) in before.iter().zip(p.flat()) {
            assert_eq!(b, a - 0.5);
        }
        assert!(p.sgd_step(&grads[1..], 0.5).is_err());
    }
}
