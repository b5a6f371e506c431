use serde::{Deserialize, Serialize};

use super::config::BackboneConfig;
use super::params::{layout, ParameterSet};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which stream pairs of a quartet are fed to the identification head.
/// The positive pair `(a1, a2)` is always first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePairs {
    /// `(a1, a3)` and `(a3, a4)`, the same relations the quartet loss uses.
    #[default]
    Chained,
    /// `(a1, a3)` and `(a1, a4)`.
    AnchorOnly,
}

impl NegativePairs {
    /// `(stream_i, stream_j, same_identity)` for the three quartet pairs.
    pub fn quartet_pairs(self) -> [(usize, usize, bool); 3] {
        match self {
            NegativePairs::Chained => [(0, 1, true), (0, 2, false), (2, 3, false)],
            NegativePairs::AnchorOnly => [(0, 1, true), (0, 2, false), (0, 3, false)],
        }
    }
}

/// Pairs used for triplet units: `(a1, a2)` same, `(a1, a3)` different.
pub const TRIPLET_PAIRS: [(usize, usize, bool); 2] = [(0, 1, true), (0, 2, false)];

/// Parameter tensors inserted into a graph, in storage order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Outputs of one quartet pass through the shared network.
#[derive(Clone, Debug, PartialEq)]
pub struct FourStreamOutput<T> {
    pub embeddings: [Tensor<T>; 4],
    /// Two-way probabilities per pair, index 1 = same person.
    pub pair_probs: [Tensor<T>; 3],
}

/// The shared-weight network. Streams are positions in a batch: every
/// input row goes through the same parameter nodes.
#[derive(Clone, Debug)]
pub struct Network {
    config: BackboneConfig,
    shapes: Vec<Vec<usize>>,
    param_shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.activation_shapes()?;
        let param_shapes = layout(&config)?.into_iter().map(|(_, s, ..)| s).collect();
        Ok(Self {
            config,
            shapes,
            param_shapes,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Per-sample shape of the verification tap activation.
    pub fn tap_shape(&self) -> &[usize] {
        &self.shapes[self.config.verification_tap_layer]
    }

    /// Inserts every parameter tensor as a leaf. `trainable` decides
    /// whether they receive gradients.
    pub fn bind<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParameterSet<T>,
        trainable: bool,
    ) -> Result<BoundParams> {
        self.check_params(params)?;
        let ids = (0..params.len())
            .map(|i| {
                let t = params.tensor_at(i).detached();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Ok(BoundParams { ids })
    }

    fn check_params<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<()> {
        let ok = params.len() == self.param_shapes.len()
            && (0..params.len()).all(|i| params.tensor_at(i).shape() == self.param_shapes[i]);
        if ok {
            Ok(())
        } else {
            Err(Error::Incompatible(
                "parameter set does not match backbone config".into(),
            ))
        }
    }

    /// Stacks samples into a `[n, ...input]` batch, checking each shape.
    pub fn input_batch<T: Scalar>(&self, samples: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let want = self.config.input_shape.dims();
        for s in samples {
            if s.shape() != want {
                return Err(Error::ShapeMismatch {
                    op: "backbone input",
                    lhs: want,
                    rhs: s.shape().to_vec(),
                });
            }
        }
        Tensor::stack(samples)
    }

    fn layer<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        layer: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let spec = self.config.conv_specs[layer];
        let (w, b) = (p.ids[2 * layer], p.ids[2 * layer + 1]);
        let h = if self.config.input_shape.is_vector() {
            let h = g.matmul(x, w)?;
            g.add_bias(h, b)?
        } else {
            g.conv2d(x, w, b, spec.stride)?
        };
        let h = g.relu(h)?;
        if spec.pool > 1 {
            g.max_pool2d(h, spec.pool)
        } else {
            Ok(h)
        }
    }

    fn linear<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        at: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = g.matmul(x, p.ids[at])?;
        g.add_bias(h, p.ids[at + 1])
    }

    /// Shared layers `1..=tap` on a `[n, ...input]` batch node.
    pub fn trunk<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in 0..self.config.verification_tap_layer {
            h = self.layer(g, p, layer, h)?;
        }
        Ok(h)
    }

    /// fcV projection of tap activations: `[n, fcV_dim]`.
    pub fn verification_from_tap<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        tap: NodeId,
    ) -> Result<NodeId> {
        let flat = g.flatten(tap)?;
        self.linear(g, p, 2 * self.config.conv_specs.len(), flat)
    }

    /// Pair fusion `|tap_a - tap_b|` followed by the identification-only
    /// layers. Returns `[n, 2]` logits.
    pub fn identification_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        tap_a: NodeId,
        tap_b: NodeId,
    ) -> Result<NodeId> {
        let diff = g.sub(tap_a, tap_b)?;
        let mut h = g.abs(diff)?;
        let n_conv = self.config.conv_specs.len();
        for layer in self.config.verification_tap_layer..n_conv {
            h = self.layer(g, p, layer, h)?;
        }
        h = g.flatten(h)?;
        let mut at = 2 * n_conv + 2;
        for _ in &self.config.fc_dims {
            h = self.linear(g, p, at, h)?;
            h = g.relu(h)?;
            at += 2;
        }
        self.linear(g, p, at, h)
    }

    /// Verification embedding of one sample.
    pub fn embed_verification<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        sample: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let e = self.embed_batch(params, &[sample])?;
        Ok(e.row(0))
    }

    /// Verification embeddings of many samples as `[n, fcV_dim]`.
    pub fn embed_batch<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        samples: &[&Tensor<T>],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params, false)?;
        let x = g.constant(self.input_batch(samples)?);
        let tap = self.trunk(&mut g, &p, x)?;
        let e = self.verification_from_tap(&mut g, &p, tap)?;
        Ok(g.value(e).detached())
    }

    /// Tap activations of many samples as `[n, ...tap]`.
    pub fn tap_batch<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        samples: &[&Tensor<T>],
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params, false)?;
        let x = g.constant(self.input_batch(samples)?);
        let tap = self.trunk(&mut g, &p, x)?;
        Ok(g.value(tap).detached())
    }

    /// Two-way probabilities `[n, 2]` from precomputed tap activations.
    pub fn similarity_from_taps<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        taps_a: Tensor<T>,
        taps_b: Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params, false)?;
        let a = g.constant(taps_a);
        let b = g.constant(taps_b);
        let logits = self.identification_logits(&mut g, &p, a, b)?;
        let probs = g.softmax(logits)?;
        Ok(g.value(probs).detached())
    }

    /// Similarity probabilities of one pair; index 1 = same person.
    pub fn identification_head<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let taps = self.tap_batch(params, &[a, b])?;
        let probs = self.similarity_from_taps(
            params,
            taps.row(0).reshape(prepend_one(self.tap_shape()))?,
            taps.row(1).reshape(prepend_one(self.tap_shape()))?,
        )?;
        Ok(probs.row(0))
    }

    /// One quartet through the shared network: four fcV embeddings plus
    /// the three identification pair probabilities.
    pub fn four_stream_forward<T: Scalar>(
        &self,
        params: &ParameterSet<T>,
        streams: [&Tensor<T>; 4],
        pairs: NegativePairs,
    ) -> Result<FourStreamOutput<T>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, params, false)?;
        let x = g.constant(self.input_batch(&streams)?);
        let tap = self.trunk(&mut g, &p, x)?;
        let emb = self.verification_from_tap(&mut g, &p, tap)?;
        let taps: Vec<NodeId> = (0..4)
            .map(|i| g.slice_rows(tap, i, i + 1))
            .collect::<Result<_>>()?;
        let mut probs = Vec::with_capacity(3);
        for (i, j, _) in pairs.quartet_pairs() {
            let logits = self.identification_logits(&mut g, &p, taps[i], taps[j])?;
            let pr = g.softmax(logits)?;
            probs.push(g.value(pr).row(0));
        }
        let e = g.value(emb);
        Ok(FourStreamOutput {
            embeddings: [e.row(0), e.row(1), e.row(2), e.row(3)],
            pair_probs: probs.try_into().expect("three pairs"),
        })
    }
}

fn prepend_one(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}
