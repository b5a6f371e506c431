//! Triplet, quartet and pair-identification losses.
//!
//! The quartet hinge's inner term counts the positive pair twice, once
//! against each negative pair:
//!
//! ```text
//! inside = 2 |f1 - f2|^2 - |f1 - f3|^2 - |f4 - f3|^2
//! ```
//!
//! Under the literal convention the loss is `max(inside, margin)`, whose
//! floor is the margin itself; the standard hinge is `max(inside - margin, 0)`.
//! Since `max(x, m) = max(x - m, 0) + m` the two differ by exactly `margin`
//! and share gradients everywhere.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HingeConvention {
    /// `max(inside, margin)`
    #[default]
    LiteralMaxWithMargin,
    /// `max(inside - margin, 0)`
    StandardHinge,
}

fn default_margin() -> f64 {
    0.5
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Weight of the mean identification loss in the joint objective.
    #[serde(default = "default_lambda")]
    pub lambda_id: f64,
    #[serde(default)]
    pub hinge_convention: HingeConvention,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: default_margin(),
            lambda_id: default_lambda(),
            hinge_convention: HingeConvention::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        if !(self.lambda_id >= 0.0 && self.lambda_id.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_id must be >= 0, got {}",
                self.lambda_id
            )));
        }
        Ok(())
    }

    fn hinge<T: Scalar>(&self, inside: T) -> T {
        let m = T::lit(self.margin);
        match self.hinge_convention {
            HingeConvention::LiteralMaxWithMargin => inside.max(m),
            HingeConvention::StandardHinge => (inside - m).max(T::zero()),
        }
    }

    fn is_active<T: Scalar>(&self, inside: T) -> bool {
        inside > T::lit(self.margin)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    /// The hinge's inner term before comparison with the margin.
    pub inside: T,
    /// Gradient with respect to each embedding, in argument order.
    pub grads: Vec<Tensor<T>>,
    pub active: bool,
}

fn check_shapes<T: Scalar>(op: &'static str, fs: &[&Tensor<T>]) -> Result<()> {
    for f in &fs[1..] {
        if f.shape() != fs[0].shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: fs[0].shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn sq_dist<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// `sum_k c_k (a_k - b_k)` element-wise, as a tensor shaped like `a_0`.
fn combo<T: Scalar>(terms: &[(f64, &Tensor<T>, &Tensor<T>)]) -> Tensor<T> {
    let shape = terms[0].1.shape().to_vec();
    let n = terms[0].1.numel();
    let data = (0..n)
        .map(|i| {
            terms
                .iter()
                .map(|&(c, a, b)| T::lit(c) * (a.data()[i] - b.data()[i]))
                .sum()
        })
        .collect();
    Tensor::from_parts(shape, data)
}

/// Hinge over `|f1 - f2|^2 - |f1 - f3|^2`.
pub fn triplet_loss<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    f3: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    check_shapes("triplet_loss", &[f1, f2, f3])?;
    let inside = sq_dist(f1, f2) - sq_dist(f1, f3);
    let active = cfg.is_active(inside);
    let grads = if active {
        vec![
            combo(&[(2.0, f3, f2)]),
            combo(&[(-2.0, f1, f2)]),
            combo(&[(2.0, f1, f3)]),
        ]
    } else {
        vec![Tensor::zeros(f1.shape().to_vec()); 3]
    };
    Ok(LossOutput {
        value: cfg.hinge(inside),
        inside,
        grads,
        active,
    })
}

/// Inner term `2|f1 - f2|^2 - |f1 - f3|^2 - |f4 - f3|^2`.
pub fn quartet_inside<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    f3: &Tensor<T>,
    f4: &Tensor<T>,
) -> Result<T> {
    check_shapes("quartet_loss", &[f1, f2, f3, f4])?;
    Ok(T::lit(2.0) * sq_dist(f1, f2) - sq_dist(f1, f3) - sq_dist(f4, f3))
}

pub fn quartet_loss<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    f3: &Tensor<T>,
    f4: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    let inside = quartet_inside(f1, f2, f3, f4)?;
    let active = cfg.is_active(inside);
    Ok(LossOutput {
        value: cfg.hinge(inside),
        inside,
        grads: quartet_loss_grad(f1, f2, f3, f4, cfg)?.to_vec(),
        active,
    })
}

/// Analytic embedding-level gradient of the quartet loss. On the active side:
///
/// ```text
/// d/df1 = 4(f1 - f2) - 2(f1 - f3)
/// d/df2 = -4(f1 - f2)
/// d/df3 = 2(f1 - f3) + 2(f4 - f3)
/// d/df4 = -2(f4 - f3)
/// ```
///
/// and zero when the hinge is flat.
pub fn quartet_loss_grad<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    f3: &Tensor<T>,
    f4: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<[Tensor<T>; 4]> {
    let inside = quartet_inside(f1, f2, f3, f4)?;
    if !cfg.is_active(inside) {
        let z = Tensor::zeros(f1.shape().to_vec());
        return Ok([z.clone(), z.clone(), z.clone(), z]);
    }
    Ok([
        combo(&[(4.0, f1, f2), (-2.0, f1, f3)]),
        combo(&[(-4.0, f1, f2)]),
        combo(&[(2.0, f1, f3), (2.0, f4, f3)]),
        combo(&[(-2.0, f4, f3)]),
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentificationLoss<T> {
    pub value: T,
    /// Gradient with respect to the pre-softmax logits, `p - onehot(label)`.
    pub logit_grad: Tensor<T>,
}

/// Binary cross-entropy `-ln p_label` on a two-way probability vector.
pub fn identification_loss<T: Scalar>(
    prob: &Tensor<T>,
    label: usize,
) -> Result<IdentificationLoss<T>> {
    if label > 1 {
        return Err(Error::InvalidLabel(label));
    }
    let p = prob.data();
    let valid = p.len() == 2
        && p.iter().all(|&v| v >= T::zero() && v <= T::one())
        && (p[0] + p[1] - T::one()).abs() <= T::lit(1e-6);
    if !valid {
        return Err(Error::InvalidShape {
            op: "identification_loss",
            msg: format!("expected a two-way probability vector, got {p:?}"),
        });
    }
    let value = -p[label].max(T::lit(PROB_FLOOR)).ln();
    let mut grad = p.to_vec();
    grad[label] = grad[label] - T::one();
    Ok(IdentificationLoss {
        value,
        logit_grad: Tensor::from_parts(vec![2], grad),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLoss<T> {
    pub value: T,
    pub verification: T,
    /// Mean over the pairs.
    pub identification: T,
    pub active: bool,
}

/// `quartet_loss + lambda_id * mean(identification losses)` for one quartet.
pub fn joint_loss<T: Scalar>(
    embeddings: [&Tensor<T>; 4],
    pair_probs: [&Tensor<T>; 3],
    labels: [usize; 3],
    cfg: &LossConfig,
) -> Result<JointLoss<T>> {
    let [f1, f2, f3, f4] = embeddings;
    let ver = quartet_loss(f1, f2, f3, f4, cfg)?;
    let mut id = T::zero();
    for (p, &l) in pair_probs.iter().zip(&labels) {
        id = id + identification_loss(p, l)?.value;
    }
    let id = id / T::lit(3.0);
    Ok(JointLoss {
        value: ver.value + T::lit(cfg.lambda_id) * id,
        verification: ver.value,
        identification: id,
        active: ver.active,
    })
}

/// Per-row hinge over a batch inner-term node `[n]`.
pub fn hinge_node<T: Scalar>(g: &mut Graph<T>, inside: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let m = T::lit(cfg.margin);
    match cfg.hinge_convention {
        HingeConvention::LiteralMaxWithMargin => g.clamp_min(inside, m),
        HingeConvention::StandardHinge => {
            let shifted = g.add_scalar(inside, -m)?;
            g.clamp_min(shifted, T::zero())
        }
    }
}

/// Quartet inner terms for batched embeddings `[n, d]`; returns `[n]`.
pub fn quartet_inside_node<T: Scalar>(g: &mut Graph<T>, e: [NodeId; 4]) -> Result<NodeId> {
    let d12 = g.row_squared_distance(e[0], e[1])?;
    let d13 = g.row_squared_distance(e[0], e[2])?;
    let d43 = g.row_squared_distance(e[3], e[2])?;
    let pos = g.scalar_mul(d12, T::lit(2.0))?;
    let t = g.sub(pos, d13)?;
    g.sub(t, d43)
}

/// Triplet inner terms for batched embeddings `[n, d]`; returns `[n]`.
pub fn triplet_inside_node<T: Scalar>(g: &mut Graph<T>, e: [NodeId; 3]) -> Result<NodeId> {
    let d12 = g.row_squared_distance(e[0], e[1])?;
    let d13 = g.row_squared_distance(e[0], e[2])?;
    g.sub(d12, d13)
}

/// Per-row `-ln max(softmax(logits)[label], PROB_FLOOR)`; returns `[n]`.
pub fn identification_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidLabel(bad));
    }
    let probs = g.softmax(logits)?;
    let picked = g.pick(probs, labels)?;
    let floored = g.clamp_min(picked, T::lit(PROB_FLOOR))?;
    let lp = g.log(floored)?;
    g.neg(lp)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::{finite_difference_grad, max_relative_error, DEFAULT_STEP};

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::vector(x)
    }

    fn cfg(m: f64, conv: HingeConvention) -> LossConfig {
        LossConfig {
            margin: m,
            lambda_id: 1.0,
            hinge_convention: conv,
        }
    }

    const LIT: HingeConvention = HingeConvention::LiteralMaxWithMargin;
    const STD: HingeConvention = HingeConvention::StandardHinge;

    #[test]
    fn triplet_hand_cases() {
        let c = cfg(0.5, LIT);
        let out = triplet_loss(&v(&[0.0]), &v(&[1.0]), &v(&[3.0]), &c).unwrap();
        assert_eq!(out.value, 0.5);
        assert!(!out.active);
        let out = triplet_loss(&v(&[0.0]), &v(&[2.0]), &v(&[1.0]), &c).unwrap();
        assert_eq!(out.value, 3.0);
        assert!(out.active);
        let x = v(&[1.5, -2.0]);
        let out = triplet_loss(&x, &x, &x, &c).unwrap();
        assert_eq!(out.value, 0.5);
        assert!(!out.active);
    }

    #[test]
    fn quartet_hand_cases() {
        let c = cfg(0.5, LIT);
        let out = quartet_loss(&v(&[0.0]), &v(&[1.0]), &v(&[3.0]), &v(&[5.0]), &c).unwrap();
        assert_eq!(out.inside, -11.0);
        assert_eq!(out.value, 0.5);
        assert!(!out.active);
        assert!(out.grads.iter().all(|g| g.data() == [0.0]));

        let out = quartet_loss(&v(&[0.0]), &v(&[2.0]), &v(&[1.0]), &v(&[1.5]), &c).unwrap();
        assert_eq!(out.inside, 6.75);
        assert_eq!(out.value, 6.75);
        assert!(out.active);
        let g: Vec<f64> = out.grads.iter().map(|t| t.data()[0]).collect();
        assert_eq!(g, [-6.0, 8.0, -1.0, -1.0]);

        let f1 = v(&[0.3, 0.1]);
        let out = quartet_loss(&f1, &f1, &v(&[1.0, 2.0]), &v(&[-1.0, 0.5]), &c).unwrap();
        assert!(out.inside <= 0.0);
        assert_eq!(out.value, 0.5);
        assert!(!out.active);
    }

    #[test]
    fn shape_mismatch() {
        let c = LossConfig::default();
        assert!(triplet_loss(&v(&[0.0]), &v(&[1.0, 2.0]), &v(&[0.0]), &c).is_err());
        assert!(
            quartet_loss_grad(&v(&[0.0]), &v(&[1.0]), &v(&[0.0]), &v(&[1.0, 1.0]), &c).is_err()
        );
    }

    #[test]
    fn identification_cases() {
        let l = identification_loss(&v(&[0.5, 0.5]), 1).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        let l = identification_loss(&v(&[0.1, 0.9]), 1).unwrap();
        assert!((l.value - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert_eq!(l.logit_grad.data(), &[0.1, 0.9 - 1.0]);
        let l = identification_loss(&v(&[1e-15, 1.0 - 1e-15]), 1).unwrap();
        assert!(l.value < 1e-12);
        let l = identification_loss(&v(&[1.0, 0.0]), 1).unwrap();
        assert!((l.value - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(matches!(
            identification_loss(&v(&[0.5, 0.5]), 2),
            Err(Error::InvalidLabel(2))
        ));
        assert!(identification_loss(&v(&[0.7, 0.7]), 0).is_err());
    }

    #[test]
    fn identification_logit_gradient_matches_graph() {
        let logits = Tensor::<f64>::new(vec![1, 2], vec![0.3, -1.1]).unwrap();
        for label in 0..2 {
            let mut g = Graph::new();
            let x = g.param(logits.clone());
            let l = identification_node(&mut g, x, &[label]).unwrap();
            let s = g.sum(l).unwrap();
            g.backward(s).unwrap();
            let mut h = Graph::new();
            let y = h.constant(logits.clone());
            let p = h.softmax(y).unwrap();
            let direct = identification_loss(&h.value(p).row(0), label).unwrap();
            assert!((g.value(s).item() - direct.value).abs() < 1e-14);
            assert!(max_relative_error(g.grad(x).unwrap(), direct.logit_grad.data()) < 1e-12);
        }
    }

    #[test]
    fn joint_reductions() {
        let e = [v(&[0.0]), v(&[2.0]), v(&[1.0]), v(&[1.5])];
        let er = [&e[0], &e[1], &e[2], &e[3]];
        let probs = [v(&[0.2, 0.8]), v(&[0.6, 0.4]), v(&[0.3, 0.7])];
        let pr = [&probs[0], &probs[1], &probs[2]];
        let mut c = cfg(0.5, LIT);
        c.lambda_id = 0.0;
        let j = joint_loss(er, pr, [1, 0, 0], &c).unwrap();
        assert_eq!(
            j.value,
            quartet_loss(er[0], er[1], er[2], er[3], &c).unwrap().value
        );

        c.lambda_id = 0.7;
        let hand = 6.75 + 0.7 * (-(0.8f64.ln()) - 0.6f64.ln() - 0.3f64.ln()) / 3.0;
        let j = joint_loss(er, pr, [1, 0, 0], &c).unwrap();
        assert!((j.value - hand).abs() < 1e-12);

        let easy = [v(&[0.0]), v(&[0.0]), v(&[5.0]), v(&[-5.0])];
        let perfect = [v(&[0.0, 1.0]), v(&[1.0, 0.0]), v(&[1.0, 0.0])];
        let j = joint_loss(
            [&easy[0], &easy[1], &easy[2], &easy[3]],
            [&perfect[0], &perfect[1], &perfect[2]],
            [1, 0, 0],
            &c,
        )
        .unwrap();
        assert_eq!(j.value, 0.5);
    }

    fn arb_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, d)
    }

    fn quartet_value(fs: &[Tensor<f64>; 4], c: &LossConfig) -> f64 {
        quartet_loss(&fs[0], &fs[1], &fs[2], &fs[3], c)
            .unwrap()
            .value
    }

    proptest! {
        #[test]
        fn translation_invariance(a in arb_vec(3), b in arb_vec(3), c in arb_vec(3), d in arb_vec(3), t in arb_vec(3)) {
            let cf = cfg(0.5, LIT);
            let f = [v(&a), v(&b), v(&c), v(&d)];
            let sh = |x: &Vec<f64>| v(&x.iter().zip(&t).map(|(p, q)| p + q).collect::<Vec<_>>());
            let g = [sh(&a), sh(&b), sh(&c), sh(&d)];
            prop_assert!((quartet_value(&f, &cf) - quartet_value(&g, &cf)).abs() < 1e-9);
            let tr = triplet_loss(&f[0], &f[1], &f[2], &cf).unwrap().value;
            let tg = triplet_loss(&g[0], &g[1], &g[2], &cf).unwrap().value;
            prop_assert!((tr - tg).abs() < 1e-9);
        }

        #[test]
        fn anchor_reuse_degenerates_to_doubled_triplet(a in arb_vec(4), b in arb_vec(4), c in arb_vec(4)) {
            let (f1, f2, f3) = (v(&a), v(&b), v(&c));
            let q = quartet_inside(&f1, &f2, &f3, &f1).unwrap();
            let t = triplet_loss(&f1, &f2, &f3, &LossConfig::default()).unwrap().inside;
            prop_assert!((q - 2.0 * t).abs() < 1e-9);
        }

        #[test]
        fn conventions_differ_by_margin_structure(a in arb_vec(2), b in arb_vec(2), c in arb_vec(2), d in arb_vec(2), m in 0.0f64..2.0) {
            let f = [v(&a), v(&b), v(&c), v(&d)];
            let lit = quartet_loss(&f[0], &f[1], &f[2], &f[3], &cfg(m, LIT)).unwrap();
            let std = quartet_loss(&f[0], &f[1], &f[2], &f[3], &cfg(m, STD)).unwrap();
            prop_assert!((lit.value - (std.value + m)).abs() < 1e-12);
            prop_assert_eq!(std.value, (lit.inside - m).max(0.0));
            prop_assert!(lit.value >= m);
            prop_assert!(std.value >= 0.0);
            prop_assert_eq!(lit.active, std.active);
            for (x, y) in lit.grads.iter().zip(&std.grads) {
                prop_assert_eq!(x.data(), y.data());
            }
        }

        #[test]
        fn analytic_matches_autodiff(a in arb_vec(3), b in arb_vec(3), c in arb_vec(3), d in arb_vec(3)) {
            for conv in [LIT, STD] {
                let cf = cfg(0.5, conv);
                let f = [v(&a), v(&b), v(&c), v(&d)];
                let analytic = quartet_loss_grad(&f[0], &f[1], &f[2], &f[3], &cf).unwrap();
                let mut g = Graph::new();
                let ids: Vec<_> = f.iter().map(|t| g.param(t.reshape(vec![1, 3]).unwrap())).collect();
                let inside = quartet_inside_node(&mut g, [ids[0], ids[1], ids[2], ids[3]]).unwrap();
                let h = hinge_node(&mut g, inside, &cf).unwrap();
                let s = g.sum(h).unwrap();
                g.backward(s).unwrap();
                prop_assert!((g.value(s).item() - quartet_value(&f, &cf)).abs() < 1e-12);
                for (id, an) in ids.iter().zip(&analytic) {
                    for (x, y) in g.grad(*id).unwrap().iter().zip(an.data()) {
                        prop_assert!((x - y).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn analytic_matches_finite_differences(a in arb_vec(3), b in arb_vec(3), c in arb_vec(3), d in arb_vec(3)) {
            let cf = cfg(0.0, LIT);
            let f = [v(&a), v(&b), v(&c), v(&d)];
            let inside = quartet_inside(&f[0], &f[1], &f[2], &f[3]).unwrap();
            prop_assume!(inside > 1e-2);
            let analytic = quartet_loss_grad(&f[0], &f[1], &f[2], &f[3], &cf).unwrap();
            for k in 0..4 {
                let numeric = finite_difference_grad(|x| {
                    let mut g = f.clone();
                    g[k] = x.clone();
                    Ok(quartet_value(&g, &cf))
                }, &f[k], DEFAULT_STEP).unwrap();
                prop_assert!(max_relative_error(analytic[k].data(), numeric.data()) < 1e-6);
            }
        }
    }
}
