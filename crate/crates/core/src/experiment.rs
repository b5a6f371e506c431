//! Whole experiments: configuration documents, gradient checks and the
//! loss-mode by unit comparison grid.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    finite_difference_grad, max_relative_error, max_relative_error_with_floor, Graph, Tensor,
    DEFAULT_STEP,
};
use crate::backbone::{BackboneConfig, ConvSpec, InputShape, Network, ParameterSet};
use crate::data::{
    generate_synthetic, load_manifest, make_split, LabeledDataset, Split, SplitProtocol, SynthSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{cmc_curve, rank, EvalSummary, RankMode};
use crate::losses::{quartet_inside, quartet_loss, quartet_loss_grad, LossConfig};
use crate::sampler::{Sampler, Unit};
use crate::scalar::Scalar;
use crate::trainer::{batch_loss, LossMode, TrainConfig, Trainer};

/// One JSON document describing a run. Relative paths are resolved
/// against the directory holding the document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Dataset manifest.
    pub data: PathBuf,
    #[serde(default)]
    pub split: SplitProtocol,
    #[serde(default)]
    pub split_seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data = base.join(&cfg.data);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()
    }
}

/// Output of a [`run_gradcheck`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    /// Worst relative error of the analytic quartet gradient.
    pub quartet_worst: f64,
    /// Worst relative error of full-network parameter gradients.
    pub network_worst: f64,
    pub network_params: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.quartet_worst.max(self.network_worst)
    }
}

/// Tiny vector backbone used for full-network gradient checks.
pub fn gradcheck_backbone() -> BackboneConfig {
    BackboneConfig {
        input_shape: InputShape::Vector { dim: 6 },
        conv_specs: vec![ConvSpec::dense(10); 4],
        verification_tap_layer: 2,
        fcv_dim: 5,
        fc_dims: vec![6],
    }
}

/// Tiny image backbone with a pooled convolution.
pub fn gradcheck_image_backbone() -> BackboneConfig {
    BackboneConfig {
        input_shape: InputShape::Image {
            channels: 3,
            height: 8,
            width: 8,
        },
        conv_specs: vec![
            ConvSpec::new(3, 3, 1).with_pool(2),
            ConvSpec::new(4, 2, 1),
            ConvSpec::new(4, 1, 1),
        ],
        verification_tap_layer: 2,
        fcv_dim: 4,
        fc_dims: vec![4],
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// Worst relative error of [`quartet_loss_grad`] over `trials` random
/// quartets whose hinge is active, against central differences of the loss.
pub fn quartet_gradcheck(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < trials {
        let dim = rng.random_range(1..=8);
        let f: Vec<Tensor<f64>> = (0..4)
            .map(|_| random_tensor(&mut rng, vec![dim], 2.0))
            .collect();
        // keep away from the kink so both difference points are on the active side
        if quartet_inside(&f[0], &f[1], &f[2], &f[3])? <= cfg.margin + 1e-3 {
            continue;
        }
        let analytic = quartet_loss_grad(&f[0], &f[1], &f[2], &f[3], &cfg)?;
        for k in 0..4 {
            let numeric = finite_difference_grad(
                |x| {
                    let mut g = f.clone();
                    g[k] = x.clone();
                    Ok(quartet_loss(&g[0], &g[1], &g[2], &g[3], &cfg)?.value)
                },
                &f[k],
                DEFAULT_STEP,
            )?;
            worst = worst.max(max_relative_error(analytic[k].data(), numeric.data()));
        }
        done += 1;
    }
    Ok(worst)
}

/// Relative-error floor for full-network checks. Central differences of a
/// many-term batch loss carry rounding noise near 1e-10, so components
/// whose true gradient is zero are compared absolutely at this scale.
pub const NETWORK_FLOOR: f64 = 1e-5;

/// Worst relative error of autodiff parameter gradients of a full batch
/// objective against central differences, on a tiny backbone with
/// randomized biases (zero biases park dead units exactly on the ReLU kink).
pub fn network_gradcheck(
    backbone: &BackboneConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(f64, usize)> {
    let network = Network::new(backbone.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = match backbone.input_shape {
        InputShape::Vector { dim } => SynthSpec::vector(4, 3, dim),
        InputShape::Image { height, width, .. } => SynthSpec {
            shape: crate::data::SynthShape::Image { width, height },
            intra_class_stddev: 0.2,
            inter_class_separation: 0.5,
            ..SynthSpec::vector(4, 3, 1)
        },
    };
    spec.seed = seed;
    let ds: LabeledDataset<f64> = generate_synthetic(&spec)?;
    let mut params = ParameterSet::<f64>::init(backbone, seed)?;
    for i in 0..params.len() {
        for v in params.tensor_at_mut(i).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let mut sampler = Sampler::new(&ds, train.unit, seed, false)?;
    let units: Vec<Vec<usize>> = (0..train.batch_size).map(|_| sampler.next_unit()).collect();

    let mut g = Graph::new();
    let p = network.bind(&mut g, &params, true)?;
    let loss = batch_loss(&mut g, &network, &p, &ds, &units, train)?;
    g.backward(loss.total)?;
    let analytic: Vec<Vec<f64>> = p
        .ids()
        .iter()
        .map(|&id| g.grad(id).expect("grad").to_vec())
        .collect();

    let mut worst = 0.0f64;
    for (i, grad) in analytic.iter().enumerate() {
        let base = params.tensor_at(i).clone();
        let numeric = finite_difference_grad(
            |x| {
                let mut q = params.clone();
                *q.tensor_at_mut(i) = x.clone();
                let mut g = Graph::new();
                let p = network.bind(&mut g, &q, false)?;
                let l = batch_loss(&mut g, &network, &p, &ds, &units, train)?;
                Ok(g.value(l.total).item())
            },
            &base,
            DEFAULT_STEP,
        )?;
        worst = worst.max(max_relative_error_with_floor(
            grad,
            numeric.data(),
            NETWORK_FLOOR,
        ));
        *params.tensor_at_mut(i) = base;
    }
    Ok((worst, params.num_scalars()))
}

/// Analytic quartet gradients over `trials` cases plus full-network checks
/// (vector quartet, vector triplet, image quartet). Passes iff every error
/// is strictly below `tolerance`.
pub fn run_gradcheck(trials: usize, seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let quartet_worst = quartet_gradcheck(trials, seed)?;
    let joint = TrainConfig {
        batch_size: 3,
        loss: LossConfig {
            margin: 0.0,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let triplet = TrainConfig {
        unit: Unit::Triplet,
        ..joint.clone()
    };
    let (a, n) = network_gradcheck(&gradcheck_backbone(), &joint, seed)?;
    let (b, _) = network_gradcheck(&gradcheck_backbone(), &triplet, seed.wrapping_add(1))?;
    let (c, m) = network_gradcheck(&gradcheck_image_backbone(), &joint, seed.wrapping_add(2))?;
    let network_worst = a.max(b).max(c);
    Ok(GradcheckReport {
        trials,
        quartet_worst,
        network_worst,
        network_params: n.max(m),
        tolerance,
        passed: quartet_worst < tolerance && network_worst < tolerance,
    })
}

/// Ranking mode a loss mode's training optimises: the identification-only
/// objective never trains the fcV projection.
pub fn native_rank_mode(mode: LossMode) -> RankMode {
    match mode {
        LossMode::IdentificationOnly => RankMode::Similarity,
        _ => RankMode::Distance,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub unit: Unit,
    pub loss_mode: LossMode,
    pub rank_mode: RankMode,
    pub rank1: f64,
    pub rank5: Option<f64>,
    pub rank10: Option<f64>,
}

pub const GRID_UNITS: [Unit; 2] = [Unit::Triplet, Unit::Quartet];
pub const GRID_MODES: [LossMode; 3] = [
    LossMode::VerificationOnly,
    LossMode::IdentificationOnly,
    LossMode::Joint,
];

/// Trains one model per (unit, loss mode) cell on `split.train` and scores
/// it on `split.eval` in its native ranking mode. Rows are ordered unit-major.
pub fn run_compare<T: Scalar>(
    ds: &LabeledDataset<T>,
    split: &Split,
    backbone: &BackboneConfig,
    base: &TrainConfig,
) -> Result<Vec<CompareRow>> {
    let train_ds = ds.subset(&split.train);
    let network = Network::new(backbone.clone())?;
    let mut rows = Vec::new();
    for unit in GRID_UNITS {
        for loss_mode in GRID_MODES {
            let cfg = TrainConfig {
                unit,
                loss_mode,
                ..base.clone()
            };
            let mut t = Trainer::new(&train_ds, backbone.clone(), cfg)?;
            t.run(&Default::default())?;
            let rank_mode = native_rank_mode(loss_mode);
            let curve = cmc_curve(&rank(&network, t.params(), ds, &split.eval, rank_mode)?)?;
            let s = EvalSummary::new(&curve, rank_mode);
            rows.push(CompareRow {
                unit,
                loss_mode,
                rank_mode,
                rank1: s.rank1,
                rank5: s.rank5,
                rank10: s.rank10,
            });
        }
    }
    Ok(rows)
}

fn name<S: Serialize>(v: &S) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("unit,loss_mode,rank_mode,rank1,rank5,rank10\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            name(&r.unit),
            name(&r.loss_mode),
            name(&r.rank_mode),
            r.rank1,
            cell(r.rank5),
            cell(r.rank10)
        )
        .expect("writing to a string");
    }
    s
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
    let mut s = format!(
        "{:<8} {:<20} {:<10} {:>6} {:>6} {:>6}\n",
        "unit", "loss", "ranking", "r1", "r5", "r10"
    );
    for r in rows {
        writeln!(
            s,
            "{:<8} {:<20} {:<10} {:>6} {:>6} {:>6}",
            name(&r.unit),
            name(&r.loss_mode),
            name(&r.rank_mode),
            pct(Some(r.rank1)),
            pct(r.rank5),
            pct(r.rank10)
        )
        .expect("writing to a string");
    }
    s
}

/// Loads the configured manifest and makes the configured split.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset<f64>, Split)> {
    let ds = load_manifest(&cfg.data)?;
    let split = make_split(&ds, cfg.split, cfg.split_seed)?;
    Ok((ds, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_resolves_paths() {
        let doc = r#"{
            "backbone": {"input_shape": {"vector": {"dim": 4}},
                         "conv_specs": [{"out_channels": 4, "kernel": 1, "stride": 1}],
                         "verification_tap_layer": 1, "fcV_dim": 2, "fc_dims": []},
            "train": {"iterations": 2, "batch_size": 2},
            "data": "d/manifest.json",
            "output_dir": "out"
        }"#;
        let cfg = ExperimentConfig::from_json(doc).unwrap();
        assert_eq!(cfg.train.iterations, 2);
        assert_eq!(cfg.split, SplitProtocol::HalfIdentities);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        std::fs::write(&path, doc).unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(loaded.data, dir.path().join("d/manifest.json"));

        let bad = doc.replace("\"output_dir\"", "\"outptu_dir\"");
        let err = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("outptu_dir"), "{err}");
        let bad = doc.replace("\"batch_size\": 2", "\"batch_size\": 0");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }

    #[test]
    fn gradcheck_passes_and_is_deterministic() {
        let a = run_gradcheck(50, 3, 1e-4).unwrap();
        assert!(a.passed, "{a:?}");
        assert!(a.quartet_worst < 1e-6);
        assert!(a.network_params <= 5000);
        assert_eq!(a, run_gradcheck(50, 3, 1e-4).unwrap());
        assert!(!run_gradcheck(5, 3, 0.0).unwrap().passed);
    }

    #[test]
    fn compare_grid_shape() {
        let ds: LabeledDataset<f64> = generate_synthetic(&SynthSpec::vector(8, 4, 4)).unwrap();
        let split = make_split(&ds, SplitProtocol::HalfIdentities, 0).unwrap();
        let base = TrainConfig {
            iterations: 3,
            batch_size: 2,
            ..TrainConfig::desk()
        };
        let rows = run_compare(&ds, &split, &BackboneConfig::vector_default(4), &base).unwrap();
        assert_eq!(rows.len(), 6);
        let csv = compare_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv
            .lines()
            .nth(2)
            .unwrap()
            .starts_with("triplet,identification_only,similarity,"));
        assert_eq!(compare_table(&rows).lines().count(), 7);
        assert_eq!(
            rows,
            run_compare(&ds, &split, &BackboneConfig::vector_default(4), &base).unwrap()
        );
    }
}
