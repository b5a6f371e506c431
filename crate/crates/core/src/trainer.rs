//! Plain SGD over quartet or triplet batches.
//!
//! Each iteration draws `batch_size` units from the sampler, pushes every
//! stream of every unit through one shared-parameter graph, and applies
//! `w <- w - lr * grad` with the exact autodiff gradient of the batch loss.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{
    load_checkpoint, save_checkpoint, BackboneConfig, BoundParams, Checkpoint, NegativePairs,
    Network, ParameterSet, TrainState, TRIPLET_PAIRS,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{
    hinge_node, identification_node, quartet_inside_node, triplet_inside_node, LossConfig,
};
use crate::sampler::{Sampler, Unit};
use crate::scalar::Scalar;

/// Added to the training seed to seed the sampler, so that parameter
/// initialisation and unit selection draw from unrelated streams.
const SAMPLER_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    VerificationOnly,
    IdentificationOnly,
    #[default]
    Joint,
}

impl LossMode {
    pub fn uses_verification(self) -> bool {
        self != LossMode::IdentificationOnly
    }

    pub fn uses_identification(self) -> bool {
        self != LossMode::VerificationOnly
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    128
}
fn default_iterations() -> u64 {
    30_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub loss_mode: LossMode,
    #[serde(default)]
    pub unit: Unit,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Total iteration count; a resumed run stops at the same total.
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub negative_pairs: NegativePairs,
    #[serde(default)]
    pub cross_camera_positives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::default(),
            unit: Unit::default(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            iterations: default_iterations(),
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            negative_pairs: NegativePairs::default(),
            cross_camera_positives: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: lr 1e-4, batch 128, 30k iterations.
    pub fn full_scale() -> Self {
        Self::default()
    }

    /// Desk-scale settings: batch 16, 2000 iterations, lr 0.01.
    pub fn desk() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 16,
            iterations: 2000,
            ..Self::default()
        }
    }

    /// A zero learning rate is accepted so that a run can be replayed
    /// without updates.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        self.loss.validate()
    }

    /// Whether a run under `self` may continue one started under `other`:
    /// everything except the iteration budget and checkpoint cadence must match.
    pub fn check_resumable(&self, other: &TrainConfig) -> Result<()> {
        let strip = |c: &TrainConfig| TrainConfig {
            iterations: 1,
            checkpoint_every: 0,
            ..c.clone()
        };
        if strip(self) != strip(other) {
            return Err(Error::Incompatible(format!(
                "training config differs from the checkpoint's: {} vs {}",
                serde_json::to_string(self)?,
                serde_json::to_string(other)?
            )));
        }
        Ok(())
    }
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: u64,
    /// Batch verification loss under the configured hinge convention.
    pub verification: Option<f64>,
    pub verification_literal: Option<f64>,
    pub verification_standard: Option<f64>,
    pub identification: Option<f64>,
    pub total: f64,
    pub hinge_active_fraction: Option<f64>,
    /// Seconds since the run (or resumed segment) started.
    pub wall_time: f64,
}

/// Scalar nodes of one batch objective.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: NodeId,
    pub verification: Option<NodeId>,
    pub inside: Option<NodeId>,
    pub identification: Option<NodeId>,
}

/// Builds the batch objective for `units` (stream indices into `ds`).
///
/// Rows are laid out stream-major: all first streams, then all second
/// streams, and so on, so each stream is a contiguous row block.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    network: &Network,
    p: &BoundParams,
    ds: &LabeledDataset<T>,
    units: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let b = units.len();
    let s = cfg.unit.streams();
    if b == 0 || units.iter().any(|u| u.len() != s) {
        return Err(Error::Config(format!(
            "batch units must each hold {s} samples"
        )));
    }
    let rows: Vec<_> = (0..s)
        .flat_map(|k| units.iter().map(move |u| u[k]))
        .map(|i| ds.payload(i))
        .collect();
    let x = g.constant(network.input_batch(&rows)?);
    let tap = network.trunk(g, p, x)?;
    let block = |g: &mut Graph<T>, node: NodeId, k: usize| g.slice_rows(node, k * b, (k + 1) * b);

    let mut verification = None;
    let mut inside = None;
    if cfg.loss_mode.uses_verification() {
        let emb = network.verification_from_tap(g, p, tap)?;
        let e: Vec<NodeId> = (0..s).map(|k| block(g, emb, k)).collect::<Result<_>>()?;
        let ins = match cfg.unit {
            Unit::Quartet => quartet_inside_node(g, [e[0], e[1], e[2], e[3]])?,
            Unit::Triplet => triplet_inside_node(g, [e[0], e[1], e[2]])?,
        };
        let h = hinge_node(g, ins, &cfg.loss)?;
        verification = Some(g.mean(h)?);
        inside = Some(ins);
    }

    let mut identification = None;
    if cfg.loss_mode.uses_identification() {
        let pairs: &[(usize, usize, bool)] = match cfg.unit {
            Unit::Quartet => &cfg.negative_pairs.quartet_pairs(),
            Unit::Triplet => &TRIPLET_PAIRS,
        };
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut labels = Vec::new();
        for &(i, j, same) in pairs {
            left.push(block(g, tap, i)?);
            right.push(block(g, tap, j)?);
            labels.extend(std::iter::repeat_n(same as usize, b));
        }
        let a = g.concat(&left)?;
        let c = g.concat(&right)?;
        let logits = network.identification_logits(g, p, a, c)?;
        let per_pair = identification_node(g, logits, &labels)?;
        identification = Some(g.mean(per_pair)?);
    }

    let total = match (verification, identification) {
        (Some(v), None) => v,
        (None, Some(i)) => i,
        (Some(v), Some(i)) => {
            let w = g.scalar_mul(i, T::lit(cfg.loss.lambda_id))?;
            g.add(v, w)?
        }
        (None, None) => unreachable!("every loss mode uses at least one term"),
    };
    Ok(BatchLoss {
        total,
        verification,
        inside,
        identification,
    })
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for scheduled checkpoints (`ckpt_{iteration}.qmet`) and
    /// the final `final.qmet`.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSONL log, appended to.
    pub log_path: Option<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "final.qmet";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:06}.qmet")
}

/// Training state over one dataset.
pub struct Trainer<'a, T: Scalar> {
    dataset: &'a LabeledDataset<T>,
    network: Network,
    params: ParameterSet<T>,
    sampler: Sampler,
    config: TrainConfig,
    iteration: u64,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        dataset: &'a LabeledDataset<T>,
        backbone: BackboneConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let network = Network::new(backbone)?;
        check_input(&network, dataset)?;
        let params = ParameterSet::init(network.config(), config.seed)?;
        let sampler = Sampler::new(
            dataset,
            config.unit,
            config.seed.wrapping_add(SAMPLER_SEED_OFFSET),
            config.cross_camera_positives,
        )?;
        Ok(Self {
            dataset,
            network,
            params,
            sampler,
            config,
            iteration: 0,
        })
    }

    /// Continues from a checkpoint that carries training state. `backbone`,
    /// when given, must equal the checkpoint's.
    pub fn resume(
        dataset: &'a LabeledDataset<T>,
        checkpoint: Checkpoint<T>,
        backbone: Option<&BackboneConfig>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(b) = backbone {
            if *b != checkpoint.config {
                return Err(Error::Incompatible(
                    "backbone config differs from the checkpoint's".into(),
                ));
            }
        }
        let state = checkpoint
            .train_state
            .ok_or_else(|| Error::Incompatible("checkpoint has no training state".into()))?;
        let saved: TrainConfig = serde_json::from_str(&state.train_config)?;
        config.check_resumable(&saved)?;
        if state.iteration > config.iterations {
            return Err(Error::Incompatible(format!(
                "checkpoint is at iteration {} beyond the target {}",
                state.iteration, config.iterations
            )));
        }
        let network = Network::new(checkpoint.config)?;
        check_input(&network, dataset)?;
        let sampler = Sampler::restore(dataset, &state.sampler_state)?;
        if sampler.unit() != config.unit {
            return Err(Error::Incompatible(
                "sampler unit differs from config".into(),
            ));
        }
        Ok(Self {
            dataset,
            network,
            params: checkpoint.params,
            sampler,
            config,
            iteration: state.iteration,
        })
    }

    pub fn resume_from_path(
        dataset: &'a LabeledDataset<T>,
        path: &Path,
        backbone: Option<&BackboneConfig>,
        config: TrainConfig,
    ) -> Result<Self> {
        Self::resume(dataset, load_checkpoint(path)?, backbone, config)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_params(self) -> ParameterSet<T> {
        self.params
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            config: self.network.config().clone(),
            params: self.params.clone(),
            train_state: Some(TrainState {
                iteration: self.iteration,
                train_config: serde_json::to_string(&self.config)?,
                sampler_state: self.sampler.state_bytes(),
            }),
        })
    }

    /// One SGD update. `wall_time` in the record is left at 0.
    pub fn step(&mut self) -> Result<TrainLogRecord> {
        let next = self.iteration + 1;
        let diverged = |what| Error::Diverged {
            iteration: next,
            what,
        };
        let units: Vec<Vec<usize>> = (0..self.config.batch_size)
            .map(|_| self.sampler.next_unit())
            .collect();
        let mut g = Graph::new();
        let p = self.network.bind(&mut g, &self.params, true)?;
        let loss = batch_loss(
            &mut g,
            &self.network,
            &p,
            self.dataset,
            &units,
            &self.config,
        )
        .map_err(|e| match e {
            Error::NonFinite { op } => diverged(op),
            other => other,
        })?;
        let total = g.value(loss.total).item();
        if !total.is_finite() {
            return Err(diverged("loss"));
        }
        g.backward(loss.total)?;
        let grads: Vec<Vec<T>> = p
            .ids()
            .iter()
            .map(|&id| g.grad(id).expect("parameter gradient").to_vec())
            .collect();
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(diverged("gradient"));
        }
        self.params
            .sgd_step(&grads, T::lit(self.config.learning_rate))?;
        self.iteration = next;

        let m = self.config.loss.margin;
        let (lit, std, active) = match loss.inside {
            Some(ins) => {
                let v = g.value(ins).data();
                let n = v.len() as f64;
                let x = || v.iter().map(|x| x.as_f64());
                (
                    Some(x().map(|x| x.max(m)).sum::<f64>() / n),
                    Some(x().map(|x| (x - m).max(0.0)).sum::<f64>() / n),
                    Some(x().filter(|&x| x > m).count() as f64 / n),
                )
            }
            None => (None, None, None),
        };
        Ok(TrainLogRecord {
            iteration: next,
            verification: loss.verification.map(|id| g.value(id).item().as_f64()),
            verification_literal: lit,
            verification_standard: std,
            identification: loss.identification.map(|id| g.value(id).item().as_f64()),
            total: total.as_f64(),
            hinge_active_fraction: active,
            wall_time: 0.0,
        })
    }

    /// Trains until the configured total iteration count, returning the
    /// log records of this segment.
    pub fn run(&mut self, opts: &RunOptions) -> Result<Vec<TrainLogRecord>> {
        let start = Instant::now();
        let mut log_file = match &opts.log_path {
            Some(path) => Some(OpenOptions::new().create(true).append(true).open(path)?),
            None => None,
        };
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut records = Vec::new();
        while self.iteration < self.config.iterations {
            let mut rec = self.step()?;
            rec.wall_time = start.elapsed().as_secs_f64();
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            records.push(rec);
            let every = self.config.checkpoint_every;
            if let Some(dir) = &opts.checkpoint_dir {
                if every > 0 && self.iteration.is_multiple_of(every) {
                    save_checkpoint(
                        &dir.join(checkpoint_name(self.iteration)),
                        &self.checkpoint()?,
                    )?;
                }
            }
        }
        if let Some(dir) = &opts.checkpoint_dir {
            save_checkpoint(&dir.join(FINAL_CHECKPOINT), &self.checkpoint()?)?;
        }
        Ok(records)
    }
}

fn check_input<T: Scalar>(network: &Network, ds: &LabeledDataset<T>) -> Result<()> {
    let want = network.config().input_shape;
    if ds.input_shape() != want {
        return Err(Error::Incompatible(format!(
            "dataset payload shape {:?} does not match backbone input {:?}",
            ds.shape(),
            want.dims()
        )));
    }
    Ok(())
}

/// Final parameters and log of a complete run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParameterSet<T>,
    pub log: Vec<TrainLogRecord>,
}

pub fn train<T: Scalar>(
    dataset: &LabeledDataset<T>,
    backbone: &BackboneConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let mut t = Trainer::new(dataset, backbone.clone(), config.clone())?;
    let log = t.run(&RunOptions::default())?;
    Ok(TrainOutcome {
        params: t.into_params(),
        log,
    })
}

#[cfg(test)]
mod tests;
