//! Identity-disjoint train/test partitions and single-query probe/gallery
//! construction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    /// `floor(n / 2)` random identities for testing, the rest for training.
    #[default]
    HalfIdentities,
    /// Exact identity counts for each side; leftover identities are unused.
    FixedCounts { train_ids: usize, test_ids: usize },
}

/// Probe and gallery sample indices into the evaluated dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub probe: Vec<usize>,
    pub gallery: Vec<usize>,
}

impl EvalSplit {
    /// Every sample is both probe and gallery; each probe finds itself.
    pub fn self_match(n: usize) -> Self {
        Self {
            probe: (0..n).collect(),
            gallery: (0..n).collect(),
        }
    }

    pub fn validate<T: Scalar>(&self, ds: &LabeledDataset<T>) -> Result<()> {
        if self.probe.is_empty() || self.gallery.is_empty() {
            return Err(Error::SplitInfeasible("empty probe or gallery".into()));
        }
        if let Some(&bad) = self
            .probe
            .iter()
            .chain(&self.gallery)
            .find(|&&i| i >= ds.len())
        {
            return Err(Error::SplitInfeasible(format!(
                "index {bad} beyond dataset of {} samples",
                ds.len()
            )));
        }
        let gallery_ids: BTreeSet<u64> = self.gallery.iter().map(|&i| ds.identity(i)).collect();
        if let Some(&p) = self
            .probe
            .iter()
            .find(|&&p| !gallery_ids.contains(&ds.identity(p)))
        {
            return Err(Error::SplitInfeasible(format!(
                "probe {p} (identity {}) has no gallery match",
                ds.identity(p)
            )));
        }
        Ok(())
    }

    pub fn is_disjoint(&self) -> bool {
        let g: BTreeSet<_> = self.gallery.iter().collect();
        self.probe.iter().all(|p| !g.contains(p))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: EvalSplit,
}

impl Split {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&super::formats::read_file(path)?)?)
    }
}

/// Partitions identities per `protocol`; within the test identities one
/// sample per identity per camera goes to the gallery and the rest become
/// probes. An identity that would be left without a probe gives up its
/// lowest-camera gallery image to the probe side (so two-image, two-camera
/// identities probe from one camera against the other).
pub fn make_split<T: Scalar>(
    ds: &LabeledDataset<T>,
    protocol: SplitProtocol,
    seed: u64,
) -> Result<Split> {
    let mut ids = ds.identities();
    let (n_train, n_test) = match protocol {
        SplitProtocol::HalfIdentities => {
            let test = ids.len() / 2;
            (ids.len() - test, test)
        }
        SplitProtocol::FixedCounts {
            train_ids,
            test_ids,
        } => (train_ids, test_ids),
    };
    if n_test == 0 || n_train == 0 || n_train + n_test > ids.len() {
        return Err(Error::SplitInfeasible(format!(
            "{n_train} train + {n_test} test identities requested from {}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test_ids: BTreeSet<u64> = ids[..n_test].iter().copied().collect();
    let train_ids: BTreeSet<u64> = ids[n_test..n_test + n_train].iter().copied().collect();

    let train = (0..ds.len())
        .filter(|&i| train_ids.contains(&ds.identity(i)))
        .collect();

    // identity -> camera -> sample indices
    let mut by_id: BTreeMap<u64, BTreeMap<u64, Vec<usize>>> = BTreeMap::new();
    for (i, s) in ds.samples().iter().enumerate() {
        if test_ids.contains(&s.identity) {
            by_id
                .entry(s.identity)
                .or_default()
                .entry(s.camera)
                .or_default()
                .push(i);
        }
    }
    let mut probe = Vec::new();
    let mut gallery = Vec::new();
    for cams in by_id.values() {
        let mut g = Vec::new();
        let mut p = Vec::new();
        for members in cams.values() {
            let pick = rng.random_range(0..members.len());
            for (k, &i) in members.iter().enumerate() {
                if k == pick {
                    g.push(i);
                } else {
                    p.push(i);
                }
            }
        }
        if p.is_empty() && g.len() >= 2 {
            p.push(g.remove(0));
        }
        gallery.extend(g);
        probe.extend(p);
    }
    probe.sort_unstable();
    gallery.sort_unstable();
    let eval = EvalSplit { probe, gallery };
    eval.validate(ds)?;
    Ok(Split { train, eval })
}
