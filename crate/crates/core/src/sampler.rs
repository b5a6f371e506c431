//! Quartet and triplet construction.
//!
//! Positive pairs are visited in shuffled epochs, so every pair is used once
//! before any pair repeats; negatives are drawn uniformly: first an identity
//! different from the ones already in the unit, then a sample of it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quartet {
    pub a1: usize,
    pub a2: usize,
    pub a3: usize,
    pub a4: usize,
}

impl Quartet {
    pub fn is_valid<T: Scalar>(&self, ds: &LabeledDataset<T>) -> bool {
        let id = |i| ds.identity(i);
        self.a1 != self.a2
            && id(self.a1) == id(self.a2)
            && id(self.a3) != id(self.a1)
            && id(self.a4) != id(self.a1)
            && id(self.a3) != id(self.a4)
    }

    pub fn indices(&self) -> [usize; 4] {
        [self.a1, self.a2, self.a3, self.a4]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub a1: usize,
    pub a2: usize,
    pub a3: usize,
}

impl Triplet {
    pub fn is_valid<T: Scalar>(&self, ds: &LabeledDataset<T>) -> bool {
        let id = |i| ds.identity(i);
        self.a1 != self.a2 && id(self.a1) == id(self.a2) && id(self.a3) != id(self.a1)
    }

    pub fn indices(&self) -> [usize; 3] {
        [self.a1, self.a2, self.a3]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    #[default]
    Quartet,
    Triplet,
}

impl Unit {
    pub fn streams(self) -> usize {
        match self {
            Unit::Quartet => 4,
            Unit::Triplet => 3,
        }
    }

    fn min_identities(self) -> usize {
        match self {
            Unit::Quartet => 3,
            Unit::Triplet => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unit::Quartet => "quartet",
            Unit::Triplet => "triplet",
        }
    }
}

/// Negative selection strategy. Only uniform random selection exists.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    #[default]
    Uniform,
}

/// All unordered same-identity pairs `(i, j)` with `i < j`.
pub fn enumerate_positive_pairs<T: Scalar>(ds: &LabeledDataset<T>) -> Result<Vec<(usize, usize)>> {
    positive_pairs(ds, false)
}

/// As [`enumerate_positive_pairs`]; with `cross_camera` only pairs from
/// different cameras are kept.
pub fn positive_pairs<T: Scalar>(
    ds: &LabeledDataset<T>,
    cross_camera: bool,
) -> Result<Vec<(usize, usize)>> {
    let s = ds.samples();
    let mut by_id: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, x) in s.iter().enumerate() {
        by_id.entry(x.identity).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for members in by_id.values() {
        for (k, &i) in members.iter().enumerate() {
            for &j in &members[k + 1..] {
                if !cross_camera || s[i].camera != s[j].camera {
                    pairs.push((i, j));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoPositivePairs);
    }
    Ok(pairs)
}

/// Stateful, resumable stream of training units over one dataset.
#[derive(Clone, Debug)]
pub struct Sampler {
    unit: Unit,
    cross_camera: bool,
    pairs: Vec<(usize, usize)>,
    identities: Vec<u64>,
    members: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    pub fn new<T: Scalar>(
        ds: &LabeledDataset<T>,
        unit: Unit,
        seed: u64,
        cross_camera: bool,
    ) -> Result<Self> {
        let identities = ds.identities();
        if identities.len() < unit.min_identities() {
            return Err(Error::TooFewIdentities {
                unit: unit.name(),
                required: unit.min_identities(),
                found: identities.len(),
            });
        }
        let pairs = positive_pairs(ds, cross_camera)?;
        let members = identities
            .iter()
            .map(|&id| (0..ds.len()).filter(|&i| ds.identity(i) == id).collect())
            .collect();
        Ok(Self {
            unit,
            cross_camera,
            pairs,
            identities,
            members,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    fn next_pair(&mut self) -> (usize, usize) {
        if self.cursor == self.order.len() {
            self.order = (0..self.pairs.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let (i, j) = self.pairs[self.order[self.cursor]];
        self.cursor += 1;
        if self.rng.random::<bool>() {
            (j, i)
        } else {
            (i, j)
        }
    }

    fn identity_slot(&self, sample: usize) -> usize {
        self.members
            .iter()
            .position(|m| m.contains(&sample))
            .expect("sample belongs to an identity")
    }

    /// Uniform identity slot outside `exclude`, then a uniform sample of it.
    fn negative(&mut self, exclude: &[usize]) -> (usize, usize) {
        loop {
            let slot = self.rng.random_range(0..self.identities.len());
            if !exclude.contains(&slot) {
                let m = &self.members[slot];
                return (slot, m[self.rng.random_range(0..m.len())]);
            }
        }
    }

    pub fn next_quartet(&mut self) -> Quartet {
        assert_eq!(self.unit, Unit::Quartet, "sampler configured for triplets");
        let (a1, a2) = self.next_pair();
        let anchor = self.identity_slot(a1);
        let (s3, a3) = self.negative(&[anchor]);
        let (_, a4) = self.negative(&[anchor, s3]);
        Quartet { a1, a2, a3, a4 }
    }

    pub fn next_triplet(&mut self) -> Triplet {
        assert_eq!(self.unit, Unit::Triplet, "sampler configured for quartets");
        let (a1, a2) = self.next_pair();
        let anchor = self.identity_slot(a1);
        let (_, a3) = self.negative(&[anchor]);
        Triplet { a1, a2, a3 }
    }

    /// Next unit as stream indices (4 for quartets, 3 for triplets).
    pub fn next_unit(&mut self) -> Vec<usize> {
        match self.unit {
            Unit::Quartet => self.next_quartet().indices().to_vec(),
            Unit::Triplet => self.next_triplet().indices().to_vec(),
        }
    }

    /// Serialized position: RNG seed, stream and word position, the current
    /// epoch order and cursor.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.u8(self.unit as u8);
        w.u8(self.cross_camera as u8);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.u128(self.rng.get_word_pos());
        w.u64(self.pairs.len() as u64);
        w.u64(self.cursor as u64);
        w.u64(self.order.len() as u64);
        for &o in &self.order {
            w.u64(o as u64);
        }
        w.into_inner()
    }

    /// Rebuilds a sampler for `ds` at a saved position.
    pub fn restore<T: Scalar>(ds: &LabeledDataset<T>, state: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Incompatible(format!("sampler state: {m}"));
        let mut r = ByteReader::new(state);
        let unit = match r.u8()? {
            0 => Unit::Quartet,
            1 => Unit::Triplet,
            _ => return Err(bad("unknown unit")),
        };
        let cross_camera = r.u8()? != 0;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let n_pairs = r.u64()? as usize;
        let cursor = r.u64()? as usize;
        let n_order = r.u64()? as usize;
        let order = (0..n_order)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let mut s = Self::new(ds, unit, 0, cross_camera)?;
        if s.pairs.len() != n_pairs || cursor > order.len() || order.iter().any(|&o| o >= n_pairs) {
            return Err(bad("dataset does not match the saved sampler"));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        s.rng = rng;
        s.order = order;
        s.cursor = cursor;
        Ok(s)
    }
}

pub fn sample_quartets<T: Scalar>(
    ds: &LabeledDataset<T>,
    count: usize,
    seed: u64,
) -> Result<Vec<Quartet>> {
    let mut s = Sampler::new(ds, Unit::Quartet, seed, false)?;
    Ok((0..count).map(|_| s.next_quartet()).collect())
}

pub fn sample_triplets<T: Scalar>(
    ds: &LabeledDataset<T>,
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let mut s = Sampler::new(ds, Unit::Triplet, seed, false)?;
    Ok((0..count).map(|_| s.next_triplet()).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::{PayloadMode, Sample};

    fn dataset(per_identity: &[usize]) -> LabeledDataset<f64> {
        let mut samples = Vec::new();
        for (id, &n) in per_identity.iter().enumerate() {
            for k in 0..n {
                samples.push(Sample {
                    payload: Tensor::vector(&[id as f64, k as f64]),
                    identity: id as u64 * 10,
                    camera: k as u64 % 2,
                });
            }
        }
        LabeledDataset::new(PayloadMode::Vector, vec![2], samples).unwrap()
    }

    #[test]
    fn positive_pair_counts() {
        assert_eq!(
            enumerate_positive_pairs(&dataset(&[2, 2])).unwrap().len(),
            2
        );
        assert_eq!(enumerate_positive_pairs(&dataset(&[4])).unwrap().len(), 6);
        let viper = dataset(&[2; 10]);
        let pairs = enumerate_positive_pairs(&viper).unwrap();
        assert_eq!(pairs.len(), 10);
        let ids: BTreeSet<_> = pairs.iter().map(|&(i, _)| viper.identity(i)).collect();
        assert_eq!(ids.len(), 10);
        assert!(matches!(
            enumerate_positive_pairs(&dataset(&[1, 1, 1])),
            Err(Error::NoPositivePairs)
        ));
        // cameras alternate, so of the 6 pairs in a 4-sample identity 4 cross cameras
        assert_eq!(positive_pairs(&dataset(&[4]), true).unwrap().len(), 4);
    }

    #[test]
    fn quartets_valid_and_deterministic() {
        let ds = dataset(&[2, 2, 2]);
        let q = sample_quartets(&ds, 10, 7).unwrap();
        assert_eq!(q.len(), 10);
        assert!(q.iter().all(|x| x.is_valid(&ds)));
        assert_eq!(q, sample_quartets(&ds, 10, 7).unwrap());
        assert_ne!(q, sample_quartets(&ds, 10, 8).unwrap());
        let err = sample_quartets(&dataset(&[3, 3]), 1, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::TooFewIdentities {
                required: 3,
                found: 2,
                ..
            }
        ));
        assert!(err.to_string().contains("at least 3"));
    }

    #[test]
    fn triplets_valid_and_deterministic() {
        let ds = dataset(&[3, 2]);
        let t = sample_triplets(&ds, 10, 1).unwrap();
        assert!(t.iter().all(|x| x.is_valid(&ds)));
        assert_eq!(t, sample_triplets(&ds, 10, 1).unwrap());
        assert!(matches!(
            sample_triplets(&dataset(&[5]), 1, 0),
            Err(Error::TooFewIdentities { required: 2, .. })
        ));
    }

    #[test]
    fn every_pair_appears_once_per_epoch() {
        let ds = dataset(&[3, 2, 4, 2]);
        let mut s = Sampler::new(&ds, Unit::Quartet, 3, false).unwrap();
        let n = s.num_pairs();
        for _ in 0..3 {
            let seen: BTreeSet<_> = (0..n)
                .map(|_| {
                    let q = s.next_quartet();
                    (q.a1.min(q.a2), q.a1.max(q.a2))
                })
                .collect();
            assert_eq!(seen.len(), n);
        }
    }

    #[test]
    fn state_round_trip_continues_stream() {
        let ds = dataset(&[3, 2, 4, 2]);
        let mut a = Sampler::new(&ds, Unit::Quartet, 11, false).unwrap();
        for _ in 0..7 {
            a.next_quartet();
        }
        let mut b = Sampler::restore(&ds, &a.state_bytes()).unwrap();
        for _ in 0..50 {
            assert_eq!(a.next_quartet(), b.next_quartet());
        }
        let other = dataset(&[2, 2, 2]);
        assert!(Sampler::restore(&other, &a.state_bytes()).is_err());
    }

    fn brute_force_counts(ds: &LabeledDataset<f64>) -> (usize, usize) {
        let n = ds.len();
        let mut triplets = 0;
        let mut quartets = 0;
        for a1 in 0..n {
            for a2 in 0..n {
                for a3 in 0..n {
                    let t = Triplet { a1, a2, a3 };
                    if t.is_valid(ds) {
                        triplets += 1;
                    }
                    for a4 in 0..n {
                        if (Quartet { a1, a2, a3, a4 }).is_valid(ds) {
                            quartets += 1;
                        }
                    }
                }
            }
        }
        (triplets, quartets)
    }

    proptest! {
        #[test]
        fn emitted_units_always_valid(sizes in proptest::collection::vec(1usize..5, 3..7), seed in any::<u64>()) {
            prop_assume!(sizes.iter().any(|&s| s >= 2));
            let ds = dataset(&sizes);
            for q in sample_quartets(&ds, 200, seed).unwrap() {
                prop_assert!(q.is_valid(&ds));
            }
            for t in sample_triplets(&ds, 200, seed).unwrap() {
                prop_assert!(t.is_valid(&ds));
            }
        }

        #[test]
        fn quartets_outnumber_triplets(sizes in proptest::collection::vec(1usize..4, 3..5)) {
            let ds = dataset(&sizes);
            let (t, q) = brute_force_counts(&ds);
            prop_assert!(q >= t);
        }
    }
}
