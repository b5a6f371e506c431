//! Single-query retrieval: rank a gallery for each probe and summarise the
//! match ranks as a cumulative match characteristic (CMC) curve.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::backbone::{Network, ParameterSet};
use crate::data::{EvalSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "QMET_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// Ascending squared distance between verification embeddings.
    #[default]
    Distance,
    /// Descending same-person probability from the identification head.
    Similarity,
}

impl RankMode {
    fn ascending(self) -> bool {
        self == RankMode::Distance
    }

    pub fn name(self) -> &'static str {
        match self {
            RankMode::Distance => "distance",
            RankMode::Similarity => "similarity",
        }
    }
}

impl std::str::FromStr for RankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(RankMode::Distance),
            "similarity" => Ok(RankMode::Similarity),
            other => Err(Error::Config(format!(
                "unknown rank mode {other:?}; expected distance or similarity"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRanking {
    /// Gallery positions (indices into the gallery list), best first.
    pub order: Vec<usize>,
    /// Score of each entry of `order`.
    pub scores: Vec<f64>,
    /// 1-based rank of the first same-identity gallery entry.
    pub match_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub mode: RankMode,
    pub n_gallery: usize,
    pub probes: Vec<ProbeRanking>,
}

impl RankingResult {
    pub fn match_ranks(&self) -> Vec<usize> {
        self.probes.iter().map(|p| p.match_rank).collect()
    }
}

/// Orders one probe's gallery scores; ties go to the lower gallery position.
pub fn rank_one(
    scores: &[f64],
    probe_identity: u64,
    gallery_identities: &[u64],
    mode: RankMode,
) -> Result<ProbeRanking> {
    if scores.is_empty() {
        return Err(Error::Evaluation("empty gallery".into()));
    }
    if scores.len() != gallery_identities.len() {
        return Err(Error::Evaluation(format!(
            "{} scores for {} gallery entries",
            scores.len(),
            gallery_identities.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("NaN ranking score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let c = scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal);
        let c = if mode.ascending() { c } else { c.reverse() };
        c.then(a.cmp(&b))
    });
    let match_rank = order
        .iter()
        .position(|&g| gallery_identities[g] == probe_identity)
        .ok_or_else(|| {
            Error::Evaluation(format!(
                "probe identity {probe_identity} is absent from the gallery"
            ))
        })?
        + 1;
    Ok(ProbeRanking {
        scores: order.iter().map(|&g| scores[g]).collect(),
        order,
        match_rank,
    })
}

/// Ranks from a full `[probe][gallery]` score matrix.
pub fn rank_scores(
    scores: &[Vec<f64>],
    probe_identities: &[u64],
    gallery_identities: &[u64],
    mode: RankMode,
) -> Result<RankingResult> {
    if scores.is_empty() || scores.len() != probe_identities.len() {
        return Err(Error::Evaluation(
            "score matrix does not match the probes".into(),
        ));
    }
    let probes = scores
        .iter()
        .zip(probe_identities)
        .map(|(row, &id)| rank_one(row, id, gallery_identities, mode))
        .collect::<Result<_>>()?;
    Ok(RankingResult {
        mode,
        n_gallery: gallery_identities.len(),
        probes,
    })
}

/// Thread count from `QMET_THREADS`, else all available cores.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn in_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_threads())
        .build()
        .map_err(|e| Error::Evaluation(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn identities<T: Scalar>(ds: &LabeledDataset<T>, idx: &[usize]) -> Vec<u64> {
    idx.iter().map(|&i| ds.identity(i)).collect()
}

fn payloads<'d, T: Scalar>(ds: &'d LabeledDataset<T>, idx: &[usize]) -> Vec<&'d Tensor<T>> {
    idx.iter().map(|&i| ds.payload(i)).collect()
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Tensor<T>> {
    (0..t.shape()[0]).map(|i| t.row(i)).collect()
}

fn squared_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .as_f64()
}

/// Full `[probe][gallery]` squared-distance matrix of verification embeddings.
pub fn distance_matrix<T: Scalar>(
    network: &Network,
    params: &ParameterSet<T>,
    ds: &LabeledDataset<T>,
    split: &EvalSplit,
) -> Result<Vec<Vec<f64>>> {
    split.validate(ds)?;
    let probe = rows(&network.embed_batch(params, &payloads(ds, &split.probe))?);
    let gallery = rows(&network.embed_batch(params, &payloads(ds, &split.gallery))?);
    in_pool(|| {
        probe
            .par_iter()
            .map(|p| gallery.iter().map(|g| squared_distance(p, g)).collect())
            .collect()
    })
}

/// Full `[probe][gallery]` matrix of same-person probabilities.
pub fn similarity_matrix<T: Scalar>(
    network: &Network,
    params: &ParameterSet<T>,
    ds: &LabeledDataset<T>,
    split: &EvalSplit,
) -> Result<Vec<Vec<f64>>> {
    split.validate(ds)?;
    let probe = rows(&network.tap_batch(params, &payloads(ds, &split.probe))?);
    let gallery = network.tap_batch(params, &payloads(ds, &split.gallery))?;
    let n = split.gallery.len();
    in_pool(|| {
        probe
            .par_iter()
            .map(|p| {
                let repeated = Tensor::stack(&vec![p; n])?;
                let probs = network.similarity_from_taps(params, repeated, gallery.clone())?;
                Ok(probs.data().chunks(2).map(|c| c[1].as_f64()).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()
    })?
}

pub fn rank_by_distance<T: Scalar>(
    network: &Network,
    params: &ParameterSet<T>,
    ds: &LabeledDataset<T>,
    split: &EvalSplit,
) -> Result<RankingResult> {
    let m = distance_matrix(network, params, ds, split)?;
    rank_scores(
        &m,
        &identities(ds, &split.probe),
        &identities(ds, &split.gallery),
        RankMode::Distance,
    )
}

pub fn rank_by_similarity<T: Scalar>(
    network: &Network,
    params: &ParameterSet<T>,
    ds: &LabeledDataset<T>,
    split: &EvalSplit,
) -> Result<RankingResult> {
    let m = similarity_matrix(network, params, ds, split)?;
    rank_scores(
        &m,
        &identities(ds, &split.probe),
        &identities(ds, &split.gallery),
        RankMode::Similarity,
    )
}

pub fn rank<T: Scalar>(
    network: &Network,
    params: &ParameterSet<T>,
    ds: &LabeledDataset<T>,
    split: &EvalSplit,
    mode: RankMode,
) -> Result<RankingResult> {
    match mode {
        RankMode::Distance => rank_by_distance(network, params, ds, split),
        RankMode::Similarity => rank_by_similarity(network, params, ds, split),
    }
}

/// `values[i - 1]` is the fraction of probes matched within the top `i`;
/// `counts[i - 1]` the raw number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    pub n_probe: usize,
}

pub fn cmc_curve(result: &RankingResult) -> Result<CmcCurve> {
    let n_probe = result.probes.len();
    if n_probe == 0 || result.n_gallery == 0 {
        return Err(Error::Evaluation("empty ranking result".into()));
    }
    let mut hist = vec![0usize; result.n_gallery];
    for p in &result.probes {
        if p.match_rank == 0 || p.match_rank > result.n_gallery {
            return Err(Error::Evaluation(format!(
                "match rank {} out of range",
                p.match_rank
            )));
        }
        hist[p.match_rank - 1] += 1;
    }
    let mut counts = Vec::with_capacity(hist.len());
    let mut acc = 0;
    for h in hist {
        acc += h;
        counts.push(acc);
    }
    let values = counts.iter().map(|&c| c as f64 / n_probe as f64).collect();
    Ok(CmcCurve {
        values,
        counts,
        n_probe,
    })
}

impl CmcCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fraction of probes matched within the top `k` (1-based).
    pub fn rank_k(&self, k: usize) -> Result<f64> {
        if k == 0 || k > self.values.len() {
            return Err(Error::RankOutOfRange {
                k,
                gallery: self.values.len(),
            });
        }
        Ok(self.values[k - 1])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (i, v) in self.values.iter().enumerate() {
            writeln!(s, "{},{}", i + 1, v).expect("writing to a string");
        }
        s
    }
}

pub fn rank_k(curve: &CmcCurve, k: usize) -> Result<f64> {
    curve.rank_k(k)
}

/// Headline numbers of one evaluation. Ranks beyond the gallery size are
/// `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rank1: f64,
    pub rank5: Option<f64>,
    pub rank10: Option<f64>,
    pub mode: RankMode,
    pub n_probe: usize,
    pub n_gallery: usize,
}

impl EvalSummary {
    pub fn new(curve: &CmcCurve, mode: RankMode) -> Self {
        Self {
            rank1: curve.values[0],
            rank5: curve.rank_k(5).ok(),
            rank10: curve.rank_k(10).ok(),
            mode,
            n_probe: curve.n_probe,
            n_gallery: curve.len(),
        }
    }
}

/// Ranks, builds the curve and summarises in one call.
pub fn evaluate<T: Scalar>(
    network: &Network,
    params: &ParameterSet<T>,
    ds: &LabeledDataset<T>,
    split: &EvalSplit,
    mode: RankMode,
) -> Result<(CmcCurve, EvalSummary)> {
    let curve = cmc_curve(&rank(network, params, ds, split, mode)?)?;
    let summary = EvalSummary::new(&curve, mode);
    Ok((curve, summary))
}

#[cfg(test)]
mod tests;
