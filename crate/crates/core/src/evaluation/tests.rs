use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::BackboneConfig;
use crate::data::{generate_synthetic, make_split, SplitProtocol, SynthSpec};

fn setup() -> (Network, ParameterSet<f64>, LabeledDataset<f64>) {
    let ds = generate_synthetic(&SynthSpec::vector(6, 3, 4)).unwrap();
    let bb = BackboneConfig::vector_default(4);
    let params = ParameterSet::init(&bb, 9).unwrap();
    (Network::new(bb).unwrap(), params, ds)
}

/// Repeated selection of the best remaining entry, lowest index on ties.
fn naive_order(scores: &[f64], ascending: bool) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (a, b) = (scores[left[k]], scores[left[best]]);
            if (ascending && a < b) || (!ascending && a > b) {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn naive_cmc(ranks: &[usize], n_gallery: usize) -> Vec<f64> {
    (1..=n_gallery)
        .map(|i| ranks.iter().filter(|&&r| r <= i).count() as f64 / ranks.len() as f64)
        .collect()
}

#[test]
fn one_dimensional_hand_case() {
    // probe at 0; gallery at 3 (other identity) and 1 (same identity)
    let r = rank_one(&[9.0, 1.0], 7, &[8, 7], RankMode::Distance).unwrap();
    assert_eq!(r.order, vec![1, 0]);
    assert_eq!(r.match_rank, 1);
    assert_eq!(r.scores, vec![1.0, 9.0]);
}

#[test]
fn hand_cmc_and_rank_k() {
    let result = RankingResult {
        mode: RankMode::Distance,
        n_gallery: 3,
        probes: [1, 2, 2]
            .iter()
            .map(|&m| ProbeRanking {
                order: vec![0, 1, 2],
                scores: vec![0.0; 3],
                match_rank: m,
            })
            .collect(),
    };
    let c = cmc_curve(&result).unwrap();
    assert_eq!(c.values, vec![1.0 / 3.0, 1.0, 1.0]);
    assert_eq!(c.counts, vec![1, 3, 3]);
    assert_eq!(c.rank_k(2).unwrap(), 1.0);
    assert!(matches!(c.rank_k(0), Err(Error::RankOutOfRange { .. })));
    assert!(matches!(
        rank_k(&c, 4),
        Err(Error::RankOutOfRange { k: 4, gallery: 3 })
    ));
    assert_eq!(c.to_csv(), "rank,cmc\n1,0.3333333333333333\n2,1\n3,1\n");
    let s = EvalSummary::new(&c, RankMode::Similarity);
    assert_eq!(
        (s.rank5, s.rank10, s.n_gallery, s.n_probe),
        (None, None, 3, 3)
    );
    let json = serde_json::to_value(&s).unwrap();
    assert_eq!(json["mode"], "similarity");
}

#[test]
fn errors_on_empty_or_unmatched() {
    assert!(rank_one(&[], 0, &[], RankMode::Distance).is_err());
    assert!(rank_one(&[1.0], 0, &[1], RankMode::Distance).is_err());
    assert!(rank_one(&[f64::NAN], 0, &[0], RankMode::Distance).is_err());
    let (net, p, ds) = setup();
    let empty = EvalSplit {
        probe: vec![0],
        gallery: vec![],
    };
    assert!(rank_by_distance(&net, &p, &ds, &empty).is_err());
}

#[test]
fn probe_in_gallery_ranks_first_at_distance_zero() {
    let (net, p, ds) = setup();
    let r = rank_by_distance(&net, &p, &ds, &EvalSplit::self_match(ds.len())).unwrap();
    assert!(r
        .probes
        .iter()
        .all(|x| x.match_rank == 1 && x.scores[0] == 0.0));
    let c = cmc_curve(&r).unwrap();
    assert!(c.values.iter().all(|&v| v == 1.0));
}

#[test]
fn distance_ranking_matches_brute_force() {
    let (net, p, ds) = setup();
    let split = make_split(&ds, SplitProtocol::HalfIdentities, 3)
        .unwrap()
        .eval;
    let before = p.clone();
    let r = rank_by_distance(&net, &p, &ds, &split).unwrap();
    assert_eq!(p, before);
    for (pi, pr) in split.probe.iter().zip(&r.probes) {
        let e = net.embed_verification(&p, ds.payload(*pi)).unwrap();
        let d: Vec<f64> = split
            .gallery
            .iter()
            .map(|&g| {
                let f = net.embed_verification(&p, ds.payload(g)).unwrap();
                e.data()
                    .iter()
                    .zip(f.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        assert_eq!(pr.order, naive_order(&d, true));
        for (&g, &s) in pr.order.iter().zip(&pr.scores) {
            assert!((d[g] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn similarity_ranking_matches_brute_force() {
    let (net, mut p, ds) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..p.len() {
        for v in p.tensor_at_mut(i).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let split = make_split(&ds, SplitProtocol::HalfIdentities, 1)
        .unwrap()
        .eval;
    let r = rank_by_similarity(&net, &p, &ds, &split).unwrap();
    for (pi, pr) in split.probe.iter().zip(&r.probes) {
        let s: Vec<f64> = split
            .gallery
            .iter()
            .map(|&g| {
                net.identification_head(&p, ds.payload(*pi), ds.payload(g))
                    .unwrap()
                    .data()[1]
            })
            .collect();
        assert_eq!(pr.order, naive_order(&s, false));
        for (&g, &v) in pr.order.iter().zip(&pr.scores) {
            assert!((s[g] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_head_falls_back_to_gallery_order() {
    let (net, _, ds) = setup();
    let zeros = ParameterSet::zeros(net.config()).unwrap();
    let split = make_split(&ds, SplitProtocol::HalfIdentities, 0)
        .unwrap()
        .eval;
    let r = rank_by_similarity(&net, &zeros, &ds, &split).unwrap();
    let identity: Vec<usize> = (0..split.gallery.len()).collect();
    for pr in &r.probes {
        assert_eq!(pr.order, identity);
        assert!(pr.scores.iter().all(|&s| s == 0.5));
    }
}

#[test]
fn random_scores_hit_chance_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n_ids = 10;
    let gallery: Vec<u64> = (0..n_ids).collect();
    let n_probe = 4000;
    let probes: Vec<u64> = (0..n_probe).map(|i| i % n_ids).collect();
    let scores: Vec<Vec<f64>> = (0..n_probe)
        .map(|_| (0..n_ids).map(|_| rng.random::<f64>()).collect())
        .collect();
    let c =
        cmc_curve(&rank_scores(&scores, &probes, &gallery, RankMode::Distance).unwrap()).unwrap();
    let chance = 1.0 / n_ids as f64;
    let sigma = (chance * (1.0 - chance) / n_probe as f64).sqrt();
    assert!(
        (c.values[0] - chance).abs() < 4.0 * sigma,
        "{}",
        c.values[0]
    );
    for (i, v) in c.values.iter().enumerate() {
        let expected = (i + 1) as f64 / n_ids as f64;
        assert!(
            (v - expected).abs() < 5.0 * sigma.max(1e-3),
            "rank {}: {v}",
            i + 1
        );
    }
}

proptest! {
    #[test]
    fn cmc_matches_naive_count(
        n_probe in 1usize..20,
        n_ids in 1u64..8,
        extra in 0usize..30,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gallery: Vec<u64> = (0..n_ids).collect();
        gallery.extend((0..extra).map(|_| rng.random_range(0..n_ids)));
        let probes: Vec<u64> = (0..n_probe).map(|_| rng.random_range(0..n_ids)).collect();
        // coarse scores force ties
        let scores: Vec<Vec<f64>> = (0..n_probe)
            .map(|_| gallery.iter().map(|_| rng.random_range(0..5) as f64).collect())
            .collect();
        let r = rank_scores(&scores, &probes, &gallery, RankMode::Distance).unwrap();
        for ((row, pr), &id) in scores.iter().zip(&r.probes).zip(&probes) {
            let order = naive_order(row, true);
            prop_assert_eq!(&pr.order, &order);
            let first = order.iter().position(|&g| gallery[g] == id).unwrap() + 1;
            prop_assert_eq!(pr.match_rank, first);
        }
        let c = cmc_curve(&r).unwrap();
        prop_assert_eq!(&c.values, &naive_cmc(&r.match_ranks(), gallery.len()));
        prop_assert!(c.values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*c.values.last().unwrap(), 1.0);
    }

    #[test]
    fn order_invariant_under_monotone_transform(
        scores in proptest::collection::vec(0.0f64..100.0, 1..30),
    ) {
        let ids = vec![0u64; scores.len()];
        let a = rank_one(&scores, 0, &ids, RankMode::Distance).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (s * 0.5 + 3.0).exp().ln() * 2.0 + s.powi(3)).collect();
        let b = rank_one(&t, 0, &ids, RankMode::Distance).unwrap();
        prop_assert_eq!(a.order, b.order);
    }
}
