//! Cross-checks of the analytics against small brute-force implementations.

use chrono::NaiveDate;
use proptest::prelude::*;
use roadpulse_core::affectedness::{build_profile, classify, LoadSeries};
use roadpulse_core::deps::{cluster_timestep, merge_subgraphs, mutual_information, subgraph_distance, TimestepCluster};
use roadpulse_core::synth::{grid_graph, GridSpec};
use roadpulse_core::{geo_distance, TimeBin, TransportationGraph, UnitId};
use std::collections::{BTreeMap, BTreeSet};

fn graph(rows: usize, cols: usize) -> TransportationGraph {
    grid_graph(&GridSpec {
        rows,
        cols,
        spacing_m: 200.0,
        origin_lon: 9.70,
        origin_lat: 52.35,
        speed_limit_kmh: 50.0,
        arterial_every: 0,
        arterial_limit_kmh: 70.0,
    })
    .unwrap()
}

fn bin(i: i64) -> TimeBin {
    TimeBin::new(NaiveDate::from_ymd_opt(2017, 10, 2).unwrap(), 0).unwrap().offset(i)
}

/// Union-find over units sharing an endpoint node, ignoring direction.
fn union_find_components(units: &BTreeSet<UnitId>, g: &TransportationGraph) -> BTreeSet<BTreeSet<UnitId>> {
    let ids: Vec<&UnitId> = units.iter().collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        if p[x] != x {
            let r = find(p, p[x]);
            p[x] = r;
        }
        p[x]
    }
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let (a, b) = (g.unit(ids[i]).unwrap(), g.unit(ids[j]).unwrap());
            let touch = [&a.from, &a.to].iter().any(|n| **n == b.from || **n == b.to);
            if touch {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<UnitId>> = BTreeMap::new();
    for (i, u) in ids.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().insert((*u).clone());
    }
    groups.into_values().collect()
}

fn is_connected(units: &BTreeSet<UnitId>, g: &TransportationGraph) -> bool {
    union_find_components(units, g).len() <= 1
}

fn pick_units(g: &TransportationGraph, picks: &[bool]) -> BTreeSet<UnitId> {
    g.unit_ids().zip(picks.iter().cycle()).filter(|(_, &p)| p).map(|(u, _)| u.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn components_match_union_find(picks in prop::collection::vec(prop::bool::weighted(0.3), 48)) {
        let g = graph(4, 4);
        let units = pick_units(&g, &picks);
        let ours: BTreeSet<BTreeSet<UnitId>> = roadpulse_core::connected_components(units.iter(), &g).unwrap().into_iter().collect();
        prop_assert_eq!(ours, union_find_components(&units, &g));
    }

    #[test]
    fn timestep_clusters_match_union_find(picks in prop::collection::vec(prop::bool::weighted(0.25), 48)) {
        let g = graph(4, 4);
        let units = pick_units(&g, &picks);
        let mask = roadpulse_core::affectedness::AffectednessMask::new(
            None,
            units.iter().map(|u| (u.clone(), BTreeSet::from([bin(0)]))).collect(),
        );
        let clusters = cluster_timestep(bin(0), &mask, &g).unwrap();
        let ours: BTreeSet<BTreeSet<UnitId>> = clusters.iter().map(|c| c.units.clone()).collect();
        prop_assert_eq!(ours, union_find_components(&units, &g));
        let firsts: Vec<_> = clusters.iter().map(|c| c.units.first().cloned()).collect();
        let mut sorted = firsts.clone();
        sorted.sort();
        prop_assert_eq!(firsts, sorted);
    }

    #[test]
    fn merge_post_conditions(
        frames in prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.2), 48), 1..8),
        theta in 0.05f64..1.0,
    ) {
        let g = graph(4, 4);
        let mut clusters = Vec::new();
        let mut clustered = BTreeSet::new();
        for (t, picks) in frames.iter().enumerate() {
            let units = pick_units(&g, picks);
            clustered.extend(units.iter().cloned());
            for (id, c) in roadpulse_core::connected_components(units.iter(), &g).unwrap().into_iter().enumerate() {
                clusters.push(TimestepCluster { bin: bin(t as i64), id, units: c });
            }
        }
        let stable = merge_subgraphs(&clusters, theta).unwrap();
        let mut seen = BTreeSet::new();
        for s in &stable {
            prop_assert!(!s.activity.is_empty());
            prop_assert!(is_connected(&s.units, &g));
            for u in &s.units {
                prop_assert!(seen.insert(u.clone()), "unit {} in two stable subgraphs", u);
            }
        }
        prop_assert_eq!(seen, clustered);
        // Every cluster's units land in exactly one subgraph that is active at its bin.
        for c in &clusters {
            let owner: Vec<_> = stable.iter().filter(|s| s.units.is_superset(&c.units)).collect();
            prop_assert_eq!(owner.len(), 1);
            prop_assert!(owner[0].activity.contains(&c.bin));
        }
    }

    #[test]
    fn mutual_information_matches_contingency_table(
        a in prop::collection::vec(any::<bool>(), 1..300),
        b_seed in prop::collection::vec(any::<bool>(), 300),
    ) {
        let n = a.len();
        let b = &b_seed[..n];
        let domain: BTreeSet<TimeBin> = (0..n as i64).map(bin).collect();
        let sa: BTreeSet<TimeBin> = (0..n).filter(|&i| a[i]).map(|i| bin(i as i64)).collect();
        let sb: BTreeSet<TimeBin> = (0..n).filter(|&i| b[i]).map(|i| bin(i as i64)).collect();
        let mut table = [[0f64; 2]; 2];
        for i in 0..n {
            table[a[i] as usize][b[i] as usize] += 1.0;
        }
        let mut oracle = 0.0;
        for x in 0..2 {
            for y in 0..2 {
                let pxy = table[x][y] / n as f64;
                let px = (table[x][0] + table[x][1]) / n as f64;
                let py = (table[0][y] + table[1][y]) / n as f64;
                if pxy > 0.0 {
                    oracle += pxy * (pxy / (px * py)).log2();
                }
            }
        }
        let mi = mutual_information(&sa, &sb, &domain).unwrap();
        prop_assert!((mi - oracle).abs() <= 1e-12, "{} vs {}", mi, oracle);
        prop_assert!(mi >= 0.0);
    }

    #[test]
    fn subgraph_distance_is_pairwise_minimum(
        pa in prop::collection::vec(prop::bool::weighted(0.1), 48),
        pb in prop::collection::vec(prop::bool::weighted(0.1), 48),
    ) {
        let g = graph(4, 4);
        let (a, b) = (pick_units(&g, &pa), pick_units(&g, &pb));
        prop_assume!(!a.is_empty() && !b.is_empty());
        let mut oracle = f64::INFINITY;
        for x in &a {
            for y in &b {
                oracle = oracle.min(geo_distance(g.reference_point(x).unwrap(), g.reference_point(y).unwrap()));
            }
        }
        prop_assert_eq!(subgraph_distance(&a, &b, &g).unwrap(), oracle);
    }
}

/// Flags computed by sorting each group and applying the Type-7 fence directly.
#[test]
fn classify_matches_brute_force_fence() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let units: Vec<UnitId> = (0..5).map(|i| UnitId::from(format!("u{i}"))).collect();
    let mut records = Vec::new();
    for u in &units {
        for day in 0..40 {
            for slot in [0i64, 33, 70] {
                if rng.random_bool(0.8) {
                    let load = if rng.random_bool(0.1) { rng.random_range(0.5..1.0) } else { rng.random_range(0.0..0.4) };
                    records.push((u.clone(), bin(day * 96 + slot), load));
                }
            }
        }
    }
    let loads = LoadSeries::from_records(records.clone()).unwrap();
    let profile = build_profile(&loads, 4).unwrap();
    let mask = classify(&loads, &profile);

    let mut groups: BTreeMap<(UnitId, usize), Vec<(TimeBin, f64)>> = BTreeMap::new();
    for (u, b, l) in &records {
        groups.entry((u.clone(), b.week_slot())).or_default().push((*b, *l));
    }
    let mut expected: BTreeSet<(UnitId, TimeBin)> = BTreeSet::new();
    for ((u, _), obs) in groups {
        if obs.len() < 4 {
            continue;
        }
        let mut v: Vec<f64> = obs.iter().map(|o| o.1).collect();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = (v.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        let fence = q(0.75) + 1.5 * (q(0.75) - q(0.25));
        expected.extend(obs.iter().filter(|o| o.1 > fence).map(|o| (u.clone(), o.0)));
    }
    let got: BTreeSet<(UnitId, TimeBin)> = mask.units().flat_map(|(u, bins)| bins.iter().map(move |b| (u.clone(), *b))).collect();
    assert!(!expected.is_empty());
    assert_eq!(got, expected);
}
