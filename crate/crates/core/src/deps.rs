//! Structural dependencies between congested subgraphs.
//!
//! Affected units are clustered independently at every bin (connected
//! components under undirected adjacency). Clusters are then merged greedily in
//! chronological order into stable subgraphs, and every pair of nearby stable
//! subgraphs is scored by the mutual information of their binary activity
//! series, discounted by distance: `score = mi / (1 + distance / delta0)`.

use crate::affectedness::AffectednessMask;
use crate::error::{Error, Result};
use crate::geo::{geo_distance, GeoPoint};
use crate::graph::{connected_components, TransportationGraph};
use crate::ids::UnitId;
use crate::time::TimeBin;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DependencyParams {
    /// Minimum Jaccard overlap for a cluster to join a stable subgraph.
    pub theta_overlap: f64,
    /// Distance at which the score halves, meters.
    pub delta0_m: f64,
    /// Pairs farther apart than this are not scored, meters.
    pub d_max_m: f64,
    pub score_min: f64,
}

impl Default for DependencyParams {
    fn default() -> Self {
        Self {
            theta_overlap: 0.2,
            delta0_m: 1_000.0,
            d_max_m: 5_000.0,
            score_min: 0.05,
        }
    }
}

impl DependencyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_overlap > 0.0 && self.theta_overlap <= 1.0) {
            return Err(Error::Validation(format!("theta_overlap must lie in (0, 1], got {}", self.theta_overlap)));
        }
        if !(self.delta0_m > 0.0) {
            return Err(Error::Validation("delta0 must be > 0".into()));
        }
        if !(self.d_max_m >= 0.0 && self.score_min >= 0.0) {
            return Err(Error::Validation("d_max and score_min must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepCluster {
    pub bin: TimeBin,
    /// Position among the clusters of the same bin.
    pub id: usize,
    pub units: BTreeSet<UnitId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableSubgraph {
    pub id: usize,
    pub units: BTreeSet<UnitId>,
    pub activity: BTreeSet<TimeBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyPair {
    pub a: usize,
    pub b: usize,
    #[serde(rename = "mi_bits")]
    pub mutual_information: f64,
    pub distance_m: f64,
    pub score: f64,
}

impl DependencyPair {
    pub fn partner_of(&self, id: usize) -> Option<usize> {
        match id {
            _ if id == self.a => Some(self.b),
            _ if id == self.b => Some(self.a),
            _ => None,
        }
    }
}

/// Clusters of the units affected at `bin`, ordered by smallest unit id.
pub fn cluster_timestep(bin: TimeBin, mask: &AffectednessMask, graph: &TransportationGraph) -> Result<Vec<TimestepCluster>> {
    let Some(units) = mask.units_at(bin) else {
        return Ok(Vec::new());
    };
    Ok(connected_components(units, graph)?
        .into_iter()
        .enumerate()
        .map(|(id, units)| TimestepCluster { bin, id, units })
        .collect())
}

/// Clusters of every bin with affected units, in chronological order.
pub fn cluster_all(mask: &AffectednessMask, graph: &TransportationGraph) -> Result<Vec<TimestepCluster>> {
    let mut out = Vec::new();
    for (&bin, _) in mask.active_bins() {
        out.extend(cluster_timestep(bin, mask, graph)?);
    }
    Ok(out)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Greedy chronological merge of timestep clusters into disjoint stable
/// subgraphs.
///
/// Each cluster joins the stable subgraph it overlaps most (Jaccard on unit
/// sets, ties to the lowest id) when that overlap reaches `theta_overlap`, and
/// founds a new one otherwise. Afterwards, stable subgraphs sharing a unit are
/// unioned transitively. Output ids follow the smallest contained unit id.
pub fn merge_subgraphs(clusters: &[TimestepCluster], theta_overlap: f64) -> Result<Vec<StableSubgraph>> {
    if !(theta_overlap > 0.0 && theta_overlap <= 1.0) {
        return Err(Error::Validation(format!("theta_overlap must lie in (0, 1], got {theta_overlap}")));
    }
    let mut order: Vec<&TimestepCluster> = clusters.iter().filter(|c| !c.units.is_empty()).collect();
    order.sort_by_key(|c| (c.bin, c.id));

    let mut stable: Vec<(BTreeSet<UnitId>, BTreeSet<TimeBin>)> = Vec::new();
    let mut holders: HashMap<UnitId, BTreeSet<usize>> = HashMap::new();
    for cluster in order {
        let mut overlap: BTreeMap<usize, usize> = BTreeMap::new();
        for u in &cluster.units {
            for &s in holders.get(u).into_iter().flatten() {
                *overlap.entry(s).or_insert(0) += 1;
            }
        }
        let best = overlap
            .iter()
            .map(|(&s, &inter)| {
                let union = stable[s].0.len() + cluster.units.len() - inter;
                (s, inter as f64 / union as f64)
            })
            .fold(None::<(usize, f64)>, |best, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        let target = match best {
            Some((s, j)) if j >= theta_overlap => s,
            _ => {
                stable.push(Default::default());
                stable.len() - 1
            }
        };
        for u in &cluster.units {
            if stable[target].0.insert(u.clone()) {
                holders.entry(u.clone()).or_default().insert(target);
            }
        }
        stable[target].1.insert(cluster.bin);
    }

    let mut parent: Vec<usize> = (0..stable.len()).collect();
    for owners in holders.values() {
        let mut it = owners.iter();
        if let Some(&first) = it.next() {
            for &other in it {
                let (ra, rb) = (find(&mut parent, first), find(&mut parent, other));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, (BTreeSet<UnitId>, BTreeSet<TimeBin>)> = BTreeMap::new();
    for (i, (units, activity)) in stable.into_iter().enumerate() {
        let root = find(&mut parent, i);
        let g = groups.entry(root).or_default();
        g.0.extend(units);
        g.1.extend(activity);
    }
    let mut merged: Vec<_> = groups.into_values().collect();
    merged.sort_by(|a, b| a.0.first().cmp(&b.0.first()));
    Ok(merged
        .into_iter()
        .enumerate()
        .map(|(id, (units, activity))| StableSubgraph { id, units, activity })
        .collect())
}

/// Mutual information, in bits, between two binary activity series over
/// `domain`. Activity outside the domain is ignored.
pub fn mutual_information(a: &BTreeSet<TimeBin>, b: &BTreeSet<TimeBin>, domain: &BTreeSet<TimeBin>) -> Result<f64> {
    if domain.is_empty() {
        return Err(Error::Empty("mutual information needs a non-empty bin domain"));
    }
    let n = domain.len() as f64;
    let n_a = a.iter().filter(|t| domain.contains(t)).count() as f64;
    let n_b = b.iter().filter(|t| domain.contains(t)).count() as f64;
    let n_ab = a.intersection(b).filter(|t| domain.contains(t)).count() as f64;
    let cells = [
        (n_ab, n_a, n_b),
        (n_a - n_ab, n_a, n - n_b),
        (n_b - n_ab, n - n_a, n_b),
        (n - n_a - n_b + n_ab, n - n_a, n - n_b),
    ];
    let mi: f64 = cells
        .iter()
        .filter(|(joint, _, _)| *joint > 0.0)
        .map(|&(joint, mx, my)| (joint / n) * (joint * n / (mx * my)).log2())
        .sum();
    Ok(mi.max(0.0))
}

/// Minimum reference-point distance between two unit sets, meters.
pub fn subgraph_distance(a: &BTreeSet<UnitId>, b: &BTreeSet<UnitId>, graph: &TransportationGraph) -> Result<f64> {
    let pa = reference_points(a, graph)?;
    let pb = reference_points(b, graph)?;
    Ok(min_distance(&pa, &pb))
}

fn reference_points(units: &BTreeSet<UnitId>, graph: &TransportationGraph) -> Result<Vec<GeoPoint>> {
    if units.is_empty() {
        return Err(Error::Empty("subgraph distance needs non-empty subgraphs"));
    }
    units
        .iter()
        .map(|u| graph.reference_point(u).ok_or_else(|| Error::UnknownUnit(u.to_string())))
        .collect()
}

fn min_distance(a: &[GeoPoint], b: &[GeoPoint]) -> f64 {
    a.iter()
        .flat_map(|p| b.iter().map(move |q| geo_distance(*p, *q)))
        .fold(f64::INFINITY, f64::min)
}

/// Mutual information discounted by distance; equals `mi` at distance 0 and
/// halves at `delta0_m`.
pub fn dependency_score(mi_bits: f64, distance_m: f64, delta0_m: f64) -> f64 {
    mi_bits / (1.0 + distance_m / delta0_m)
}

/// Scores every pair within `d_max_m`; returns pairs scoring at least
/// `score_min`, best first, ties by (a, b).
pub fn score_dependencies(
    subgraphs: &[StableSubgraph],
    domain: &BTreeSet<TimeBin>,
    graph: &TransportationGraph,
    params: &DependencyParams,
) -> Result<Vec<DependencyPair>> {
    params.validate()?;
    let points = subgraphs
        .iter()
        .map(|s| reference_points(&s.units, graph))
        .collect::<Result<Vec<_>>>()?;
    // Anchor point and spread of each subgraph give a cheap lower bound on
    // pair distance through the triangle inequality.
    let spread: Vec<(GeoPoint, f64)> = points
        .iter()
        .map(|p| {
            let anchor = p[0];
            (anchor, p.iter().map(|q| geo_distance(anchor, *q)).fold(0.0, f64::max))
        })
        .collect();
    let mut pairs = Vec::new();
    for i in 0..subgraphs.len() {
        for j in i + 1..subgraphs.len() {
            let bound = geo_distance(spread[i].0, spread[j].0) - spread[i].1 - spread[j].1;
            if bound > params.d_max_m * (1.0 + 1e-9) {
                continue;
            }
            let distance_m = min_distance(&points[i], &points[j]);
            if distance_m > params.d_max_m {
                continue;
            }
            let mutual_information = mutual_information(&subgraphs[i].activity, &subgraphs[j].activity, domain)?;
            let score = dependency_score(mutual_information, distance_m, params.delta0_m);
            if score >= params.score_min {
                let (a, b) = (subgraphs[i].id.min(subgraphs[j].id), subgraphs[i].id.max(subgraphs[j].id));
                pairs.push(DependencyPair {
                    a,
                    b,
                    mutual_information,
                    distance_m,
                    score,
                });
            }
        }
    }
    pairs.sort_by(|x, y| y.score.total_cmp(&x.score).then_with(|| (x.a, x.b).cmp(&(y.a, y.b))));
    Ok(pairs)
}

/// Stable subgraphs together with their scored dependency links.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub subgraphs: Vec<StableSubgraph>,
    pub pairs: Vec<DependencyPair>,
}

impl DependencyGraph {
    pub fn subgraph(&self, id: usize) -> Option<&StableSubgraph> {
        self.subgraphs.iter().find(|s| s.id == id)
    }

    /// Partner ids of one subgraph with their pairs, best score first.
    pub fn partners(&self, id: usize) -> Vec<(usize, &DependencyPair)> {
        self.pairs.iter().filter_map(|p| p.partner_of(id).map(|o| (o, p))).collect()
    }
}

/// Full detection chain from an affectedness mask.
pub fn detect_dependencies(mask: &AffectednessMask, graph: &TransportationGraph, params: &DependencyParams) -> Result<DependencyGraph> {
    params.validate()?;
    let clusters = cluster_all(mask, graph)?;
    let subgraphs = merge_subgraphs(&clusters, params.theta_overlap)?;
    let Some(range) = mask.domain() else {
        return Ok(DependencyGraph {
            subgraphs,
            pairs: Vec::new(),
        });
    };
    let domain: BTreeSet<TimeBin> = range.iter().collect();
    let pairs = score_dependencies(&subgraphs, &domain, graph, params)?;
    Ok(DependencyGraph { subgraphs, pairs })
}
