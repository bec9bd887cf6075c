//! The transportation graph: junction nodes joined by directed road-segment
//! units, with parallel units allowed.

use crate::error::{Error, Result};
use crate::geo::{polyline_midpoint, GeoPoint};
use crate::ids::{NodeId, UnitId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

/// Endpoint coordinates must match their node within this many degrees.
pub const ENDPOINT_TOLERANCE_DEG: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub id: UnitId,
    pub from: NodeId,
    pub to: NodeId,
    pub speed_limit_kmh: f64,
    pub length_m: f64,
    pub geometry: Vec<GeoPoint>,
}

#[derive(Clone, Debug)]
pub struct TransportationGraph {
    nodes: BTreeMap<NodeId, GeoPoint>,
    units: BTreeMap<UnitId, Unit>,
    successors: BTreeMap<UnitId, Vec<UnitId>>,
    predecessors: BTreeMap<UnitId, Vec<UnitId>>,
    neighbors: BTreeMap<UnitId, Vec<UnitId>>,
    reference_points: BTreeMap<UnitId, GeoPoint>,
}

impl PartialEq for TransportationGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.units == other.units
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<NodeRecord>,
    units: Vec<UnitRecord>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: NodeId,
    lon: f64,
    lat: f64,
}

#[derive(Serialize, Deserialize)]
struct UnitRecord {
    id: UnitId,
    from: NodeId,
    to: NodeId,
    speed_limit_kmh: f64,
    length_m: f64,
    geometry: Vec<[f64; 2]>,
}

impl TransportationGraph {
    pub fn new(
        nodes: impl IntoIterator<Item = (NodeId, GeoPoint)>,
        units: impl IntoIterator<Item = Unit>,
    ) -> Result<Self> {
        let mut node_map = BTreeMap::new();
        for (id, at) in nodes {
            GeoPoint::new(at.lon, at.lat)?;
            if node_map.insert(id.clone(), at).is_some() {
                return Err(Error::Validation(format!("duplicate node id `{id}`")));
            }
        }
        let mut unit_map = BTreeMap::new();
        for (index, unit) in units.into_iter().enumerate() {
            validate_unit(index, &unit, &node_map)?;
            if unit_map.contains_key(&unit.id) {
                return Err(Error::Validation(format!("units[{index}]: duplicate unit id `{}`", unit.id)));
            }
            unit_map.insert(unit.id.clone(), unit);
        }
        Ok(Self::index(node_map, unit_map))
    }

    fn index(nodes: BTreeMap<NodeId, GeoPoint>, units: BTreeMap<UnitId, Unit>) -> Self {
        let mut outgoing: BTreeMap<&NodeId, Vec<&UnitId>> = BTreeMap::new();
        let mut incoming: BTreeMap<&NodeId, Vec<&UnitId>> = BTreeMap::new();
        for u in units.values() {
            outgoing.entry(&u.from).or_default().push(&u.id);
            incoming.entry(&u.to).or_default().push(&u.id);
        }
        let mut successors = BTreeMap::new();
        let mut predecessors = BTreeMap::new();
        let mut neighbors = BTreeMap::new();
        let mut reference_points = BTreeMap::new();
        for u in units.values() {
            let succ: Vec<UnitId> = outgoing
                .get(&u.to)
                .into_iter()
                .flatten()
                .map(|&id| id.clone())
                .collect();
            let pred: Vec<UnitId> = incoming
                .get(&u.from)
                .into_iter()
                .flatten()
                .map(|&id| id.clone())
                .collect();
            let mut touching = BTreeSet::new();
            for node in [&u.from, &u.to] {
                for list in [outgoing.get(node), incoming.get(node)].into_iter().flatten() {
                    touching.extend(list.iter().map(|&id| id.clone()));
                }
            }
            touching.remove(&u.id);
            successors.insert(u.id.clone(), succ);
            predecessors.insert(u.id.clone(), pred);
            neighbors.insert(u.id.clone(), touching.into_iter().collect());
            reference_points.insert(u.id.clone(), polyline_midpoint(&u.geometry));
        }
        Self {
            nodes,
            units,
            successors,
            predecessors,
            neighbors,
            reference_points,
        }
    }

    pub fn node(&self, id: &NodeId) -> Option<GeoPoint> {
        self.nodes.get(id).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, &GeoPoint)> {
        self.nodes.iter()
    }

    pub fn unit(&self, id: &UnitId) -> Option<&Unit> {
        self.units.get(id)
    }

    pub fn units(&self) -> impl Iterator<Item = &Unit> {
        self.units.values()
    }

    pub fn unit_ids(&self) -> impl Iterator<Item = &UnitId> {
        self.units.keys()
    }

    pub fn contains_unit(&self, id: &UnitId) -> bool {
        self.units.contains_key(id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn unit_count(&self) -> usize {
        self.units.len()
    }

    /// Units leaving the head node of `id`.
    pub fn successors(&self, id: &UnitId) -> &[UnitId] {
        self.successors.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Units entering the tail node of `id`.
    pub fn predecessors(&self, id: &UnitId) -> &[UnitId] {
        self.predecessors.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Units sharing at least one endpoint node with `id`, direction ignored.
    pub fn neighbors(&self, id: &UnitId) -> &[UnitId] {
        self.neighbors.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The unit's polyline midpoint, the single point standing in for the
    /// unit in every distance computation.
    pub fn reference_point(&self, id: &UnitId) -> Option<GeoPoint> {
        self.reference_points.get(id).copied()
    }

    /// Bounding box as `[min_lon, min_lat, max_lon, max_lat]`.
    pub fn bbox(&self) -> Option<[f64; 4]> {
        let mut it = self.nodes.values();
        let first = it.next()?;
        let mut b = [first.lon, first.lat, first.lon, first.lat];
        for p in it {
            b[0] = b[0].min(p.lon);
            b[1] = b[1].min(p.lat);
            b[2] = b[2].max(p.lon);
            b[3] = b[3].max(p.lat);
        }
        Some(b)
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, GraphLoadError> {
        let file: GraphFile = serde_json::from_str(text).map_err(GraphLoadError::Json)?;
        let nodes = file
            .nodes
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                GeoPoint::new(n.lon, n.lat)
                    .map(|p| (n.id.clone(), p))
                    .map_err(|_| Error::Validation(format!("nodes[{i}] (`{}`): coordinate out of range", n.id)))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(GraphLoadError::Invalid)?;
        let units = file
            .units
            .into_iter()
            .enumerate()
            .map(|(i, u)| {
                let geometry = u
                    .geometry
                    .iter()
                    .map(|&[lon, lat]| GeoPoint::new(lon, lat))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|_| Error::Validation(format!("units[{i}] (`{}`).geometry: coordinate out of range", u.id)))?;
                Ok(Unit {
                    id: u.id,
                    from: u.from,
                    to: u.to,
                    speed_limit_kmh: u.speed_limit_kmh,
                    length_m: u.length_m,
                    geometry,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(GraphLoadError::Invalid)?;
        Self::new(nodes, units).map_err(GraphLoadError::Invalid)
    }

    pub fn to_json_string(&self) -> String {
        let file = GraphFile {
            nodes: self
                .nodes
                .iter()
                .map(|(id, p)| NodeRecord {
                    id: id.clone(),
                    lon: p.lon,
                    lat: p.lat,
                })
                .collect(),
            units: self
                .units
                .values()
                .map(|u| UnitRecord {
                    id: u.id.clone(),
                    from: u.from.clone(),
                    to: u.to.clone(),
                    speed_limit_kmh: u.speed_limit_kmh,
                    length_m: u.length_m,
                    geometry: u.geometry.iter().map(GeoPoint::as_array).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            GraphLoadError::Json(source) => Error::json(path, source),
            GraphLoadError::Invalid(err) => Error::Validation(format!("{}: {err}", path.display())),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphLoadError {
    #[error("{0}")]
    Json(serde_json::Error),
    #[error("{0}")]
    Invalid(Error),
}

fn validate_unit(index: usize, unit: &Unit, nodes: &BTreeMap<NodeId, GeoPoint>) -> Result<()> {
    let here = |field: &str, msg: String| Error::Validation(format!("units[{index}] (`{}`).{field}: {msg}", unit.id));
    let from = nodes
        .get(&unit.from)
        .ok_or_else(|| here("from", format!("unknown node `{}`", unit.from)))?;
    let to = nodes
        .get(&unit.to)
        .ok_or_else(|| here("to", format!("unknown node `{}`", unit.to)))?;
    if !(unit.speed_limit_kmh > 0.0) {
        return Err(here("speed_limit_kmh", format!("must be > 0, got {}", unit.speed_limit_kmh)));
    }
    if !(unit.length_m > 0.0) {
        return Err(here("length_m", format!("must be > 0, got {}", unit.length_m)));
    }
    if unit.geometry.len() < 2 {
        return Err(here("geometry", "needs at least 2 points".into()));
    }
    let close = |a: &GeoPoint, b: &GeoPoint| {
        (a.lon - b.lon).abs() <= ENDPOINT_TOLERANCE_DEG && (a.lat - b.lat).abs() <= ENDPOINT_TOLERANCE_DEG
    };
    if !close(&unit.geometry[0], from) {
        return Err(here("geometry", format!("first point does not match node `{}`", unit.from)));
    }
    if !close(unit.geometry.last().unwrap(), to) {
        return Err(here("geometry", format!("last point does not match node `{}`", unit.to)));
    }
    Ok(())
}

/// Partitions `units` by undirected adjacency. Components come out sorted by
/// their smallest unit id.
pub fn connected_components<'a>(
    units: impl IntoIterator<Item = &'a UnitId>,
    graph: &TransportationGraph,
) -> Result<Vec<BTreeSet<UnitId>>> {
    let mut members = BTreeSet::new();
    for id in units {
        if !graph.contains_unit(id) {
            return Err(Error::UnknownUnit(id.to_string()));
        }
        members.insert(id);
    }
    let mut seen: BTreeSet<&UnitId> = BTreeSet::new();
    let mut components = Vec::new();
    for &start in &members {
        if !seen.insert(start) {
            continue;
        }
        let mut component = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(id) = queue.pop_front() {
            component.insert(id.clone());
            for next in graph.neighbors(id) {
                if members.contains(next) && seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        components.push(component);
    }
    Ok(components)
}
