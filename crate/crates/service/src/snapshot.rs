//! The immutable bundle of analysis results that the API serves.
//!
//! On disk a snapshot is a directory with `graph.json`, `events.json` and
//! `snapshot.json`. Loading revalidates every cross-reference, so a directory
//! that loads is safe to serve.

use chrono::NaiveDateTime;
use roadpulse_core::deps::DependencyGraph;
use roadpulse_core::event_impact::{EventImpactRecord, UnitFrequencies};
use roadpulse_core::ingest::{load_events, Event, EventCatalog};
use roadpulse_core::predict::PredictionRecord;
use roadpulse_core::time::iso;
use roadpulse_core::{EventId, TransportationGraph, UnitId, VenueId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;
pub const GRAPH_FILE: &str = "graph.json";
pub const EVENTS_FILE: &str = "events.json";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("inconsistent snapshot ({} problem(s)):\n  {}", .0.len(), .0.join("\n  "))]
    Inconsistent(Vec<String>),
    #[error(transparent)]
    Core(#[from] roadpulse_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: unsupported snapshot format version {found} (expected {FORMAT_VERSION})", path.display())]
    Version { path: PathBuf, found: u32 },
}

/// Contents of `snapshot.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDocument {
    pub format_version: u32,
    #[serde(with = "iso")]
    pub built_at: NaiveDateTime,
    /// Events starting before this instant are historical.
    #[serde(with = "iso")]
    pub as_of: NaiveDateTime,
    pub default_tau: f64,
    pub fingerprints: BTreeMap<String, String>,
    pub impacts: Vec<EventImpactRecord>,
    pub predictions: Vec<PredictionRecord>,
    pub frequencies: Vec<UnitFrequencies>,
    pub dependencies: DependencyGraph,
}

/// Pipeline outputs to assemble into a snapshot.
#[derive(Clone, Debug)]
pub struct SnapshotInputs {
    pub graph: TransportationGraph,
    pub catalog: EventCatalog,
    pub as_of: NaiveDateTime,
    pub default_tau: f64,
    pub fingerprints: BTreeMap<String, String>,
    pub impacts: Vec<EventImpactRecord>,
    pub predictions: Vec<PredictionRecord>,
    pub frequencies: Vec<UnitFrequencies>,
    pub dependencies: DependencyGraph,
}

impl SnapshotInputs {
    pub fn empty(as_of: NaiveDateTime) -> Self {
        Self {
            graph: TransportationGraph::new(BTreeMap::new(), Vec::new()).expect("empty graph is valid"),
            catalog: EventCatalog::default(),
            as_of,
            default_tau: 0.5,
            fingerprints: BTreeMap::new(),
            impacts: Vec::new(),
            predictions: Vec::new(),
            frequencies: Vec::new(),
            dependencies: DependencyGraph::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Historical,
    Future,
}

#[derive(Debug)]
pub struct Snapshot {
    graph: TransportationGraph,
    catalog: EventCatalog,
    doc: SnapshotDocument,
    impacts: BTreeMap<EventId, usize>,
    predictions: BTreeMap<EventId, usize>,
    frequencies: BTreeMap<VenueId, usize>,
}

/// Cross-checks pipeline outputs and bundles them. Every dangling or
/// duplicated reference is reported; nothing is built on failure.
pub fn build_snapshot(inputs: SnapshotInputs) -> Result<Snapshot, SnapshotError> {
    let doc = SnapshotDocument {
        format_version: FORMAT_VERSION,
        built_at: inputs.as_of,
        as_of: inputs.as_of,
        default_tau: inputs.default_tau,
        fingerprints: inputs.fingerprints,
        impacts: inputs.impacts,
        predictions: inputs.predictions,
        frequencies: inputs.frequencies,
        dependencies: inputs.dependencies,
    };
    assemble(inputs.graph, inputs.catalog, doc)
}

fn missing_units<'a>(graph: &TransportationGraph, problems: &mut Vec<String>, owner: String, units: impl Iterator<Item = &'a UnitId>) {
    let unknown: Vec<String> = units.filter(|u| !graph.contains_unit(u)).map(|u| format!("`{u}`")).collect();
    if !unknown.is_empty() {
        problems.push(format!("{owner} references unknown unit(s) {}", unknown.join(", ")));
    }
}

fn assemble(graph: TransportationGraph, catalog: EventCatalog, doc: SnapshotDocument) -> Result<Snapshot, SnapshotError> {
    let mut problems = Vec::new();
    if !(doc.default_tau > 0.0 && doc.default_tau <= 1.0) {
        problems.push(format!("default_tau {} is outside (0, 1]", doc.default_tau));
    }

    let mut impacts = BTreeMap::new();
    for (i, r) in doc.impacts.iter().enumerate() {
        missing_units(&graph, &mut problems, format!("impact of event `{}`", r.event_id), r.units.iter().chain(&r.argmax_unit));
        if impacts.insert(r.event_id.clone(), i).is_some() {
            problems.push(format!("duplicate impact record for event `{}`", r.event_id));
        }
    }
    let mut predictions = BTreeMap::new();
    for (i, r) in doc.predictions.iter().enumerate() {
        if predictions.insert(r.event_id.clone(), i).is_some() {
            problems.push(format!("duplicate prediction for event `{}`", r.event_id));
        }
    }
    let mut frequencies = BTreeMap::new();
    for (i, f) in doc.frequencies.iter().enumerate() {
        missing_units(&graph, &mut problems, format!("TAS frequencies of venue `{}`", f.venue_id), f.counts.keys());
        if f.event_count == 0 || f.counts.values().any(|&c| c == 0 || c > f.event_count) {
            problems.push(format!("TAS frequencies of venue `{}` have counts outside 1..={}", f.venue_id, f.event_count));
        }
        if frequencies.insert(f.venue_id.clone(), i).is_some() {
            problems.push(format!("duplicate TAS frequencies for venue `{}`", f.venue_id));
        }
    }
    let deps = &doc.dependencies;
    let mut owner: BTreeMap<&UnitId, usize> = BTreeMap::new();
    for (i, s) in deps.subgraphs.iter().enumerate() {
        if s.id != i {
            problems.push(format!("stable subgraph at position {i} has id {}", s.id));
        }
        missing_units(&graph, &mut problems, format!("stable subgraph {}", s.id), s.units.iter());
        for u in &s.units {
            if let Some(other) = owner.insert(u, s.id) {
                problems.push(format!("unit `{u}` belongs to stable subgraphs {other} and {}", s.id));
            }
        }
    }
    for p in &deps.pairs {
        if p.a >= p.b || p.b >= deps.subgraphs.len() {
            problems.push(format!("dependency pair ({}, {}) does not reference two existing subgraphs in order", p.a, p.b));
        }
    }

    // Catalog references, reported by id.
    for r in &doc.impacts {
        match catalog.event(&r.event_id) {
            None => problems.push(format!("impact record references unknown event `{}`", r.event_id)),
            Some(e) if e.venue_id != r.venue_id => {
                problems.push(format!("impact record of event `{}` names venue `{}`, catalog says `{}`", r.event_id, r.venue_id, e.venue_id))
            }
            Some(_) => {}
        }
    }
    for r in &doc.predictions {
        match catalog.event(&r.event_id) {
            None => problems.push(format!("prediction references unknown event `{}`", r.event_id)),
            Some(e) if e.venue_id != r.venue_id => {
                problems.push(format!("prediction of event `{}` names venue `{}`, catalog says `{}`", r.event_id, r.venue_id, e.venue_id))
            }
            Some(_) => {}
        }
    }
    for f in &doc.frequencies {
        if catalog.venue(&f.venue_id).is_none() {
            problems.push(format!("TAS frequencies reference unknown venue `{}`", f.venue_id));
        }
    }

    if !problems.is_empty() {
        return Err(SnapshotError::Inconsistent(problems));
    }
    Ok(Snapshot {
        graph,
        catalog,
        doc,
        impacts,
        predictions,
        frequencies,
    })
}

impl Snapshot {
    pub fn graph(&self) -> &TransportationGraph {
        &self.graph
    }

    pub fn catalog(&self) -> &EventCatalog {
        &self.catalog
    }

    pub fn document(&self) -> &SnapshotDocument {
        &self.doc
    }

    pub fn as_of(&self) -> NaiveDateTime {
        self.doc.as_of
    }

    /// Reclassifies events as historical or future against another instant.
    pub fn with_as_of(mut self, as_of: NaiveDateTime) -> Self {
        self.doc.as_of = as_of;
        self
    }

    pub fn kind(&self, event: &Event) -> EventKind {
        if event.start < self.doc.as_of {
            EventKind::Historical
        } else {
            EventKind::Future
        }
    }

    pub fn impact(&self, event: &EventId) -> Option<&EventImpactRecord> {
        self.impacts.get(event).map(|&i| &self.doc.impacts[i])
    }

    pub fn prediction(&self, event: &EventId) -> Option<&PredictionRecord> {
        self.predictions.get(event).map(|&i| &self.doc.predictions[i])
    }

    pub fn frequencies(&self, venue: &VenueId) -> Option<&UnitFrequencies> {
        self.frequencies.get(venue).map(|&i| &self.doc.frequencies[i])
    }

    pub fn dependencies(&self) -> &DependencyGraph {
        &self.doc.dependencies
    }

    /// Number of artifacts of each kind, for reconciliation with the pipeline.
    pub fn counts(&self) -> BTreeMap<&'static str, usize> {
        let deps = &self.doc.dependencies;
        BTreeMap::from([
            ("nodes", self.graph.node_count()),
            ("units", self.graph.unit_count()),
            ("venues", self.catalog.venues().count()),
            ("events", self.catalog.events().len()),
            ("impacts", self.doc.impacts.len()),
            ("predictions", self.doc.predictions.len()),
            ("tas_venues", self.doc.frequencies.len()),
            ("stable_subgraphs", deps.subgraphs.len()),
            ("dependency_pairs", deps.pairs.len()),
        ])
    }

    /// Event ids with neither an impact record nor a prediction.
    pub fn uncovered_events(&self) -> BTreeSet<&EventId> {
        self.catalog
            .events()
            .iter()
            .map(|e| &e.id)
            .filter(|id| !self.impacts.contains_key(*id) && !self.predictions.contains_key(*id))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SnapshotError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| SnapshotError::Io { path: dir.into(), source })?;
        self.graph.save(dir.join(GRAPH_FILE))?;
        self.catalog.save(dir.join(EVENTS_FILE))?;
        let path = dir.join(SNAPSHOT_FILE);
        let text = serde_json::to_string_pretty(&self.doc).map_err(|source| SnapshotError::Json { path: path.clone(), source })?;
        std::fs::write(&path, text).map_err(|source| SnapshotError::Io { path, source })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SnapshotError> {
        let dir = dir.as_ref();
        let graph = TransportationGraph::load(dir.join(GRAPH_FILE))?;
        let catalog = load_events(dir.join(EVENTS_FILE))?;
        let path = dir.join(SNAPSHOT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| SnapshotError::Io { path: path.clone(), source })?;
        let doc: SnapshotDocument = serde_json::from_str(&text).map_err(|source| SnapshotError::Json { path: path.clone(), source })?;
        if doc.format_version != FORMAT_VERSION {
            return Err(SnapshotError::Version {
                path,
                found: doc.format_version,
            });
        }
        assemble(graph, catalog, doc)
    }
}
