//! Stage execution with file-based handoff.
//!
//! Each stage reads the artifacts of earlier stages from the output
//! directory, writes its own into a subdirectory, and records inputs,
//! outputs (with SHA-256) and counts in `manifest.json`. Wall times go to
//! `timings.json` so that everything else is byte-identical across reruns.
//! While a stage runs its directory holds an `INCOMPLETE` marker, which stays
//! behind (with the error) if the stage fails.

use crate::config::PipelineConfig;
use crate::{ConfigError, MissingInput};
use anyhow::{anyhow, Context, Result};
use chrono::NaiveDateTime;
use roadpulse_core::affectedness::{build_profile_within, classify, AffectednessMask, LoadSeries};
use roadpulse_core::deps::{detect_dependencies, DependencyGraph};
use roadpulse_core::event_impact::{analyze_events, EventImpactRecord, ImpactCurve, SkippedEvent, SpatialImpact, UnitFrequencies};
use roadpulse_core::geojson::{unit_layer, venue_circle, FeatureCollection};
use roadpulse_core::ingest::{load_events, load_traffic, EventCatalog, ParseMode, TrafficStore};
use roadpulse_core::predict::{train, Exemplar, PredictionRecord, TrainedPredictor};
use roadpulse_core::synth::generate_synthetic;
use roadpulse_core::{sha256_hex, BinRange, EventId, TimeBin, TransportationGraph};
use roadpulse_service::{build_snapshot, Snapshot, SnapshotInputs};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const CONFIG_FILE: &str = "config.json";
const MARKER: &str = "INCOMPLETE";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: String,
    pub inputs: BTreeMap<String, FileRef>,
    pub outputs: BTreeMap<String, FileRef>,
    pub counts: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub struct Stage<'p> {
    dir: PathBuf,
    root: &'p Path,
    record: StageRecord,
}

fn display_rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

impl Stage<'_> {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers an input file, failing with [`MissingInput`] if it is absent.
    pub fn input(&mut self, label: &str, path: &Path) -> Result<PathBuf> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => anyhow!(MissingInput(path.to_path_buf())),
            _ => anyhow!(e).context(format!("reading {}", path.display())),
        })?;
        self.record.inputs.insert(
            label.into(),
            FileRef {
                path: display_rel(self.root, path),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(path.to_path_buf())
    }

    /// Registers a file this stage has written.
    pub fn output(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = std::fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        self.record.outputs.insert(
            name.into(),
            FileRef {
                path: display_rel(self.root, &path),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.output(name)
    }

    pub fn count(&mut self, key: &str, value: impl Into<Value>) {
        self.record.counts.insert(key.into(), value.into());
    }
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
}

fn read_json<T: DeserializeOwned>(stage: &mut Stage, label: &str, path: &Path) -> Result<T> {
    stage.input(label, path)?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn time_arg(t: Option<NaiveDateTime>) -> Option<TimeBin> {
    t.map(TimeBin::containing)
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate().map_err(|e| anyhow!(ConfigError(format!("{e:#}"))))?;
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        let p = Self { cfg, out };
        std::fs::write(p.out.join(CONFIG_FILE), p.portable_config() + "\n")?;
        Ok(p)
    }

    /// The configuration with paths relative to the output directory, so that
    /// runs into different directories record identical configs.
    fn portable_config(&self) -> String {
        let mut cfg = self.cfg.clone();
        cfg.output_dir = PathBuf::from(".");
        for p in [&mut cfg.inputs.graph, &mut cfg.inputs.traffic, &mut cfg.inputs.events].into_iter().flatten() {
            if let Ok(rel) = p.strip_prefix(&self.out) {
                *p = rel.to_path_buf();
            }
        }
        cfg.to_json_string()
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    fn path(&self, stage: &str, file: &str) -> PathBuf {
        self.out.join(stage).join(file)
    }

    fn load_manifest(&self) -> Manifest {
        std::fs::read_to_string(self.out.join(MANIFEST_FILE))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    fn run_stage(&self, name: &str, dir: &str, body: impl FnOnce(&mut Stage) -> Result<()>) -> Result<()> {
        let started = Instant::now();
        let dir = self.out.join(dir);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join(MARKER), format!("stage `{name}` has not finished\n"))?;
        let mut stage = Stage {
            dir: dir.clone(),
            root: &self.out,
            record: StageRecord::default(),
        };
        log::info!("stage {name}: running");
        let result = body(&mut stage);
        let mut record = stage.record;
        match &result {
            Ok(()) => {
                std::fs::remove_file(dir.join(MARKER))?;
                record.status = "complete".into();
                log::info!("stage {name}: done in {:.2?}", started.elapsed());
            }
            Err(e) => {
                std::fs::write(dir.join(MARKER), format!("stage `{name}` failed: {e:#}\n"))?;
                record.status = "failed".into();
                record.error = Some(format!("{e:#}"));
            }
        }
        let mut manifest = self.load_manifest();
        manifest.config_sha256 = sha256_hex(self.portable_config().as_bytes());
        manifest.stages.insert(name.into(), record);
        std::fs::write(self.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;

        let timings_path = self.out.join(TIMINGS_FILE);
        let mut timings: BTreeMap<String, f64> = std::fs::read_to_string(&timings_path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        timings.insert(name.into(), started.elapsed().as_secs_f64());
        std::fs::write(timings_path, serde_json::to_string_pretty(&timings)? + "\n")?;
        result.with_context(|| format!("stage `{name}` failed"))
    }

    pub fn synth(&self) -> Result<()> {
        let Some(synth) = self.cfg.synth.clone() else {
            return Err(anyhow!(ConfigError("the configuration has no `synth` section".into())));
        };
        self.run_stage("synth", "input", |s| {
            let out = generate_synthetic(&synth)?;
            out.write(s.dir())?;
            for f in ["graph.json", "traffic.csv", "events.json", "truth.json"] {
                s.output(f)?;
            }
            s.count("units", out.graph.unit_count());
            s.count("records", out.traffic.record_count());
            s.count("events", out.catalog.events().len());
            Ok(())
        })
    }

    pub fn ingest(&self) -> Result<()> {
        let (graph_path, traffic_path, events_path) = (
            self.cfg.graph_path().map_err(|e| anyhow!(ConfigError(e.to_string())))?,
            self.cfg.traffic_path().map_err(|e| anyhow!(ConfigError(e.to_string())))?,
            self.cfg.events_path().map_err(|e| anyhow!(ConfigError(e.to_string())))?,
        );
        self.run_stage("ingest", "ingest", |s| {
            let graph = TransportationGraph::load(s.input("graph", &graph_path)?)?;
            let catalog = load_events(s.input("events", &events_path)?)?;
            let (traffic, report) = load_traffic(s.input("traffic", &traffic_path)?, &graph, self.cfg.parse_mode)?;
            graph.save(s.dir().join("graph.json"))?;
            s.output("graph.json")?;
            catalog.save(s.dir().join("events.json"))?;
            s.output("events.json")?;
            traffic.write_csv(s.dir().join("traffic.csv"))?;
            s.output("traffic.csv")?;
            s.write_json("report.json", &report)?;
            s.count("nodes", graph.node_count());
            s.count("units", graph.unit_count());
            s.count("venues", catalog.venues().count());
            s.count("events", catalog.events().len());
            s.count("traffic_units", traffic.unit_count());
            s.count("traffic_records", traffic.record_count());
            s.count("rows_dropped", report.dropped + report.malformed);
            Ok(())
        })
    }

    fn load_graph(&self, s: &mut Stage) -> Result<TransportationGraph> {
        Ok(TransportationGraph::load(s.input("graph", &self.path("ingest", "graph.json"))?)?)
    }

    fn load_catalog(&self, s: &mut Stage) -> Result<EventCatalog> {
        Ok(load_events(s.input("events", &self.path("ingest", "events.json"))?)?)
    }

    fn load_traffic(&self, s: &mut Stage, graph: &TransportationGraph) -> Result<TrafficStore> {
        let path = s.input("traffic", &self.path("ingest", "traffic.csv"))?;
        Ok(load_traffic(path, graph, ParseMode::Strict)?.0)
    }

    fn load_mask(&self, s: &mut Stage) -> Result<AffectednessMask> {
        read_json(s, "mask", &self.path("affectedness", "mask.json"))
    }

    pub fn affectedness(&self) -> Result<()> {
        self.run_stage("affectedness", "affectedness", |s| {
            let graph = self.load_graph(s)?;
            let traffic = self.load_traffic(s, &graph)?;
            let loads = LoadSeries::from_traffic(&traffic, &graph)?;
            let window = match (time_arg(self.cfg.train_from), time_arg(self.cfg.train_to), loads.range()) {
                (None, None, _) | (_, _, None) => None,
                (from, to, Some(r)) => Some(BinRange::new(from.unwrap_or(r.first), to.unwrap_or(r.last))?),
            };
            let profile = build_profile_within(&loads, self.cfg.min_samples, window)?;
            let mask = classify(&loads, &profile);
            s.write_json("mask.json", &mask)?;
            if self.cfg.export_profile {
                std::fs::write(s.dir().join("profile.json"), profile.to_json_string())?;
                s.output("profile.json")?;
            }
            let entries: Vec<_> = profile.entries().collect();
            let usable = entries.iter().filter(|e| e.3.usable).count();
            s.write_json(
                "summary.json",
                &json!({
                    "min_samples": self.cfg.min_samples,
                    "training_window": window,
                    "domain": mask.domain(),
                    "units_profiled": profile.unit_count(),
                    "groups": entries.len(),
                    "usable_groups": usable,
                    "flagged_observations": mask.flagged_count(),
                    "affected_units": mask.units().count(),
                    "active_bins": mask.active_bins().count(),
                }),
            )?;
            s.count("units_profiled", profile.unit_count());
            s.count("usable_groups", usable);
            s.count("flagged_observations", mask.flagged_count());
            Ok(())
        })
    }

    fn as_of(&self, traffic_range: Option<BinRange>) -> Result<NaiveDateTime> {
        self.cfg
            .as_of
            .or_else(|| traffic_range.map(|r| r.last.offset(1).start()))
            .ok_or_else(|| anyhow!("no as_of configured and no traffic to derive it from"))
    }

    pub fn event_impact(&self) -> Result<()> {
        self.run_stage("event-impact", "event-impact", |s| {
            let graph = self.load_graph(s)?;
            let catalog = self.load_catalog(s)?;
            let traffic = self.load_traffic(s, &graph)?;
            let mask = self.load_mask(s)?;
            let as_of = self.as_of(traffic.range())?;
            let analysis = analyze_events(&catalog, &graph, &mask, &traffic, &self.cfg.impact, self.cfg.tau, as_of)?;
            s.write_json("records.json", &analysis.records)?;
            s.write_json("subgraphs.json", &analysis.subgraphs)?;
            s.write_json("frequencies.json", &analysis.frequencies)?;
            s.write_json("skipped.json", &analysis.skipped)?;
            for r in &analysis.records {
                let venue = catalog.venue(&r.venue_id).expect("catalog venue");
                let mut layer = unit_layer(&graph, &r.units, "affected", &Map::new());
                layer.features.push(venue_circle(venue.location, r.spatial_radius_m, "venue", venue.id.as_str()));
                s.write_json(&format!("geojson/{}.geojson", r.event_id), &layer)?;
            }
            s.count("events_total", catalog.events().len());
            s.count("impact_records", analysis.records.len());
            s.count("skipped", analysis.skipped.len());
            s.count("curves_skipped", analysis.records.iter().filter(|r| r.curve_skip_reason.is_some()).count());
            s.count("venues_with_tas", analysis.frequencies.len());
            Ok(())
        })
    }

    pub fn tas(&self) -> Result<()> {
        self.run_stage("tas", "tas", |s| {
            let graph = self.load_graph(s)?;
            let catalog = self.load_catalog(s)?;
            let frequencies: Vec<UnitFrequencies> = read_json(s, "frequencies", &self.path("event-impact", "frequencies.json"))?;
            let mut all = Vec::new();
            for f in &frequencies {
                let tas = f.at(self.cfg.tau)?;
                let venue = catalog.venue(&f.venue_id).ok_or_else(|| anyhow!("unknown venue `{}`", f.venue_id))?;
                let mut layer = unit_layer(&graph, tas.units.keys(), "tas", &Map::new());
                for feature in &mut layer.features {
                    let unit = feature.properties["unit_id"].as_str().unwrap_or_default().to_string();
                    feature.properties.insert("frequency".into(), json!(tas.units.get(unit.as_str())));
                }
                layer.features.push(venue_circle(venue.location, 0.0, "venue", venue.id.as_str()));
                s.write_json(&format!("geojson/{}.geojson", f.venue_id), &layer)?;
                s.count(&format!("units.{}", f.venue_id), tas.units.len());
                all.push(tas);
            }
            s.write_json("tas.json", &all)?;
            s.count("venues", all.len());
            Ok(())
        })
    }

    pub fn train(&self) -> Result<()> {
        self.run_stage("train", "train", |s| {
            let catalog = self.load_catalog(s)?;
            let records: Vec<EventImpactRecord> = read_json(s, "records", &self.path("event-impact", "records.json"))?;
            if records.is_empty() {
                return Err(anyhow!("no historical impact records to train on"));
            }
            let exemplars = records
                .iter()
                .map(|r| {
                    let event = catalog.event(&r.event_id).ok_or_else(|| anyhow!("record for unknown event `{}`", r.event_id))?;
                    let spatial = SpatialImpact {
                        event_id: r.event_id.clone(),
                        radius_m: r.spatial_radius_m,
                        argmax_unit: r.argmax_unit.clone(),
                    };
                    let curve = ImpactCurve {
                        subject_id: r.event_id.to_string(),
                        samples: r.temporal_curve.clone(),
                    };
                    Ok(Exemplar::new(event, &catalog, &spatial, &curve)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let model = train(exemplars, self.cfg.knn)?;
            std::fs::write(s.dir().join("model.json"), model.to_json_string() + "\n")?;
            s.output("model.json")?;
            s.count("exemplars", model.exemplars.len());
            s.count("fingerprint", model.fingerprint.clone());
            Ok(())
        })
    }

    /// Predicts every event in `events` when given; otherwise every catalog
    /// event that has no historical impact record.
    pub fn predict(&self, model: Option<&Path>, events: Option<&Path>) -> Result<()> {
        self.run_stage("predict", "predict", |s| {
            let model_path = model.map(Path::to_path_buf).unwrap_or_else(|| self.path("train", "model.json"));
            let model = TrainedPredictor::load(s.input("model", &model_path)?)?;
            let (catalog, targets): (EventCatalog, Option<BTreeSet<EventId>>) = match events {
                Some(p) => (load_events(s.input("events", p)?)?, None),
                None => {
                    let catalog = self.load_catalog(s)?;
                    let records: Vec<EventImpactRecord> = read_json(s, "records", &self.path("event-impact", "records.json"))?;
                    let seen: BTreeSet<EventId> = records.into_iter().map(|r| r.event_id).collect();
                    let targets = catalog.events().iter().map(|e| e.id.clone()).filter(|id| !seen.contains(id)).collect();
                    (catalog, Some(targets))
                }
            };
            let predictions = catalog
                .events()
                .iter()
                .filter(|e| targets.as_ref().is_none_or(|t| t.contains(&e.id)))
                .map(|e| model.predict_event(e, &catalog))
                .collect::<Result<Vec<PredictionRecord>, _>>()?;
            s.write_json("predictions.json", &predictions)?;
            s.count("predictions", predictions.len());
            Ok(())
        })
    }

    pub fn deps(&self) -> Result<()> {
        self.run_stage("deps", "deps", |s| {
            let graph = self.load_graph(s)?;
            let mask = self.load_mask(s)?;
            let deps = detect_dependencies(&mask, &graph, &self.cfg.dependencies)?;
            let mut layer = FeatureCollection::default();
            for sg in &deps.subgraphs {
                let mut extra = Map::new();
                extra.insert("subgraph_id".into(), json!(sg.id));
                layer.extend(unit_layer(&graph, &sg.units, "subgraph", &extra));
            }
            s.write_json("stable_subgraphs.json", &deps)?;
            s.write_json("dependencies.json", &deps.pairs)?;
            s.write_json("subgraphs.geojson", &layer)?;
            s.count("stable_subgraphs", deps.subgraphs.len());
            s.count("dependency_pairs", deps.pairs.len());
            Ok(())
        })
    }

    pub fn snapshot(&self) -> Result<()> {
        self.run_stage("snapshot", "snapshot", |s| {
            let graph = self.load_graph(s)?;
            let catalog = self.load_catalog(s)?;
            let traffic_path = s.input("traffic", &self.path("ingest", "traffic.csv"))?;
            let traffic_sha = sha256_hex(&std::fs::read(&traffic_path)?);
            let traffic_range = {
                let traffic = load_traffic(&traffic_path, &graph, ParseMode::Strict)?.0;
                traffic.range()
            };
            let impacts: Vec<EventImpactRecord> = read_json(s, "records", &self.path("event-impact", "records.json"))?;
            let frequencies: Vec<UnitFrequencies> = read_json(s, "frequencies", &self.path("event-impact", "frequencies.json"))?;
            let skipped: Vec<SkippedEvent> = read_json(s, "skipped", &self.path("event-impact", "skipped.json"))?;
            let predictions: Vec<PredictionRecord> = read_json(s, "predictions", &self.path("predict", "predictions.json"))?;
            let dependencies: DependencyGraph = read_json(s, "dependencies", &self.path("deps", "stable_subgraphs.json"))?;
            let model: TrainedPredictor = read_json(s, "model", &self.path("train", "model.json"))?;

            let mut fingerprints = BTreeMap::new();
            for (key, label) in [("graph", "graph"), ("events", "events"), ("records", "records"), ("dependencies", "dependencies")] {
                fingerprints.insert(key.to_string(), s.record.inputs[label].sha256.clone());
            }
            fingerprints.insert("traffic".into(), traffic_sha);
            fingerprints.insert("model".into(), model.fingerprint.clone());
            fingerprints.insert("config".into(), sha256_hex(self.portable_config().as_bytes()));

            let snapshot = build_snapshot(SnapshotInputs {
                graph,
                catalog,
                as_of: self.as_of(traffic_range)?,
                default_tau: self.cfg.tau,
                fingerprints,
                impacts,
                predictions,
                frequencies,
                dependencies,
            })?;
            let uncovered = snapshot.uncovered_events();
            if !uncovered.is_empty() {
                log::warn!("{} event(s) have neither impact nor prediction: {:?}", uncovered.len(), uncovered);
            }
            snapshot.save(s.dir())?;
            for f in [roadpulse_service::snapshot::GRAPH_FILE, roadpulse_service::snapshot::EVENTS_FILE, roadpulse_service::snapshot::SNAPSHOT_FILE] {
                s.output(f)?;
            }
            for (k, v) in snapshot.counts() {
                s.count(k, v);
            }
            s.count("skipped_events", skipped.len());
            Ok(())
        })
    }

    /// Every stage in order, starting with synthesis when configured.
    pub fn all(&self) -> Result<()> {
        if self.cfg.synth.is_some() && self.cfg.inputs == Default::default() {
            self.synth()?;
        }
        self.ingest()?;
        self.affectedness()?;
        self.event_impact()?;
        self.tas()?;
        self.train()?;
        self.predict(None, None)?;
        self.deps()?;
        self.snapshot()
    }

    pub fn snapshot_dir(&self) -> PathBuf {
        self.out.join("snapshot")
    }
}

/// Loads a snapshot directory for serving.
pub fn load_snapshot(dir: &Path) -> Result<Snapshot> {
    let probe = dir.join(roadpulse_service::snapshot::SNAPSHOT_FILE);
    if !probe.exists() {
        return Err(anyhow!(MissingInput(probe)));
    }
    Ok(Snapshot::load(dir)?)
}

