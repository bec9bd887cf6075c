//! Pipeline configuration: every tunable with its default, loaded from JSON
//! and then overridden by command-line flags.

use anyhow::{bail, Context};
use chrono::NaiveDateTime;
use roadpulse_core::deps::DependencyParams;
use roadpulse_core::event_impact::ImpactParams;
use roadpulse_core::ingest::ParseMode;
use roadpulse_core::predict::KnnParams;
use roadpulse_core::synth::SynthConfig;
use roadpulse_core::time::iso;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const DEMO: &str = include_str!("../scenarios/demo.json");

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub graph: Option<PathBuf>,
    pub traffic: Option<PathBuf>,
    pub events: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    /// Raw inputs. Missing entries fall back to the synthetic outputs under
    /// `<output_dir>/input` when a `synth` section is present.
    pub inputs: InputPaths,
    pub parse_mode: ParseMode,
    /// Events starting before this instant are historical. Defaults to the
    /// end of the ingested traffic period.
    #[serde(with = "iso::option")]
    pub as_of: Option<NaiveDateTime>,
    #[serde(with = "iso::option")]
    pub train_from: Option<NaiveDateTime>,
    #[serde(with = "iso::option")]
    pub train_to: Option<NaiveDateTime>,
    pub min_samples: usize,
    pub export_profile: bool,
    pub impact: ImpactParams,
    pub tau: f64,
    pub knn: KnnParams,
    pub dependencies: DependencyParams,
    pub synth: Option<SynthConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            inputs: InputPaths::default(),
            parse_mode: ParseMode::Strict,
            as_of: None,
            train_from: None,
            train_to: None,
            min_samples: 4,
            export_profile: false,
            impact: ImpactParams::default(),
            tau: 0.5,
            knn: KnnParams::default(),
            dependencies: DependencyParams::default(),
            synth: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_str(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_json_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.output_dir);
        for p in [&mut cfg.inputs.graph, &mut cfg.inputs.traffic, &mut cfg.inputs.events].into_iter().flatten() {
            rebase(p);
        }
        Ok(cfg)
    }

    /// The bundled synthetic demo scenario.
    pub fn demo() -> Self {
        Self::from_json_str(DEMO).expect("bundled demo scenario parses")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.min_samples < 4 {
            bail!(
                "min_samples must be at least 4: with fewer samples the upper fence Q3 + 1.5*IQR can never be exceeded, got {}",
                self.min_samples
            );
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            bail!("tau must lie in (0, 1], got {}", self.tau);
        }
        if let (Some(a), Some(b)) = (self.train_from, self.train_to) {
            if a > b {
                bail!("train_from {a} is after train_to {b}");
            }
        }
        self.impact.validate()?;
        self.dependencies.validate()?;
        if self.knn.k == 0 {
            bail!("knn.k must be >= 1");
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.output_dir.join("input")
    }

    fn input(&self, given: &Option<PathBuf>, file: &str) -> anyhow::Result<PathBuf> {
        match (given, &self.synth) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(_)) => Ok(self.synth_dir().join(file)),
            (None, None) => bail!("no `inputs.{}` configured and no synthetic scenario to fall back on", file.split('.').next().unwrap()),
        }
    }

    pub fn graph_path(&self) -> anyhow::Result<PathBuf> {
        self.input(&self.inputs.graph, "graph.json")
    }

    pub fn traffic_path(&self) -> anyhow::Result<PathBuf> {
        self.input(&self.inputs.traffic, "traffic.csv")
    }

    pub fn events_path(&self) -> anyhow::Result<PathBuf> {
        self.input(&self.inputs.events, "events.json")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
