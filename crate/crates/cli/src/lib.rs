//! `roadpulse` command line: runs the analytics stages over a shared output
//! directory and serves the resulting snapshot.

pub mod config;
pub mod pipeline;

use anyhow::{anyhow, Context, Result};
use chrono::NaiveDateTime;
use clap::{Args, Parser, Subcommand};
use config::PipelineConfig;
use pipeline::{load_snapshot, Pipeline};
use roadpulse_core::ingest::ParseMode;
use roadpulse_service::{serve, AppState};
use std::fmt;
use std::path::PathBuf;

/// A required input file does not exist. Maps to exit code 2.
#[derive(Debug)]
pub struct MissingInput(pub PathBuf);

impl fmt::Display for MissingInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input file not found: {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

/// Invalid configuration or flags. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err
        .chain()
        .any(|c| c.downcast_ref::<MissingInput>().is_some() || c.downcast_ref::<ConfigError>().is_some());
    if usage {
        2
    } else {
        1
    }
}

fn parse_time(s: &str) -> Result<NaiveDateTime, String> {
    roadpulse_core::time::parse_timestamp(s).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "roadpulse", version, about = "Event-driven road traffic analytics")]
pub struct Cli {
    /// Pipeline configuration file (JSON).
    #[arg(long, global = true, conflicts_with = "demo")]
    pub config: Option<PathBuf>,
    /// Use the bundled synthetic demo scenario.
    #[arg(long, global = true)]
    pub demo: bool,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Events starting before this instant count as historical.
    #[arg(long, global = true, value_parser = parse_time)]
    pub as_of: Option<NaiveDateTime>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Road graph JSON.
    #[arg(long, global = true)]
    pub graph: Option<PathBuf>,
    /// Speed records CSV.
    #[arg(long, global = true)]
    pub traffic: Option<PathBuf>,
    /// Venue and event catalog JSON. For `predict`, the events to predict.
    #[arg(long, global = true)]
    pub events: Option<PathBuf>,
    /// Skip malformed traffic rows instead of failing.
    #[arg(long, global = true)]
    pub lenient: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub min_samples: Option<usize>,
    #[arg(long, global = true, value_parser = parse_time)]
    pub train_from: Option<NaiveDateTime>,
    #[arg(long, global = true, value_parser = parse_time)]
    pub train_to: Option<NaiveDateTime>,
    /// Also write the per-slot affectedness profile.
    #[arg(long, global = true)]
    pub export_profile: bool,
    #[arg(long, global = true)]
    pub max_radius: Option<f64>,
    #[arg(long, global = true)]
    pub seed_radius: Option<f64>,
    /// TAS frequency threshold.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Number of neighbours for prediction.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub theta_overlap: Option<f64>,
    #[arg(long, global = true)]
    pub delta0: Option<f64>,
    #[arg(long, global = true)]
    pub d_max: Option<f64>,
    #[arg(long, global = true)]
    pub score_min: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic scenario into `<out>/input`.
    Synth,
    /// Validate raw inputs and normalise them onto the time grid.
    Ingest,
    /// Per-slot baselines and the affected-unit mask.
    Affectedness,
    /// Affected subgraphs, spatial radius and delay curves per event.
    EventImpact,
    /// Typically affected subgraph per venue.
    Tas,
    /// Fit the nearest-neighbour impact predictor.
    Train,
    /// Predict impacts for upcoming events.
    Predict {
        /// Model file; defaults to `<out>/train/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Stable subgraphs and their structural dependencies.
    Deps,
    /// Assemble the snapshot served by the API.
    Snapshot,
    /// Serve the snapshot over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Snapshot directory; defaults to `<out>/snapshot`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Reload the snapshot from disk on SIGHUP.
        #[arg(long)]
        reload_signal: bool,
    },
    /// Run every stage in order.
    All,
}

impl Cli {
    pub fn resolve_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match (&self.config, self.demo) {
            (Some(path), _) => {
                if !path.exists() {
                    return Err(anyhow!(MissingInput(path.clone())));
                }
                PipelineConfig::load(path).map_err(|e| anyhow!(ConfigError(format!("{e:#}"))))?
            }
            (None, true) => PipelineConfig::demo(),
            (None, false) => PipelineConfig::default(),
        };
        let o = &self.overrides;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if self.as_of.is_some() {
            cfg.as_of = self.as_of;
        }
        let predicting = matches!(self.command, Some(Command::Predict { .. }));
        if let Some(p) = &o.graph {
            cfg.inputs.graph = Some(p.clone());
        }
        if let Some(p) = &o.traffic {
            cfg.inputs.traffic = Some(p.clone());
        }
        if let (Some(p), false) = (&o.events, predicting) {
            cfg.inputs.events = Some(p.clone());
        }
        if o.lenient {
            cfg.parse_mode = ParseMode::Lenient;
        }
        if let Some(seed) = o.seed {
            let synth = cfg
                .synth
                .as_mut()
                .ok_or_else(|| anyhow!(ConfigError("--seed needs a configuration with a `synth` section".into())))?;
            synth.seed = seed;
        }
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(o.min_samples => cfg.min_samples);
        set!(o.train_from.map(Some) => cfg.train_from);
        set!(o.train_to.map(Some) => cfg.train_to);
        cfg.export_profile |= o.export_profile;
        set!(o.max_radius => cfg.impact.max_radius_m);
        set!(o.seed_radius => cfg.impact.seed_radius_m);
        set!(o.tau => cfg.tau);
        set!(o.k => cfg.knn.k);
        set!(o.theta_overlap => cfg.dependencies.theta_overlap);
        set!(o.delta0 => cfg.dependencies.delta0_m);
        set!(o.d_max => cfg.dependencies.d_max_m);
        set!(o.score_min => cfg.dependencies.score_min);
        cfg.validate().map_err(|e| anyhow!(ConfigError(format!("{e:#}"))))?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    if cli.print_config {
        println!("{}", cfg.to_json_string());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(anyhow!(ConfigError("no subcommand given; see --help".into())));
    };
    if let Command::Serve {
        bind,
        data_dir,
        reload_signal,
    } = command
    {
        let dir = data_dir.clone().unwrap_or_else(|| cfg.output_dir.join("snapshot"));
        let mut snapshot = load_snapshot(&dir)?;
        if let Some(as_of) = cli.as_of {
            snapshot = snapshot.with_as_of(as_of);
        }
        let runtime = tokio::runtime::Runtime::new()?;
        return runtime.block_on(async {
            let listener = tokio::net::TcpListener::bind(bind).await.with_context(|| format!("binding {bind}"))?;
            serve(listener, AppState::new(snapshot), reload_signal.then_some(dir)).await?;
            Ok(())
        });
    }
    let pipeline = Pipeline::new(cfg)?;
    match command {
        Command::Synth => pipeline.synth(),
        Command::Ingest => pipeline.ingest(),
        Command::Affectedness => pipeline.affectedness(),
        Command::EventImpact => pipeline.event_impact(),
        Command::Tas => pipeline.tas(),
        Command::Train => pipeline.train(),
        Command::Predict { model } => pipeline.predict(model.as_deref(), cli.overrides.events.as_deref()),
        Command::Deps => pipeline.deps(),
        Command::Snapshot => pipeline.snapshot(),
        Command::All => pipeline.all(),
        Command::Serve { .. } => unreachable!("handled above"),
    }
}

/// Parses `args` (including the program name) and runs them.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| anyhow!(ConfigError(e.to_string())))?;
    run(cli)
}
