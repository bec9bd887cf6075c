//! Congestion analytics over urban road networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`] and [`geo`] hold the transportation graph and the spherical
//!   geometry every other module measures with.
//! * [`ingest`] parses speed records and event catalogs onto the 15-minute
//!   [`time`] grid; [`synth`] generates equivalent data for demos and tests.
//! * [`affectedness`] turns speeds into unit loads and flags IQR outliers per
//!   (unit, weekday, slot).
//! * [`event_impact`] and [`predict`] derive and forecast the impact of planned
//!   events; [`deps`] finds structurally dependent subgraphs.
//! * [`geojson`] renders unit sets as map layers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affectedness;
pub mod deps;
pub mod error;
pub mod event_impact;
pub mod geo;
pub mod geojson;
pub mod graph;
pub mod ids;
pub mod ingest;
pub mod predict;
pub mod synth;
pub mod time;

pub use error::{Error, Result};
pub use geo::{geo_distance, GeoPoint};
pub use graph::{connected_components, TransportationGraph, Unit};
pub use ids::{EventId, NodeId, UnitId, VenueId};
pub use time::{BinRange, TimeBin};

/// Lower-case hex SHA-256 of `bytes`, used for model and artifact fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
