//! Parsing of speed records and event catalogs onto the time grid.

mod catalog;
mod traffic;

pub use catalog::{load_events, Event, EventCatalog, Venue};
pub use traffic::{load_traffic, parse_traffic, IngestReport, ParseMode, SpeedRecord, TrafficStore, TrafficStoreBuilder};
