//! HTTP JSON API over a precomputed analytics snapshot.
//!
//! All routes are `GET` and read from one immutable [`Snapshot`]; reloading
//! swaps the whole snapshot at once. Response schemas are documented in
//! `API.md` next to this crate's manifest.

pub mod api;
pub mod server;
pub mod snapshot;

pub use api::{router, AppState};
pub use server::serve;
pub use snapshot::{build_snapshot, EventKind, Snapshot, SnapshotDocument, SnapshotError, SnapshotInputs};
