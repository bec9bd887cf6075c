//! Read-only HTTP routes over the current snapshot.

use crate::snapshot::{EventKind, Snapshot};
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{NaiveDate, NaiveDateTime};
use roadpulse_core::event_impact::CurveSample;
use roadpulse_core::geojson::{unit_layer, venue_circle, Feature, FeatureCollection};
use roadpulse_core::ingest::Event;
use roadpulse_core::time::iso;
use roadpulse_core::{EventId, UnitId, VenueId};
use serde::Serialize;
use serde_json::{json, Map, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};
use tower_http::cors::{Any, CorsLayer};

/// Shared handle to the served snapshot. Readers clone the inner `Arc` and
/// never hold the lock while building a response.
#[derive(Clone)]
pub struct AppState {
    current: Arc<RwLock<Arc<Snapshot>>>,
}

impl AppState {
    pub fn new(snapshot: Snapshot) -> Self {
        Self {
            current: Arc::new(RwLock::new(Arc::new(snapshot))),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Atomically swaps in a new snapshot.
    pub fn replace(&self, snapshot: Snapshot) {
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(snapshot);
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "status": self.status.as_u16(), "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Params = Result<Query<BTreeMap<String, String>>, QueryRejection>;

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods([Method::GET]).allow_headers(Any);
    Router::new()
        .route("/api/health", get(health))
        .route("/api/venues", get(venues))
        .route("/api/venues/{id}/tas", get(venue_tas))
        .route("/api/events", get(events))
        .route("/api/events/{id}/impact", get(event_impact))
        .route("/api/events/{id}/prediction", get(event_prediction))
        .route("/api/dependencies", get(dependencies))
        .route("/api/dependencies/{id}", get(dependency_partners))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .layer(cors)
        .with_state(state)
}

fn only_params(params: Params, allowed: &[&str]) -> Result<BTreeMap<String, String>, ApiError> {
    let Query(params) = params?;
    if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ApiError::bad_request(format!("unknown query parameter `{k}`")));
    }
    Ok(params)
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    format_version: u32,
    #[serde(with = "iso")]
    built_at: NaiveDateTime,
    #[serde(with = "iso")]
    as_of: NaiveDateTime,
    fingerprints: BTreeMap<String, String>,
    counts: BTreeMap<&'static str, usize>,
}

async fn health(State(state): State<AppState>) -> ApiResult<Health> {
    let snap = state.snapshot();
    let doc = snap.document();
    Ok(Json(Health {
        status: "ok",
        format_version: doc.format_version,
        built_at: doc.built_at,
        as_of: doc.as_of,
        fingerprints: doc.fingerprints.clone(),
        counts: snap.counts(),
    }))
}

#[derive(Serialize)]
struct VenueView {
    id: VenueId,
    name: String,
    lon: f64,
    lat: f64,
    capacity: Option<u32>,
    event_count: usize,
    has_tas: bool,
}

#[derive(Serialize)]
struct VenueList {
    venues: Vec<VenueView>,
}

async fn venues(State(state): State<AppState>) -> ApiResult<VenueList> {
    let snap = state.snapshot();
    let catalog = snap.catalog();
    let venues = catalog
        .venues()
        .map(|v| VenueView {
            id: v.id.clone(),
            name: v.name.clone(),
            lon: v.location.lon,
            lat: v.location.lat,
            capacity: v.capacity,
            event_count: catalog.events_at(&v.id).count(),
            has_tas: snap.frequencies(&v.id).is_some(),
        })
        .collect();
    Ok(Json(VenueList { venues }))
}

#[derive(Serialize)]
struct EventView {
    id: EventId,
    venue_id: VenueId,
    name: String,
    category: String,
    #[serde(with = "iso")]
    start: NaiveDateTime,
    #[serde(with = "iso::option")]
    end: Option<NaiveDateTime>,
    kind: EventKind,
    has_impact: bool,
    has_prediction: bool,
}

#[derive(Serialize)]
struct EventList {
    date: Option<NaiveDate>,
    #[serde(with = "iso")]
    as_of: NaiveDateTime,
    /// Closest earlier and later days that have events, for day navigation.
    previous_date: Option<NaiveDate>,
    next_date: Option<NaiveDate>,
    events: Vec<EventView>,
}

fn event_view(snap: &Snapshot, e: &Event) -> EventView {
    EventView {
        id: e.id.clone(),
        venue_id: e.venue_id.clone(),
        name: e.name.clone(),
        category: e.category.clone(),
        start: e.start,
        end: e.end,
        kind: snap.kind(e),
        has_impact: snap.impact(&e.id).is_some(),
        has_prediction: snap.prediction(&e.id).is_some(),
    }
}

async fn events(State(state): State<AppState>, params: Params) -> ApiResult<EventList> {
    let params = only_params(params, &["date"])?;
    let date = params
        .get("date")
        .map(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|_| ApiError::bad_request(format!("date `{d}` is not YYYY-MM-DD"))))
        .transpose()?;
    let snap = state.snapshot();
    let all = snap.catalog().events();
    let days: BTreeSet<NaiveDate> = all.iter().map(|e| e.start.date()).collect();
    let events = all
        .iter()
        .filter(|e| date.is_none_or(|d| e.start.date() == d))
        .map(|e| event_view(&snap, e))
        .collect();
    Ok(Json(EventList {
        date,
        as_of: snap.as_of(),
        previous_date: date.and_then(|d| days.range(..d).next_back().copied()),
        next_date: date.and_then(|d| days.range(d.succ_opt().unwrap_or(d)..).next().copied()),
        events,
    }))
}

fn find_event<'a>(snap: &'a Snapshot, id: &str) -> Result<&'a Event, ApiError> {
    snap.catalog()
        .event(&EventId::from(id))
        .ok_or_else(|| ApiError::not_found(format!("unknown event `{id}`")))
}

fn layer(snap: &Snapshot, units: impl IntoIterator<Item = impl std::borrow::Borrow<UnitId>>, name: &str) -> FeatureCollection {
    let units: Vec<UnitId> = units.into_iter().map(|u| u.borrow().clone()).collect();
    unit_layer(snap.graph(), &units, name, &Map::new())
}

#[derive(Serialize)]
struct ImpactView {
    event_id: EventId,
    venue_id: VenueId,
    source: &'static str,
    spatial_radius_m: f64,
    argmax_unit: Option<UnitId>,
    temporal_curve: Vec<CurveSample>,
    curve_skip_reason: Option<String>,
    unit_count: usize,
    subgraph: FeatureCollection,
    venue: Feature,
}

async fn event_impact(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<ImpactView> {
    let snap = state.snapshot();
    let event = find_event(&snap, &id)?;
    let record = snap
        .impact(&event.id)
        .ok_or_else(|| ApiError::not_found(format!("event `{id}` has no historical impact; see /api/events/{id}/prediction")))?;
    let venue = snap.catalog().venue_of(event).map_err(|e| ApiError::not_found(e.to_string()))?;
    Ok(Json(ImpactView {
        event_id: record.event_id.clone(),
        venue_id: record.venue_id.clone(),
        source: "historical",
        spatial_radius_m: record.spatial_radius_m,
        argmax_unit: record.argmax_unit.clone(),
        temporal_curve: record.temporal_curve.clone(),
        curve_skip_reason: record.curve_skip_reason.clone(),
        unit_count: record.units.len(),
        subgraph: layer(&snap, &record.units, "affected"),
        venue: venue_circle(venue.location, record.spatial_radius_m, "venue", venue.id.as_str()),
    }))
}

#[derive(Serialize)]
struct PredictionView {
    event_id: EventId,
    venue_id: VenueId,
    source: &'static str,
    prediction: bool,
    caption: &'static str,
    predicted_radius_m: f64,
    predicted_curve: Vec<CurveSample>,
    neighbours: Vec<EventId>,
    model_fingerprint: String,
    tau: f64,
    tas: FeatureCollection,
    venue: Feature,
}

async fn event_prediction(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<PredictionView> {
    let snap = state.snapshot();
    let event = find_event(&snap, &id)?;
    let record = snap
        .prediction(&event.id)
        .ok_or_else(|| ApiError::not_found(format!("event `{id}` has no prediction; see /api/events/{id}/impact")))?;
    let venue = snap.catalog().venue_of(event).map_err(|e| ApiError::not_found(e.to_string()))?;
    let tau = snap.document().default_tau;
    let tas = match snap.frequencies(&venue.id) {
        Some(f) => tas_layer(&snap, &f.at(tau).map_err(|e| ApiError::bad_request(e.to_string()))?.units),
        None => FeatureCollection::default(),
    };
    Ok(Json(PredictionView {
        event_id: record.event_id.clone(),
        venue_id: record.venue_id.clone(),
        source: "prediction",
        prediction: true,
        caption: "Prediction",
        predicted_radius_m: record.predicted_radius_m,
        predicted_curve: record.predicted_curve.clone(),
        neighbours: record.neighbours.clone(),
        model_fingerprint: record.model_fingerprint.clone(),
        tau,
        tas,
        venue: venue_circle(venue.location, record.predicted_radius_m, "venue", venue.id.as_str()),
    }))
}

fn tas_layer(snap: &Snapshot, units: &BTreeMap<UnitId, f64>) -> FeatureCollection {
    let mut fc = layer(snap, units.keys(), "tas");
    for f in &mut fc.features {
        let freq = f.properties.get("unit_id").and_then(Value::as_str).and_then(|u| units.get(u));
        if let Some(freq) = freq {
            f.properties.insert("frequency".into(), json!(freq));
        }
    }
    fc
}

#[derive(Serialize)]
struct TasUnit {
    unit_id: UnitId,
    frequency: f64,
}

#[derive(Serialize)]
struct TasView {
    venue_id: VenueId,
    tau: f64,
    event_count: usize,
    units: Vec<TasUnit>,
    geojson: FeatureCollection,
}

async fn venue_tas(State(state): State<AppState>, Path(id): Path<String>, params: Params) -> ApiResult<TasView> {
    let params = only_params(params, &["tau"])?;
    let snap = state.snapshot();
    let venue = VenueId::from(id.as_str());
    if snap.catalog().venue(&venue).is_none() {
        return Err(ApiError::not_found(format!("unknown venue `{id}`")));
    }
    let tau = match params.get("tau") {
        None => snap.document().default_tau,
        Some(t) => t
            .parse::<f64>()
            .ok()
            .filter(|t| *t > 0.0 && *t <= 1.0)
            .ok_or_else(|| ApiError::bad_request(format!("tau `{t}` must be a number in (0, 1]")))?,
    };
    let freq = snap
        .frequencies(&venue)
        .ok_or_else(|| ApiError::not_found(format!("venue `{id}` has no analysed events")))?;
    let tas = freq.at(tau).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(TasView {
        venue_id: venue,
        tau,
        event_count: tas.event_count,
        units: tas
            .units
            .iter()
            .map(|(u, &frequency)| TasUnit {
                unit_id: u.clone(),
                frequency,
            })
            .collect(),
        geojson: tas_layer(&snap, &tas.units),
    }))
}

#[derive(Serialize)]
struct SubgraphView {
    id: usize,
    unit_count: usize,
    active_bins: usize,
    partner_count: usize,
}

#[derive(Serialize)]
struct PairView {
    a: usize,
    b: usize,
    mi_bits: f64,
    distance_m: f64,
    score: f64,
}

#[derive(Serialize)]
struct DependenciesView {
    subgraphs: Vec<SubgraphView>,
    pairs: Vec<PairView>,
    geojson: FeatureCollection,
}

fn subgraph_layer(snap: &Snapshot, id: usize, role: &str) -> FeatureCollection {
    let Some(s) = snap.dependencies().subgraph(id) else {
        return FeatureCollection::default();
    };
    let mut extra = Map::new();
    extra.insert("subgraph_id".into(), json!(id));
    extra.insert("role".into(), json!(role));
    unit_layer(snap.graph(), &s.units, "subgraph", &extra)
}

async fn dependencies(State(state): State<AppState>) -> ApiResult<DependenciesView> {
    let snap = state.snapshot();
    let deps = snap.dependencies();
    let mut geojson = FeatureCollection::default();
    for s in &deps.subgraphs {
        geojson.extend(subgraph_layer(&snap, s.id, "subgraph"));
    }
    Ok(Json(DependenciesView {
        subgraphs: deps
            .subgraphs
            .iter()
            .map(|s| SubgraphView {
                id: s.id,
                unit_count: s.units.len(),
                active_bins: s.activity.len(),
                partner_count: deps.partners(s.id).len(),
            })
            .collect(),
        pairs: deps
            .pairs
            .iter()
            .map(|p| PairView {
                a: p.a,
                b: p.b,
                mi_bits: p.mutual_information,
                distance_m: p.distance_m,
                score: p.score,
            })
            .collect(),
        geojson,
    }))
}

#[derive(Serialize)]
struct PartnerView {
    subgraph_id: usize,
    mi_bits: f64,
    distance_m: f64,
    score: f64,
}

#[derive(Serialize)]
struct PartnersView {
    subgraph_id: usize,
    unit_count: usize,
    partners: Vec<PartnerView>,
    geojson: FeatureCollection,
}

async fn dependency_partners(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<PartnersView> {
    let id: usize = id
        .parse()
        .map_err(|_| ApiError::bad_request(format!("subgraph id `{id}` is not a non-negative integer")))?;
    let snap = state.snapshot();
    let deps = snap.dependencies();
    let subgraph = deps
        .subgraph(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown stable subgraph {id}")))?;
    let partners: Vec<PartnerView> = deps
        .partners(id)
        .into_iter()
        .map(|(other, p)| PartnerView {
            subgraph_id: other,
            mi_bits: p.mutual_information,
            distance_m: p.distance_m,
            score: p.score,
        })
        .collect();
    let mut geojson = subgraph_layer(&snap, id, "selected");
    for p in &partners {
        geojson.extend(subgraph_layer(&snap, p.subgraph_id, "partner"));
    }
    Ok(Json(PartnersView {
        subgraph_id: id,
        unit_count: subgraph.units.len(),
        partners,
        geojson,
    }))
}
