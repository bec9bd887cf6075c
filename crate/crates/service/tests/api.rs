use axum::body::Body;
use axum::http::{Request, StatusCode};
use chrono::{NaiveDate, NaiveDateTime};
use http_body_util::BodyExt;
use roadpulse_core::affectedness::{build_profile, classify, LoadSeries};
use roadpulse_core::deps::{detect_dependencies, DependencyParams};
use roadpulse_core::event_impact::{analyze_events, ImpactParams};
use roadpulse_core::predict::{train, Exemplar, KnnParams};
use roadpulse_core::synth::*;
use roadpulse_service::{build_snapshot, router, AppState, Snapshot, SnapshotError, SnapshotInputs};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;
use tower::ServiceExt;

fn as_of() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2017, 10, 30).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

fn inputs() -> SnapshotInputs {
    let cfg = SynthConfig {
        seed: 5,
        grid: GridSpec {
            rows: 8,
            cols: 8,
            spacing_m: 300.0,
            origin_lon: 9.70,
            origin_lat: 52.35,
            speed_limit_kmh: 50.0,
            arterial_every: 0,
            arterial_limit_kmh: 70.0,
        },
        start_date: NaiveDate::from_ymd_opt(2017, 10, 2).unwrap(),
        days: 28,
        baseline: BaselineProfile::default(),
        venues: vec![
            VenueSpec { id: "arena".into(), name: "Arena".into(), row: 2, col: 2, capacity: Some(10_000) },
            VenueSpec { id: "park".into(), name: "Park".into(), row: 5, col: 5, capacity: None },
        ],
        events: Vec::new(),
        auto_events: Some(AutoEvents {
            count: 6,
            future_count: 2,
            future_days: 4,
            categories: vec!["concert".into(), "fair".into()],
            start_slots: vec![68, 76],
            radius_by_category: BTreeMap::new(),
        }),
        injection: InjectionSpec::default(),
        hotspots: vec![
            HotspotSpec { row: 1, col: 6, radius_m: 160.0, group: 1, multiplier: 0.4 },
            HotspotSpec { row: 6, col: 1, radius_m: 160.0, group: 2, multiplier: 0.4 },
        ],
        hotspot_activation: 0.05,
    };
    let out = generate_synthetic(&cfg).unwrap();
    let loads = LoadSeries::from_traffic(&out.traffic, &out.graph).unwrap();
    let mask = classify(&loads, &build_profile(&loads, 4).unwrap());
    let analysis = analyze_events(&out.catalog, &out.graph, &mask, &out.traffic, &ImpactParams::default(), 0.5, as_of()).unwrap();
    let exemplars = analysis
        .records
        .iter()
        .map(|r| {
            let event = out.catalog.event(&r.event_id).unwrap();
            let spatial = roadpulse_core::event_impact::SpatialImpact {
                event_id: r.event_id.clone(),
                radius_m: r.spatial_radius_m,
                argmax_unit: r.argmax_unit.clone(),
            };
            let curve = roadpulse_core::event_impact::ImpactCurve {
                subject_id: r.event_id.to_string(),
                samples: r.temporal_curve.clone(),
            };
            Exemplar::new(event, &out.catalog, &spatial, &curve).unwrap()
        })
        .collect();
    let model = train(exemplars, KnnParams::default()).unwrap();
    let covered: BTreeSet<_> = analysis.records.iter().map(|r| r.event_id.clone()).collect();
    let predictions = out
        .catalog
        .events()
        .iter()
        .filter(|e| !covered.contains(&e.id))
        .map(|e| model.predict_event(e, &out.catalog).unwrap())
        .collect();
    SnapshotInputs {
        dependencies: detect_dependencies(&mask, &out.graph, &DependencyParams::default()).unwrap(),
        graph: out.graph,
        catalog: out.catalog,
        as_of: as_of(),
        default_tau: 0.5,
        fingerprints: BTreeMap::from([("model".to_string(), model.fingerprint.clone())]),
        impacts: analysis.records,
        predictions,
        frequencies: analysis.frequencies,
    }
}

fn shared() -> &'static SnapshotInputs {
    static INPUTS: OnceLock<SnapshotInputs> = OnceLock::new();
    INPUTS.get_or_init(inputs)
}

fn app() -> axum::Router {
    router(AppState::new(build_snapshot(shared().clone()).unwrap()))
}

async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Vec<u8>, axum::http::HeaderMap) {
    let res = app
        .clone()
        .oneshot(Request::get(uri).header("origin", "http://dashboard.local").body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, headers)
}

async fn get_json(app: &axum::Router, uri: &str) -> (StatusCode, Value) {
    let (status, body, _) = get(app, uri).await;
    (status, serde_json::from_slice(&body).unwrap_or_else(|e| panic!("{uri}: {e}")))
}

fn geojson_ok(v: &Value) {
    roadpulse_core::geojson::validate(v).unwrap_or_else(|e| panic!("invalid GeoJSON: {e}"));
}

#[tokio::test]
async fn empty_snapshot_serves() {
    let app = router(AppState::new(build_snapshot(SnapshotInputs::empty(as_of())).unwrap()));
    let (status, health) = get_json(&app, "/api/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["counts"]["events"], 0);
    let (_, deps) = get_json(&app, "/api/dependencies").await;
    assert_eq!(deps["pairs"].as_array().unwrap().len(), 0);
    geojson_ok(&deps["geojson"]);
}

#[test]
fn dangling_references_are_named() {
    let mut bad = shared().clone();
    bad.impacts[0].event_id = "ghost-event".into();
    bad.frequencies[0].venue_id = "ghost-venue".into();
    let err = build_snapshot(bad).unwrap_err();
    let SnapshotError::Inconsistent(problems) = &err else { panic!("{err}") };
    let text = err.to_string();
    assert!(text.contains("`ghost-event`"), "{text}");
    assert!(text.contains("`ghost-venue`"), "{text}");
    assert!(problems.len() >= 2);
}

#[tokio::test]
async fn errors_are_json() {
    let app = app();
    for (uri, code) in [
        ("/api/events/nope/impact", StatusCode::NOT_FOUND),
        ("/api/events/nope/prediction", StatusCode::NOT_FOUND),
        ("/api/venues/nope/tas", StatusCode::NOT_FOUND),
        ("/api/dependencies/9999", StatusCode::NOT_FOUND),
        ("/api/nothing", StatusCode::NOT_FOUND),
        ("/api/events?date=2017-13-01", StatusCode::BAD_REQUEST),
        ("/api/events?day=2017-10-02", StatusCode::BAD_REQUEST),
        ("/api/venues/arena/tas?tau=0", StatusCode::BAD_REQUEST),
        ("/api/venues/arena/tas?tau=abc", StatusCode::BAD_REQUEST),
        ("/api/dependencies/x", StatusCode::BAD_REQUEST),
    ] {
        let (status, body) = get_json(&app, uri).await;
        assert_eq!(status, code, "{uri}");
        assert_eq!(body["error"]["status"], code.as_u16(), "{uri}");
        assert!(body["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[tokio::test]
async fn every_listed_item_resolves() {
    let app = app();
    let (_, events) = get_json(&app, "/api/events").await;
    let events = events["events"].as_array().unwrap();
    assert_eq!(events.len(), 8);
    for e in events {
        let id = e["id"].as_str().unwrap();
        let (a, impact) = get_json(&app, &format!("/api/events/{id}/impact")).await;
        let (b, prediction) = get_json(&app, &format!("/api/events/{id}/prediction")).await;
        assert!(a == StatusCode::OK || b == StatusCode::OK, "{id}");
        if a == StatusCode::OK {
            assert_eq!(impact["source"], "historical");
            geojson_ok(&impact["subgraph"]);
            geojson_ok(&impact["venue"]);
            assert_eq!(impact["venue"]["properties"]["radius_m"], impact["spatial_radius_m"]);
        }
        if b == StatusCode::OK {
            assert_eq!(prediction["source"], "prediction");
            assert_eq!(prediction["prediction"], true);
            assert_eq!(prediction["caption"], "Prediction");
            geojson_ok(&prediction["tas"]);
        }
        if e["kind"] == "future" {
            assert_eq!(b, StatusCode::OK, "{id}");
        }
    }
    let (_, venues) = get_json(&app, "/api/venues").await;
    for v in venues["venues"].as_array().unwrap() {
        let (status, tas) = get_json(&app, &format!("/api/venues/{}/tas", v["id"].as_str().unwrap())).await;
        assert_eq!(status, StatusCode::OK);
        geojson_ok(&tas["geojson"]);
    }
    let (_, deps) = get_json(&app, "/api/dependencies").await;
    geojson_ok(&deps["geojson"]);
    let subgraphs = deps["subgraphs"].as_array().unwrap();
    assert!(!subgraphs.is_empty());
    for s in subgraphs {
        let (status, partners) = get_json(&app, &format!("/api/dependencies/{}", s["id"])).await;
        assert_eq!(status, StatusCode::OK);
        geojson_ok(&partners["geojson"]);
        let scores: Vec<f64> = partners["partners"].as_array().unwrap().iter().map(|p| p["score"].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[tokio::test]
async fn day_filter_and_navigation() {
    let app = app();
    let (_, all) = get_json(&app, "/api/events").await;
    let first = all["events"][0]["start"].as_str().unwrap()[..10].to_string();
    let (status, day) = get_json(&app, &format!("/api/events?date={first}")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(day["events"].as_array().unwrap().iter().all(|e| e["start"].as_str().unwrap().starts_with(&first)));
    assert!(day["previous_date"].is_null());
    assert!(day["next_date"].as_str().unwrap() > first.as_str());
    let kinds: BTreeSet<&str> = all["events"].as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, BTreeSet::from(["future", "historical"]));
}

#[tokio::test]
async fn tas_shrinks_as_tau_grows() {
    let app = app();
    for venue in ["arena", "park"] {
        let mut previous: Option<BTreeSet<String>> = None;
        for tau in ["0.25", "0.5", "0.75", "1.0"] {
            let (status, body) = get_json(&app, &format!("/api/venues/{venue}/tas?tau={tau}")).await;
            assert_eq!(status, StatusCode::OK);
            let units: BTreeSet<String> = body["units"].as_array().unwrap().iter().map(|u| u["unit_id"].as_str().unwrap().to_string()).collect();
            if let Some(p) = &previous {
                assert!(units.is_subset(p), "{venue} tau {tau}");
            }
            previous = Some(units);
        }
    }
}

#[tokio::test]
async fn responses_are_stable_and_cors_enabled() {
    let app = app();
    for uri in ["/api/venues", "/api/events", "/api/dependencies", "/api/health"] {
        let (s1, b1, headers) = get(&app, uri).await;
        let (_, b2, _) = get(&app, uri).await;
        assert_eq!(s1, StatusCode::OK);
        assert_eq!(b1, b2, "{uri}");
        assert_eq!(headers["access-control-allow-origin"], "*");
        assert!(headers["content-type"].to_str().unwrap().starts_with("application/json"));
    }
}

#[tokio::test]
async fn saved_snapshot_serves_identically() {
    let snapshot = build_snapshot(shared().clone()).unwrap();
    let dir = tempfile_dir();
    snapshot.save(&dir).unwrap();
    let reloaded = Snapshot::load(&dir).unwrap();
    assert_eq!(reloaded.counts(), snapshot.counts());
    assert!(reloaded.uncovered_events().is_empty());
    let (a, b) = (router(AppState::new(snapshot)), router(AppState::new(reloaded)));
    for uri in ["/api/venues", "/api/events", "/api/dependencies", "/api/venues/arena/tas?tau=0.5"] {
        assert_eq!(get(&a, uri).await.1, get(&b, uri).await.1, "{uri}");
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[tokio::test]
async fn replace_swaps_the_whole_snapshot() {
    let state = AppState::new(build_snapshot(shared().clone()).unwrap());
    let app = router(state.clone());
    let (_, before) = get_json(&app, "/api/health").await;
    assert_eq!(before["counts"]["events"], 8);
    state.replace(build_snapshot(SnapshotInputs::empty(as_of())).unwrap());
    let (_, after) = get_json(&app, "/api/health").await;
    assert_eq!(after["counts"]["events"], 0);
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("roadpulse-service-test-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}
