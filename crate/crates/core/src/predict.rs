//! Forecasting event impact from event metadata alone.
//!
//! The predictor is a distance-weighted k-nearest-neighbour regressor over
//! historical events. Distance between two events sums weighted terms:
//!
//! | term      | contribution                          | default weight |
//! |-----------|---------------------------------------|----------------|
//! | venue     | 0 if equal, 1 otherwise               | 2.0            |
//! | category  | 0 if equal, 1 otherwise               | 1.0            |
//! | weekday   | circular difference / 7               | 0.5            |
//! | slot      | circular difference / 96              | 0.5            |
//! | capacity  | absolute difference / max capacity    | 0.25           |
//!
//! Neighbours are weighted by `1 / (d + 1e-6)`; ties on distance break by
//! event id.

use crate::error::{Error, Result};
use crate::event_impact::{CurveSample, ImpactCurve, SpatialImpact};
use crate::ids::{EventId, VenueId};
use crate::ingest::{Event, EventCatalog};
use crate::time::SLOTS_PER_DAY;
use chrono::Datelike;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

const WEIGHT_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFeatures {
    pub venue_id: VenueId,
    pub category: String,
    /// Days from Monday.
    pub weekday: u8,
    pub slot: u8,
    pub capacity: u32,
}

impl EventFeatures {
    pub fn of(event: &Event, catalog: &EventCatalog) -> Result<Self> {
        let venue = catalog.venue_of(event)?;
        let bin = event.start_bin();
        Ok(Self {
            venue_id: event.venue_id.clone(),
            category: event.category.clone(),
            weekday: bin.day().weekday().num_days_from_monday() as u8,
            slot: bin.slot(),
            capacity: venue.capacity.unwrap_or(0),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureWeights {
    pub venue: f64,
    pub category: f64,
    pub weekday: f64,
    pub slot: f64,
    pub capacity: f64,
}

impl Default for FeatureWeights {
    fn default() -> Self {
        Self {
            venue: 2.0,
            category: 1.0,
            weekday: 0.5,
            slot: 0.5,
            capacity: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnParams {
    pub k: usize,
    pub weights: FeatureWeights,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self {
            k: 3,
            weights: FeatureWeights::default(),
        }
    }
}

/// One historical event with its observed impact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub event_id: EventId,
    pub features: EventFeatures,
    pub radius_m: f64,
    pub curve: Vec<CurveSample>,
}

impl Exemplar {
    pub fn new(event: &Event, catalog: &EventCatalog, spatial: &SpatialImpact, curve: &ImpactCurve) -> Result<Self> {
        Ok(Self {
            event_id: event.id.clone(),
            features: EventFeatures::of(event, catalog)?,
            radius_m: spatial.radius_m,
            curve: curve.samples.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedPredictor {
    pub params: KnnParams,
    /// Sorted by event id, so training order never matters.
    pub exemplars: Vec<Exemplar>,
    pub max_capacity: u32,
    /// SHA-256 over the canonical JSON of params and exemplars.
    pub fingerprint: String,
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    params: &'a KnnParams,
    exemplars: &'a [Exemplar],
}

pub fn train(exemplars: Vec<Exemplar>, params: KnnParams) -> Result<TrainedPredictor> {
    if exemplars.is_empty() {
        return Err(Error::Empty("cannot train a predictor without exemplars"));
    }
    if params.k == 0 {
        return Err(Error::Validation("k must be >= 1".into()));
    }
    let mut exemplars = exemplars;
    exemplars.sort_by(|a, b| a.event_id.cmp(&b.event_id));
    if let Some(w) = exemplars.windows(2).find(|w| w[0].event_id == w[1].event_id) {
        return Err(Error::Validation(format!("duplicate exemplar `{}`", w[0].event_id)));
    }
    let max_capacity = exemplars.iter().map(|e| e.features.capacity).max().unwrap_or(0);
    let json = serde_json::to_vec(&FingerprintInput {
        params: &params,
        exemplars: &exemplars,
    })
    .expect("exemplars serialize");
    let fingerprint = crate::sha256_hex(&json);
    Ok(TrainedPredictor {
        params,
        exemplars,
        max_capacity,
        fingerprint,
    })
}

fn circular(a: u8, b: u8, period: u8) -> f64 {
    let d = a.abs_diff(b);
    d.min(period - d) as f64
}

impl TrainedPredictor {
    pub fn feature_distance(&self, a: &EventFeatures, b: &EventFeatures) -> f64 {
        let w = &self.params.weights;
        let mismatch = |x: bool| if x { 0.0 } else { 1.0 };
        let capacity = if self.max_capacity > 0 {
            a.capacity.abs_diff(b.capacity) as f64 / self.max_capacity as f64
        } else {
            0.0
        };
        w.venue * mismatch(a.venue_id == b.venue_id)
            + w.category * mismatch(a.category == b.category)
            + w.weekday * circular(a.weekday, b.weekday, 7) / 7.0
            + w.slot * circular(a.slot, b.slot, SLOTS_PER_DAY) / SLOTS_PER_DAY as f64
            + w.capacity * capacity
    }

    /// The k nearest exemplars with their weights, nearest first.
    pub fn neighbours(&self, query: &EventFeatures) -> Vec<(&Exemplar, f64)> {
        let mut scored: Vec<(f64, &Exemplar)> = self
            .exemplars
            .iter()
            .map(|e| (self.feature_distance(query, &e.features), e))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.event_id.cmp(&b.1.event_id)));
        scored
            .into_iter()
            .take(self.params.k.min(self.exemplars.len()))
            .map(|(d, e)| (e, 1.0 / (d + WEIGHT_EPSILON)))
            .collect()
    }

    /// Weighted mean of neighbour radii, taken as deviations from the nearest
    /// neighbour so that identical radii come back bit-exact.
    pub fn predict_spatial(&self, query: &EventFeatures) -> f64 {
        let neighbours = self.neighbours(query);
        let base = neighbours[0].0.radius_m;
        let (num, den) = neighbours
            .into_iter()
            .fold((0.0, 0.0), |(n, d), (e, w)| (n + w * (e.radius_m - base), d + w));
        base + num / den
    }

    /// Pointwise weighted mean of neighbour curves; a neighbour without a
    /// sample at some offset is left out there.
    pub fn predict_temporal(&self, query: &EventFeatures) -> Vec<CurveSample> {
        let mut acc: BTreeMap<i64, (f64, f64, f64)> = BTreeMap::new();
        for (e, w) in self.neighbours(query) {
            for s in &e.curve {
                let slot = acc.entry(s.offset_minutes).or_insert((s.delay_s_per_km, 0.0, 0.0));
                slot.1 += w * (s.delay_s_per_km - slot.0);
                slot.2 += w;
            }
        }
        acc.into_iter()
            .map(|(offset_minutes, (base, n, d))| CurveSample {
                offset_minutes,
                delay_s_per_km: base + n / d,
            })
            .collect()
    }

    pub fn exemplar_ids(&self) -> BTreeSet<&EventId> {
        self.exemplars.iter().map(|e| &e.event_id).collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictor serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::Validation(format!("predictor: {e}")))?;
        if p.exemplars.is_empty() {
            return Err(Error::Empty("serialized predictor has no exemplars"));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

/// Forecast for one event, as emitted by the `predict` stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub event_id: EventId,
    pub venue_id: VenueId,
    pub predicted_radius_m: f64,
    pub predicted_curve: Vec<CurveSample>,
    pub neighbours: Vec<EventId>,
    pub model_fingerprint: String,
    pub prediction: bool,
}

impl TrainedPredictor {
    pub fn predict_event(&self, event: &Event, catalog: &EventCatalog) -> Result<PredictionRecord> {
        let query = EventFeatures::of(event, catalog)?;
        Ok(PredictionRecord {
            event_id: event.id.clone(),
            venue_id: event.venue_id.clone(),
            predicted_radius_m: self.predict_spatial(&query),
            predicted_curve: self.predict_temporal(&query),
            neighbours: self.neighbours(&query).into_iter().map(|(e, _)| e.event_id.clone()).collect(),
            model_fingerprint: self.fingerprint.clone(),
            prediction: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn features(venue: &str, category: &str, weekday: u8, slot: u8, capacity: u32) -> EventFeatures {
        EventFeatures {
            venue_id: venue.into(),
            category: category.into(),
            weekday,
            slot,
            capacity,
        }
    }

    fn ex(id: &str, f: EventFeatures, radius: f64, curve: &[(i64, f64)]) -> Exemplar {
        Exemplar {
            event_id: id.into(),
            features: f,
            radius_m: radius,
            curve: curve
                .iter()
                .map(|&(o, d)| CurveSample {
                    offset_minutes: o,
                    delay_s_per_km: d,
                })
                .collect(),
        }
    }

    #[test]
    fn single_exemplar_is_reproduced() {
        let e = ex("a", features("v", "concert", 4, 80, 1000), 2345.5, &[(0, 10.0), (15, 12.5)]);
        let p = train(vec![e.clone()], KnnParams::default()).unwrap();
        let q = features("w", "fair", 0, 10, 99);
        assert_eq!(p.predict_spatial(&q), 2345.5);
        assert_eq!(p.predict_temporal(&q), e.curve);
    }

    #[test]
    fn identical_query_with_k1_is_exact() {
        let a = ex("a", features("v", "concert", 4, 80, 1000), 1000.0, &[(0, 1.0)]);
        let b = ex("b", features("w", "fair", 1, 40, 300), 4000.0, &[(0, 9.0)]);
        let p = train(vec![a.clone(), b], KnnParams { k: 1, ..Default::default() }).unwrap();
        assert_eq!(p.predict_spatial(&a.features), 1000.0);
        assert_eq!(p.predict_temporal(&a.features), a.curve);
    }

    #[test]
    fn equidistant_neighbours_average() {
        let a = ex("a", features("v", "concert", 2, 80, 0), 1000.0, &[(0, 2.0), (15, 4.0)]);
        let b = ex("b", features("v", "concert", 4, 80, 0), 3000.0, &[(0, 6.0), (15, 8.0), (30, 1.0)]);
        let p = train(vec![a, b], KnnParams { k: 2, ..Default::default() }).unwrap();
        let q = features("v", "concert", 3, 80, 0);
        assert!((p.predict_spatial(&q) - 2000.0).abs() < 1e-9);
        let curve = p.predict_temporal(&q);
        assert_eq!(curve.len(), 3);
        assert!((curve[0].delay_s_per_km - 4.0).abs() < 1e-12);
        assert!((curve[1].delay_s_per_km - 6.0).abs() < 1e-12);
        assert_eq!(curve[2].delay_s_per_km, 1.0);
    }

    #[test]
    fn constant_target_is_exact() {
        let exs: Vec<_> = (0..7)
            .map(|i| ex(&format!("e{i}"), features("v", "c", i as u8, 10 * i as u8, 100 * i), 1234.56789, &[(0, 0.1)]))
            .collect();
        let p = train(exs, KnnParams { k: 5, ..Default::default() }).unwrap();
        let q = features("x", "y", 3, 33, 250);
        assert_eq!(p.predict_spatial(&q), 1234.56789);
        assert_eq!(p.predict_temporal(&q)[0].delay_s_per_km, 0.1);
    }

    #[test]
    fn distance_terms() {
        let p = train(vec![ex("a", features("v", "c", 0, 0, 2000), 0.0, &[])], KnnParams::default()).unwrap();
        let base = features("v", "c", 0, 0, 0);
        assert_eq!(p.feature_distance(&base, &base), 0.0);
        assert_eq!(p.feature_distance(&base, &features("w", "c", 0, 0, 0)), 2.0);
        assert_eq!(p.feature_distance(&base, &features("v", "d", 0, 0, 0)), 1.0);
        assert!((p.feature_distance(&base, &features("v", "c", 6, 0, 0)) - 0.5 / 7.0).abs() < 1e-12);
        assert!((p.feature_distance(&base, &features("v", "c", 0, 95, 0)) - 0.5 / 96.0).abs() < 1e-12);
        assert!((p.feature_distance(&base, &features("v", "c", 0, 0, 1000)) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn training_errors() {
        assert!(train(vec![], KnnParams::default()).is_err());
        let a = ex("a", features("v", "c", 0, 0, 0), 1.0, &[]);
        assert!(train(vec![a.clone(), a.clone()], KnnParams::default()).is_err());
        assert!(train(vec![a], KnnParams { k: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let exs = vec![
            ex("a", features("v", "concert", 4, 80, 1000), 1234.567891, &[(0, 10.1), (15, 0.3)]),
            ex("b", features("w", "fair", 1, 40, 3000), 4321.0000001, &[(0, 9.0)]),
            ex("c", features("v", "fair", 6, 76, 1000), 999.9, &[(-15, 0.1)]),
        ];
        let p = train(exs, KnnParams::default()).unwrap();
        let back = TrainedPredictor::from_json_str(&p.to_json_string()).unwrap();
        assert_eq!(back, p);
        let q = features("v", "football", 5, 62, 2000);
        assert_eq!(back.predict_spatial(&q).to_bits(), p.predict_spatial(&q).to_bits());
    }

    proptest! {
        #[test]
        fn order_invariant_and_in_range(
            radii in prop::collection::vec(0.0f64..10_000.0, 1..12),
            venues in prop::collection::vec(0u8..3, 12),
            days in prop::collection::vec(0u8..7, 12),
            q_day in 0u8..7, q_slot in 0u8..96, rot in 0usize..12,
        ) {
            let exs: Vec<_> = radii.iter().enumerate().map(|(i, &r)| {
                ex(&format!("e{i:02}"), features(&format!("v{}", venues[i]), "c", days[i], 70, 100 * i as u32), r, &[(0, r / 100.0)])
            }).collect();
            let mut rotated = exs.clone();
            rotated.rotate_left(rot % exs.len());
            let p = train(exs, KnnParams::default()).unwrap();
            let r = train(rotated, KnnParams::default()).unwrap();
            let q = features("v1", "c", q_day, q_slot, 350);
            let pred = p.predict_spatial(&q);
            prop_assert_eq!(pred.to_bits(), r.predict_spatial(&q).to_bits());
            let near: Vec<f64> = p.neighbours(&q).iter().map(|(e, _)| e.radius_m).collect();
            let lo = near.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = near.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pred >= lo - 1e-9 && pred <= hi + 1e-9);
            prop_assert!(p.predict_temporal(&q).iter().all(|s| s.delay_s_per_km >= 0.0));
        }

        #[test]
        fn k_equals_n_with_equal_distances_is_global_mean(radii in prop::collection::vec(0.0f64..10_000.0, 1..10)) {
            let exs: Vec<_> = radii.iter().enumerate().map(|(i, &r)| ex(&format!("e{i}"), features("v", "c", 0, 0, 0), r, &[])).collect();
            let p = train(exs, KnnParams { k: radii.len(), ..Default::default() }).unwrap();
            let mean = radii.iter().sum::<f64>() / radii.len() as f64;
            prop_assert!((p.predict_spatial(&features("v", "c", 0, 0, 0)) - mean).abs() < 1e-6);
        }
    }
}
