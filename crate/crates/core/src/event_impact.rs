//! Impact of planned events on the road network: the event-specific affected
//! subgraph, the venue's typically affected subgraph (TAS), the spatial impact
//! radius and the temporal delay curve.

use crate::affectedness::AffectednessMask;
use crate::error::{Error, Result};
use crate::geo::geo_distance;
use crate::graph::{connected_components, TransportationGraph};
use crate::ids::{EventId, UnitId, VenueId};
use crate::ingest::{Event, EventCatalog, TrafficStore, Venue};
use crate::time::{TimeBin, SLOT_MINUTES};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Floor applied to observed speeds before inverting them, km/h.
pub const STANDSTILL_FLOOR_KMH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpactParams {
    pub max_radius_m: f64,
    pub seed_radius_m: f64,
    /// Minutes before the event start covered by the window.
    pub window_before_min: i64,
    /// Minutes after the event start covered by the window.
    pub window_after_min: i64,
}

impl Default for ImpactParams {
    fn default() -> Self {
        Self {
            max_radius_m: 10_000.0,
            seed_radius_m: 1_000.0,
            window_before_min: 120,
            window_after_min: 240,
        }
    }
}

impl ImpactParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_radius_m >= 0.0 && self.seed_radius_m >= 0.0) {
            return Err(Error::Validation("impact radii must be >= 0".into()));
        }
        if self.window_before_min < 0 || self.window_after_min < 0 {
            return Err(Error::Validation("impact window bounds must be >= 0".into()));
        }
        if self.window_before_min % SLOT_MINUTES != 0 || self.window_after_min % SLOT_MINUTES != 0 {
            return Err(Error::Validation("impact window bounds must be multiples of 15 minutes".into()));
        }
        Ok(())
    }

    /// Offsets in minutes covered by the window, on the 15-minute grid.
    pub fn offsets(&self) -> impl Iterator<Item = i64> {
        (-self.window_before_min..=self.window_after_min).step_by(SLOT_MINUTES as usize)
    }

    pub fn window_bins(&self, start: TimeBin) -> impl Iterator<Item = (i64, TimeBin)> {
        self.offsets().map(move |m| (m, start.offset(m / SLOT_MINUTES)))
    }
}

/// First and last affected bin of a unit inside the event window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffectedSpan {
    pub first: TimeBin,
    pub last: TimeBin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffectedSubgraph {
    pub event_id: EventId,
    pub units: BTreeMap<UnitId, AffectedSpan>,
}

impl AffectedSubgraph {
    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn unit_ids(&self) -> impl Iterator<Item = &UnitId> {
        self.units.keys()
    }
}

/// Affected subgraph of one event.
///
/// Candidates are units whose reference point lies within `max_radius_m` of
/// the venue and that are affected at least once inside the event window.
/// Candidates within `seed_radius_m` seed the search; the result is the union
/// of candidate components (under undirected adjacency) containing a seed.
pub fn affected_subgraph(
    event: &Event,
    catalog: &EventCatalog,
    graph: &TransportationGraph,
    mask: &AffectednessMask,
    params: &ImpactParams,
) -> Result<AffectedSubgraph> {
    params.validate()?;
    let venue = catalog.venue_of(event)?;
    let window: Vec<TimeBin> = params.window_bins(event.start_bin()).map(|(_, b)| b).collect();
    let mut candidates: BTreeMap<UnitId, (AffectedSpan, f64)> = BTreeMap::new();
    for (unit, bins) in mask.units() {
        let Some(at) = graph.reference_point(unit) else {
            continue;
        };
        let hits: Vec<TimeBin> = window.iter().copied().filter(|b| bins.contains(b)).collect();
        let (Some(&first), Some(&last)) = (hits.first(), hits.last()) else {
            continue;
        };
        let d = geo_distance(venue.location, at);
        if d <= params.max_radius_m {
            candidates.insert(unit.clone(), (AffectedSpan { first, last }, d));
        }
    }
    let components = connected_components(candidates.keys(), graph)?;
    let mut units = BTreeMap::new();
    for component in components {
        if component.iter().any(|u| candidates[u].1 <= params.seed_radius_m) {
            for u in component {
                let span = candidates[&u].0;
                units.insert(u, span);
            }
        }
    }
    Ok(AffectedSubgraph {
        event_id: event.id.clone(),
        units,
    })
}

/// How often each unit appears across a venue's event subgraphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitFrequencies {
    pub venue_id: VenueId,
    pub event_count: usize,
    pub counts: BTreeMap<UnitId, usize>,
}

impl UnitFrequencies {
    pub fn from_subgraphs(venue_id: VenueId, subgraphs: &[AffectedSubgraph]) -> Result<Self> {
        if subgraphs.is_empty() {
            return Err(Error::Empty("typically affected subgraph needs at least one event subgraph"));
        }
        let mut counts = BTreeMap::new();
        for sg in subgraphs {
            for u in sg.unit_ids() {
                *counts.entry(u.clone()).or_insert(0) += 1;
            }
        }
        Ok(Self {
            venue_id,
            event_count: subgraphs.len(),
            counts,
        })
    }

    pub fn frequency(&self, unit: &UnitId) -> f64 {
        self.counts.get(unit).map_or(0.0, |&c| c as f64 / self.event_count as f64)
    }

    /// The TAS at threshold `tau`.
    pub fn at(&self, tau: f64) -> Result<TypicallyAffectedSubgraph> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Domain(format!("tau must lie in (0, 1], got {tau}")));
        }
        let units = self
            .counts
            .iter()
            .map(|(u, &c)| (u, c as f64 / self.event_count as f64))
            .filter(|&(_, f)| f >= tau)
            .map(|(u, f)| (u.clone(), f))
            .collect();
        Ok(TypicallyAffectedSubgraph {
            venue_id: self.venue_id.clone(),
            tau,
            event_count: self.event_count,
            units,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypicallyAffectedSubgraph {
    pub venue_id: VenueId,
    pub tau: f64,
    pub event_count: usize,
    /// Included units with their frequency.
    pub units: BTreeMap<UnitId, f64>,
}

impl TypicallyAffectedSubgraph {
    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

pub fn typically_affected_subgraph(venue_id: &VenueId, subgraphs: &[AffectedSubgraph], tau: f64) -> Result<TypicallyAffectedSubgraph> {
    UnitFrequencies::from_subgraphs(venue_id.clone(), subgraphs)?.at(tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialImpact {
    pub event_id: EventId,
    pub radius_m: f64,
    /// The unit realising the radius; `None` for an empty subgraph.
    pub argmax_unit: Option<UnitId>,
}

pub fn spatial_impact(subgraph: &AffectedSubgraph, venue: &Venue, graph: &TransportationGraph) -> Result<SpatialImpact> {
    let mut best: Option<(f64, &UnitId)> = None;
    for u in subgraph.unit_ids() {
        let at = graph.reference_point(u).ok_or_else(|| Error::UnknownUnit(u.to_string()))?;
        let d = geo_distance(venue.location, at);
        if best.is_none_or(|(m, _)| d > m) {
            best = Some((d, u));
        }
    }
    Ok(SpatialImpact {
        event_id: subgraph.event_id.clone(),
        radius_m: best.map_or(0.0, |b| b.0),
        argmax_unit: best.map(|b| b.1.clone()),
    })
}

/// Extra travel time against free flow at the speed limit, in seconds per km.
pub fn delay(speed_kmh: f64, limit_kmh: f64) -> Result<f64> {
    if !(limit_kmh > 0.0) {
        return Err(Error::Domain(format!("speed limit must be > 0, got {limit_kmh}")));
    }
    let speed = speed_kmh.max(STANDSTILL_FLOOR_KMH);
    Ok((3600.0 * (1.0 / speed - 1.0 / limit_kmh)).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub offset_minutes: i64,
    pub delay_s_per_km: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactCurve {
    /// Event or venue the curve describes.
    pub subject_id: String,
    pub samples: Vec<CurveSample>,
}

impl ImpactCurve {
    /// Offset of the largest value; earliest offset wins ties.
    pub fn peak_offset(&self) -> Option<i64> {
        self.samples
            .iter()
            .fold(None::<&CurveSample>, |best, s| match best {
                Some(b) if b.delay_s_per_km >= s.delay_s_per_km => Some(b),
                _ => Some(s),
            })
            .map(|s| s.offset_minutes)
    }
}

/// Mean delay over TAS units at each offset around the event start. Offsets
/// where no TAS unit has an observation are left out.
pub fn temporal_impact(
    event: &Event,
    tas: &TypicallyAffectedSubgraph,
    traffic: &TrafficStore,
    graph: &TransportationGraph,
    params: &ImpactParams,
) -> Result<ImpactCurve> {
    if tas.is_empty() {
        return Err(Error::Empty("temporal impact needs a non-empty typically affected subgraph"));
    }
    params.validate()?;
    let limits = tas
        .units
        .keys()
        .map(|u| Ok((u, graph.unit(u).ok_or_else(|| Error::UnknownUnit(u.to_string()))?.speed_limit_kmh)))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::new();
    for (offset, bin) in params.window_bins(event.start_bin()) {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &(u, limit) in &limits {
            if let Some(speed) = traffic.get(u, bin) {
                sum += delay(speed, limit)?;
                n += 1;
            }
        }
        if n > 0 {
            samples.push(CurveSample {
                offset_minutes: offset,
                delay_s_per_km: sum / n as f64,
            });
        }
    }
    Ok(ImpactCurve {
        subject_id: event.id.to_string(),
        samples,
    })
}

/// Unit ids of a subgraph, for set algebra in callers.
pub fn unit_set(subgraph: &AffectedSubgraph) -> BTreeSet<UnitId> {
    subgraph.units.keys().cloned().collect()
}

/// Per-event output of the historical analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventImpactRecord {
    pub event_id: EventId,
    pub venue_id: VenueId,
    pub units: Vec<UnitId>,
    pub spatial_radius_m: f64,
    pub argmax_unit: Option<UnitId>,
    pub temporal_curve: Vec<CurveSample>,
    /// Set when the curve could not be measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve_skip_reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedEvent {
    pub event_id: EventId,
    pub reason: String,
}

/// Everything the historical stage derives from one catalog.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImpactAnalysis {
    pub subgraphs: Vec<AffectedSubgraph>,
    pub frequencies: Vec<UnitFrequencies>,
    pub records: Vec<EventImpactRecord>,
    pub skipped: Vec<SkippedEvent>,
}

/// Runs the historical analysis over every event whose whole window lies in
/// the mask's domain and that starts before `as_of`. Other events are listed
/// as skipped.
pub fn analyze_events(
    catalog: &EventCatalog,
    graph: &TransportationGraph,
    mask: &AffectednessMask,
    traffic: &TrafficStore,
    params: &ImpactParams,
    tau: f64,
    as_of: chrono::NaiveDateTime,
) -> Result<ImpactAnalysis> {
    params.validate()?;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Domain(format!("tau must lie in (0, 1], got {tau}")));
    }
    let mut out = ImpactAnalysis::default();
    let mut by_venue: BTreeMap<&VenueId, Vec<&Event>> = BTreeMap::new();
    for event in catalog.events() {
        let start = event.start_bin();
        let covered = mask.domain().is_some_and(|d| {
            d.contains(start.offset(-params.window_before_min / SLOT_MINUTES)) && d.contains(start.offset(params.window_after_min / SLOT_MINUTES))
        });
        let reason = if event.start >= as_of {
            Some("starts at or after the as-of time")
        } else if !covered {
            Some("event window not covered by traffic data")
        } else {
            None
        };
        match reason {
            Some(r) => out.skipped.push(SkippedEvent {
                event_id: event.id.clone(),
                reason: r.into(),
            }),
            None => by_venue.entry(&event.venue_id).or_default().push(event),
        }
    }
    for (venue_id, events) in by_venue {
        let venue = catalog.venue(venue_id).ok_or_else(|| Error::UnknownVenue(venue_id.to_string()))?;
        let subgraphs = events
            .iter()
            .map(|e| affected_subgraph(e, catalog, graph, mask, params))
            .collect::<Result<Vec<_>>>()?;
        let frequencies = UnitFrequencies::from_subgraphs(venue_id.clone(), &subgraphs)?;
        let tas = frequencies.at(tau)?;
        for (event, sg) in events.iter().zip(&subgraphs) {
            let spatial = spatial_impact(sg, venue, graph)?;
            let (temporal_curve, curve_skip_reason) = if tas.is_empty() {
                (Vec::new(), Some(format!("typically affected subgraph of `{venue_id}` is empty at tau {tau}")))
            } else {
                (temporal_impact(event, &tas, traffic, graph, params)?.samples, None)
            };
            out.records.push(EventImpactRecord {
                event_id: event.id.clone(),
                venue_id: venue_id.clone(),
                units: sg.unit_ids().cloned().collect(),
                spatial_radius_m: spatial.radius_m,
                argmax_unit: spatial.argmax_unit,
                temporal_curve,
                curve_skip_reason,
            });
        }
        out.subgraphs.extend(subgraphs);
        out.frequencies.push(frequencies);
    }
    out.records.sort_by(|a, b| a.event_id.cmp(&b.event_id));
    out.subgraphs.sort_by(|a, b| a.event_id.cmp(&b.event_id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use crate::graph::tests::grid;
    use crate::ingest::Venue;
    use crate::time::parse_timestamp;
    use proptest::prelude::*;

    fn catalog(venue_at: GeoPoint) -> EventCatalog {
        EventCatalog::new(
            [Venue {
                id: "v".into(),
                name: "Hall".into(),
                location: venue_at,
                capacity: Some(5000),
            }],
            [Event {
                id: "e".into(),
                venue_id: "v".into(),
                name: "Show".into(),
                category: "concert".into(),
                start: parse_timestamp("2017-10-02T20:00:00").unwrap(),
                end: None,
            }],
        )
        .unwrap()
    }

    fn mask_of(units: &[(&UnitId, TimeBin)]) -> AffectednessMask {
        let mut flagged: BTreeMap<UnitId, BTreeSet<TimeBin>> = BTreeMap::new();
        for (u, b) in units {
            flagged.entry((*u).clone()).or_default().insert(*b);
        }
        AffectednessMask::new(None, flagged)
    }

    fn sg(id: &str, units: &[&str]) -> AffectedSubgraph {
        let b: TimeBin = "2017-10-02T20:00".parse().unwrap();
        AffectedSubgraph {
            event_id: id.into(),
            units: units.iter().map(|u| (UnitId::from(*u), AffectedSpan { first: b, last: b })).collect(),
        }
    }

    #[test]
    fn no_affected_units_gives_empty_subgraph() {
        let g = grid(5, 5, 200.0);
        let c = catalog(g.node(&"n02_02".into()).unwrap());
        let s = affected_subgraph(&c.events()[0], &c, &g, &AffectednessMask::default(), &ImpactParams::default()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn single_nearby_unit_is_its_own_subgraph() {
        let g = grid(5, 5, 200.0);
        let c = catalog(g.node(&"n02_02".into()).unwrap());
        let u = UnitId::from("n02_02-n02_03");
        let start = c.events()[0].start_bin();
        let s = affected_subgraph(&c.events()[0], &c, &g, &mask_of(&[(&u, start.offset(2))]), &ImpactParams::default()).unwrap();
        assert_eq!(s.unit_ids().collect::<Vec<_>>(), vec![&u]);
        assert_eq!(s.units[&u].first, start.offset(2));
    }

    #[test]
    fn out_of_window_and_unseeded_units_are_excluded() {
        let g = grid(8, 8, 250.0);
        let c = catalog(g.node(&"n00_00".into()).unwrap());
        let start = c.events()[0].start_bin();
        let near = UnitId::from("n00_00-n00_01");
        let late = UnitId::from("n00_01-n00_02");
        let far = UnitId::from("n07_06-n07_07");
        let m = mask_of(&[(&near, start), (&late, start.offset(17)), (&far, start)]);
        let s = affected_subgraph(&c.events()[0], &c, &g, &m, &ImpactParams::default()).unwrap();
        assert_eq!(s.unit_ids().collect::<Vec<_>>(), vec![&near]);
    }

    #[test]
    fn growth_follows_candidates_beyond_seed_radius() {
        let g = grid(1, 12, 250.0);
        let c = catalog(g.node(&"n00_00".into()).unwrap());
        let start = c.events()[0].start_bin();
        let chain: Vec<UnitId> = (0..10).map(|i| UnitId(format!("n00_{:02}-n00_{:02}", i, i + 1))).collect();
        let entries: Vec<_> = chain.iter().map(|u| (u, start)).collect();
        let s = affected_subgraph(&c.events()[0], &c, &g, &mask_of(&entries), &ImpactParams::default()).unwrap();
        assert_eq!(s.units.len(), 10);
        let narrow = ImpactParams {
            max_radius_m: 1_000.0,
            ..Default::default()
        };
        let s = affected_subgraph(&c.events()[0], &c, &g, &mask_of(&entries), &narrow).unwrap();
        assert_eq!(s.units.len(), 4);
    }

    #[test]
    fn tas_thresholds() {
        let subs = [sg("a", &["x", "y"]), sg("b", &["x"]), sg("c", &["x", "z"]), sg("d", &["w"])];
        let half = typically_affected_subgraph(&"v".into(), &subs, 0.5).unwrap();
        assert_eq!(half.units.get(&UnitId::from("x")), Some(&0.75));
        assert_eq!(half.units.len(), 1);
        assert!(typically_affected_subgraph(&"v".into(), &subs, 0.8).unwrap().is_empty());
        let all = typically_affected_subgraph(&"v".into(), &subs[..3], 1.0).unwrap();
        assert_eq!(all.units.keys().collect::<Vec<_>>(), vec![&UnitId::from("x")]);
        let any = typically_affected_subgraph(&"v".into(), &subs, f64::MIN_POSITIVE).unwrap();
        assert_eq!(any.units.len(), 4);
        assert!(typically_affected_subgraph(&"v".into(), &[], 0.5).is_err());
        assert!(typically_affected_subgraph(&"v".into(), &subs, 0.0).is_err());
        assert!(typically_affected_subgraph(&"v".into(), &subs, 1.5).is_err());
    }

    #[test]
    fn spatial_impact_is_max_distance() {
        let g = grid(1, 20, 100.0);
        let origin = g.node(&"n00_00".into()).unwrap();
        let venue = Venue {
            id: "v".into(),
            name: "v".into(),
            location: origin,
            capacity: None,
        };
        let empty = spatial_impact(&sg("e", &[]), &venue, &g).unwrap();
        assert_eq!((empty.radius_m, empty.argmax_unit), (0.0, None));
        let s = sg("e", &["n00_01-n00_02", "n00_12-n00_13", "n00_04-n00_05"]);
        let imp = spatial_impact(&s, &venue, &g).unwrap();
        let want = geo_distance(origin, g.reference_point(&"n00_12-n00_13".into()).unwrap());
        assert_eq!(imp.radius_m, want);
        assert!((imp.radius_m - 1250.0).abs() < 1.0);
        assert_eq!(imp.argmax_unit.unwrap().as_str(), "n00_12-n00_13");
    }

    #[test]
    fn delay_cases() {
        assert!((delay(30.0, 60.0).unwrap() - 60.0).abs() < 1e-9);
        assert_eq!(delay(60.0, 60.0).unwrap(), 0.0);
        assert_eq!(delay(80.0, 60.0).unwrap(), 0.0);
        assert!((delay(0.0, 60.0).unwrap() - 3540.0).abs() < 1e-9);
        assert!(delay(10.0, 0.0).is_err());
    }

    fn store(entries: &[(&str, TimeBin, f64)]) -> TrafficStore {
        let mut b = TrafficStore::builder();
        for (u, bin, s) in entries {
            b.add(&UnitId::from(*u), *bin, *s);
        }
        b.build()
    }

    #[test]
    fn temporal_impact_cases() {
        let g = grid(2, 2, 100.0);
        let c = catalog(g.node(&"n00_00".into()).unwrap());
        let e = &c.events()[0];
        let start = e.start_bin();
        let u = "n00_00-n00_01";
        let tas = typically_affected_subgraph(&"v".into(), &[sg("e", &[u])], 0.5).unwrap();
        let p = ImpactParams::default();

        let free: Vec<_> = p.window_bins(start).map(|(_, b)| (u, b, 50.0)).collect();
        let curve = temporal_impact(e, &tas, &store(&free), &g, &p).unwrap();
        assert_eq!(curve.samples.len(), 25);
        assert!(curve.samples.iter().all(|s| s.delay_s_per_km == 0.0));
        assert_eq!(curve.samples[0].offset_minutes, -120);
        assert_eq!(curve.samples[24].offset_minutes, 240);

        // Limit 50: 3600 * (1/25 - 1/50) = 72 s/km.
        let one = temporal_impact(e, &tas, &store(&[(u, start.offset(1), 25.0)]), &g, &p).unwrap();
        assert_eq!(one.samples.len(), 1);
        assert_eq!(one.samples[0].offset_minutes, 15);
        assert!((one.samples[0].delay_s_per_km - 72.0).abs() < 1e-9);

        let empty = typically_affected_subgraph(&"v".into(), &[sg("e", &[])], 0.5).unwrap();
        assert!(temporal_impact(e, &empty, &store(&[]), &g, &p).is_err());
    }

    proptest! {
        #[test]
        fn tas_nests_as_tau_grows(
            sets in prop::collection::vec(prop::collection::btree_set(0u8..12, 0..8), 1..8),
            t1 in 0.01f64..=1.0, t2 in 0.01f64..=1.0,
        ) {
            let subs: Vec<_> = sets.iter().enumerate().map(|(i, s)| {
                let names: Vec<String> = s.iter().map(|x| format!("u{x}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                sg(&format!("e{i}"), &refs)
            }).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = typically_affected_subgraph(&"v".into(), &subs, lo).unwrap();
            let b = typically_affected_subgraph(&"v".into(), &subs, hi).unwrap();
            prop_assert!(b.units.keys().all(|u| a.units.contains_key(u)));
            prop_assert!(b.units.values().all(|&f| f >= hi));
        }
    }
}
