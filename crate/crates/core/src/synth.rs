//! Deterministic synthetic road networks, traffic and event catalogs.
//!
//! The generator lays out a rectangular grid of two-way streets, produces a
//! weekday/weekend speed profile with bounded multiplicative noise, and injects
//! slowdowns around venues after event starts and at recurring hotspots whose
//! activity schedules can be shared to create co-active congestion.

use crate::error::{Error, Result};
use crate::geo::{geo_distance, GeoPoint};
use crate::graph::{TransportationGraph, Unit};
use crate::ids::{EventId, NodeId, UnitId, VenueId};
use crate::ingest::{Event, EventCatalog, TrafficStore, Venue};
use crate::time::{iso, BinRange, TimeBin, SLOTS_PER_DAY, SLOT_MINUTES};
use chrono::{Datelike, NaiveDate, NaiveDateTime, Weekday};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing_m: f64,
    pub origin_lon: f64,
    pub origin_lat: f64,
    #[serde(default = "default_limit")]
    pub speed_limit_kmh: f64,
    /// Every n-th row and column is an arterial; 0 disables arterials.
    #[serde(default)]
    pub arterial_every: usize,
    #[serde(default = "default_arterial_limit")]
    pub arterial_limit_kmh: f64,
}

fn default_limit() -> f64 {
    50.0
}

fn default_arterial_limit() -> f64 {
    70.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineProfile {
    /// Off-peak speed as a fraction of the limit.
    pub free_flow_ratio: f64,
    /// Peak reduction of that fraction in the weekday rush hours.
    pub rush_hour_drop: f64,
    /// Half-width of the uniform multiplicative noise drawn once per unit and
    /// day.
    pub noise: f64,
    /// Half-width of the uniform multiplicative noise drawn per bin.
    #[serde(default = "default_bin_noise")]
    pub bin_noise: f64,
}

fn default_bin_noise() -> f64 {
    0.003
}

impl Default for BaselineProfile {
    fn default() -> Self {
        Self {
            free_flow_ratio: 0.85,
            rush_hour_drop: 0.15,
            noise: 0.05,
            bin_noise: default_bin_noise(),
        }
    }
}

impl BaselineProfile {
    /// Expected speed fraction of the limit at a bin, before noise.
    pub fn ratio(&self, bin: TimeBin) -> f64 {
        let hour = bin.slot() as f64 * SLOT_MINUTES as f64 / 60.0 + 0.125;
        let bump = |centre: f64, width: f64| (-((hour - centre) / width).powi(2)).exp();
        let weekend = matches!(bin.weekday(), Weekday::Sat | Weekday::Sun);
        let peak = if weekend { 0.3 * bump(14.0, 3.0) } else { bump(8.0, 1.0) + bump(17.5, 1.25) };
        self.free_flow_ratio - self.rush_hour_drop * peak
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VenueSpec {
    pub id: VenueId,
    pub name: String,
    pub row: usize,
    pub col: usize,
    #[serde(default)]
    pub capacity: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub id: EventId,
    pub venue_id: VenueId,
    pub name: String,
    pub category: String,
    #[serde(with = "iso")]
    pub start: NaiveDateTime,
    /// Overrides the injection radius for this event.
    #[serde(default)]
    pub radius_m: Option<f64>,
}

/// Randomly scheduled events, one per day, round-robin over venues.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoEvents {
    /// Events inside the traffic period.
    pub count: usize,
    /// Events in the days right after the traffic period, without traffic.
    #[serde(default)]
    pub future_count: usize,
    #[serde(default)]
    pub future_days: u32,
    pub categories: Vec<String>,
    /// Candidate start slots; each event draws one.
    pub start_slots: Vec<u8>,
    /// Per-category injection radius; categories not listed use the default.
    #[serde(default)]
    pub radius_by_category: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionSpec {
    pub radius_m: f64,
    /// Injection window relative to event start, [start, end) in minutes.
    pub window_start_min: i64,
    pub window_end_min: i64,
    /// Speed multiplier applied inside the window.
    pub multiplier: f64,
}

impl Default for InjectionSpec {
    fn default() -> Self {
        Self {
            radius_m: 1_000.0,
            window_start_min: 0,
            window_end_min: 60,
            multiplier: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HotspotSpec {
    pub row: usize,
    pub col: usize,
    pub radius_m: f64,
    /// Hotspots sharing a group share one activity schedule.
    pub group: u32,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub start_date: NaiveDate,
    pub days: u32,
    #[serde(default)]
    pub baseline: BaselineProfile,
    #[serde(default)]
    pub venues: Vec<VenueSpec>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub auto_events: Option<AutoEvents>,
    #[serde(default)]
    pub injection: InjectionSpec,
    #[serde(default)]
    pub hotspots: Vec<HotspotSpec>,
    /// Per-bin probability that a hotspot group is active.
    #[serde(default)]
    pub hotspot_activation: f64,
}

/// What the generator injected, for scoring recovered results.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Units slowed by each event that falls inside the traffic period.
    pub event_units: BTreeMap<EventId, BTreeSet<UnitId>>,
    pub hotspot_units: Vec<BTreeSet<UnitId>>,
    pub group_activity: BTreeMap<u32, BTreeSet<TimeBin>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub graph: TransportationGraph,
    pub traffic: TrafficStore,
    pub catalog: EventCatalog,
    pub truth: GroundTruth,
}

impl SynthOutput {
    /// Writes `graph.json`, `traffic.csv`, `events.json` and `truth.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.graph.save(dir.join("graph.json"))?;
        self.traffic.write_csv(dir.join("traffic.csv"))?;
        self.catalog.save(dir.join("events.json"))?;
        let truth = dir.join("truth.json");
        std::fs::write(&truth, serde_json::to_string_pretty(&self.truth).unwrap()).map_err(|e| Error::io(&truth, e))
    }
}

pub fn node_id(row: usize, col: usize) -> NodeId {
    NodeId(format!("n{row:03}_{col:03}"))
}

/// Two-way street grid; unit ids are `<from>-<to>`.
pub fn grid_graph(spec: &GridSpec) -> Result<TransportationGraph> {
    if spec.rows < 2 || spec.cols < 2 {
        return Err(Error::Validation("grid needs at least 2 rows and 2 columns".into()));
    }
    if !(spec.spacing_m > 0.0 && spec.speed_limit_kmh > 0.0 && spec.arterial_limit_kmh > 0.0) {
        return Err(Error::Validation("grid spacing and speed limits must be > 0".into()));
    }
    let origin = GeoPoint::new(spec.origin_lon, spec.origin_lat)?;
    let mut at = BTreeMap::new();
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let p = origin.offset_m(c as f64 * spec.spacing_m, r as f64 * spec.spacing_m);
            at.insert(node_id(r, c), GeoPoint::new(p.lon, p.lat)?);
        }
    }
    let arterial = |i: usize| spec.arterial_every > 0 && i.is_multiple_of(spec.arterial_every);
    let mut units = Vec::new();
    let mut link = |a: NodeId, b: NodeId, major: bool| {
        for (f, t) in [(a.clone(), b.clone()), (b, a)] {
            let geometry = vec![at[&f], at[&t]];
            units.push(Unit {
                id: UnitId(format!("{f}-{t}")),
                length_m: geo_distance(geometry[0], geometry[1]),
                geometry,
                from: f,
                to: t,
                speed_limit_kmh: if major { spec.arterial_limit_kmh } else { spec.speed_limit_kmh },
            });
        }
    };
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            if c + 1 < spec.cols {
                link(node_id(r, c), node_id(r, c + 1), arterial(r));
            }
            if r + 1 < spec.rows {
                link(node_id(r, c), node_id(r + 1, c), arterial(c));
            }
        }
    }
    TransportationGraph::new(at, units)
}

/// Units whose reference point lies within `radius_m` of `centre`.
pub fn units_within(graph: &TransportationGraph, centre: GeoPoint, radius_m: f64) -> BTreeSet<UnitId> {
    graph
        .unit_ids()
        .filter(|u| geo_distance(centre, graph.reference_point(u).unwrap()) <= radius_m)
        .cloned()
        .collect()
}

struct Slowdown {
    first: i64,
    /// Exclusive.
    end: i64,
    multiplier: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.days == 0 {
            return bad("days must be >= 1".into());
        }
        let b = &self.baseline;
        if !(b.free_flow_ratio > 0.0 && b.free_flow_ratio - b.rush_hour_drop > 0.0 && (0.0..1.0).contains(&b.noise) && (0.0..1.0).contains(&b.bin_noise)) {
            return bad("baseline profile must keep speeds positive and noise in [0, 1)".into());
        }
        let inj = &self.injection;
        if !(inj.multiplier > 0.0 && inj.multiplier <= 1.0) || inj.radius_m < 0.0 || inj.window_end_min <= inj.window_start_min {
            return bad("injection needs multiplier in (0, 1], radius >= 0 and a non-empty window".into());
        }
        if inj.window_start_min % SLOT_MINUTES != 0 || inj.window_end_min % SLOT_MINUTES != 0 {
            return bad("injection window bounds must be multiples of 15 minutes".into());
        }
        if !(0.0..=1.0).contains(&self.hotspot_activation) {
            return bad("hotspot_activation must lie in [0, 1]".into());
        }
        let mut venue_ids = BTreeSet::new();
        for v in &self.venues {
            if v.row >= self.grid.rows || v.col >= self.grid.cols {
                return bad(format!("venue `{}` lies outside the grid", v.id));
            }
            if !venue_ids.insert(&v.id) {
                return bad(format!("duplicate venue `{}`", v.id));
            }
        }
        for h in &self.hotspots {
            if h.row >= self.grid.rows || h.col >= self.grid.cols || !(h.multiplier > 0.0 && h.multiplier <= 1.0) || h.radius_m < 0.0 {
                return bad(format!("hotspot at ({}, {}) is invalid", h.row, h.col));
            }
        }
        for e in &self.events {
            if !venue_ids.contains(&e.venue_id) {
                return bad(format!("event `{}` references unknown venue `{}`", e.id, e.venue_id));
            }
        }
        if let Some(auto) = &self.auto_events {
            if (auto.count > 0 || auto.future_count > 0) && (self.venues.is_empty() || auto.categories.is_empty() || auto.start_slots.is_empty()) {
                return bad("auto events need venues, categories and start slots".into());
            }
            if auto.start_slots.iter().any(|&s| !(8..=80).contains(&s)) {
                return bad("auto event start slots must lie in 8..=80 so the impact window stays within the day".into());
            }
            if auto.count > (self.days as usize).saturating_sub(2) {
                return bad(format!("{} auto events do not fit into {} days (one per day, first and last day kept free)", auto.count, self.days));
            }
            if auto.future_count > auto.future_days as usize {
                return bad("future_count exceeds future_days".into());
            }
            if !self.events.is_empty() {
                return bad("use either explicit events or auto_events, not both".into());
            }
        }
        Ok(())
    }

    pub fn traffic_range(&self) -> BinRange {
        let first = TimeBin::new(self.start_date, 0).unwrap();
        let last = first.offset(self.days as i64 * SLOTS_PER_DAY as i64 - 1);
        BinRange { first, last }
    }

    fn schedule(&self, rng: &mut ChaCha8Rng) -> Vec<EventSpec> {
        let Some(auto) = &self.auto_events else {
            return self.events.clone();
        };
        let mut days: Vec<u32> = (1..self.days.saturating_sub(1)).collect();
        days.shuffle(rng);
        let mut picks: Vec<(u32, usize)> = days.into_iter().take(auto.count).map(|d| (d, 0)).collect();
        picks.extend((0..auto.future_count as u32).map(|i| (self.days + i * auto.future_days / auto.future_count.max(1) as u32, 0)));
        picks.sort();
        let names: BTreeMap<&VenueId, &str> = self.venues.iter().map(|v| (&v.id, v.name.as_str())).collect();
        // Two injections at one venue landing in the same weekday slots would
        // share IQR groups and mask each other; such slots are avoided while
        // alternatives remain.
        let span = (self.injection.window_end_min - self.injection.window_start_min) / SLOT_MINUTES;
        let mut used: Vec<(usize, u8, u8)> = Vec::new();
        picks
            .into_iter()
            .enumerate()
            .map(|(i, (day, _))| {
                let v = i % self.venues.len();
                let venue = &self.venues[v];
                let date = self.start_date + chrono::Duration::days(day as i64);
                let weekday = weekday_index(date);
                let category = auto.categories[rng.random_range(0..auto.categories.len())].clone();
                let free: Vec<u8> = auto
                    .start_slots
                    .iter()
                    .copied()
                    .filter(|&s| !used.iter().any(|&(uv, uw, us)| uv == v && uw == weekday && (s as i64 - us as i64).abs() < span))
                    .collect();
                let pool = if free.is_empty() { &auto.start_slots } else { &free };
                let slot = pool[rng.random_range(0..pool.len())];
                used.push((v, weekday, slot));
                EventSpec {
                    id: EventId(format!("ev{i:03}")),
                    venue_id: venue.id.clone(),
                    name: format!("{} at {}", category, names[&venue.id]),
                    radius_m: auto.radius_by_category.get(&category).copied(),
                    category,
                    start: TimeBin::new(date, slot).unwrap().start(),
                }
            })
            .collect()
    }
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let graph = grid_graph(&config.grid)?;
    let mut schedule_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut activity_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let venue_at: BTreeMap<&VenueId, GeoPoint> = config
        .venues
        .iter()
        .map(|v| (&v.id, graph.node(&node_id(v.row, v.col)).unwrap()))
        .collect();
    let venues: Vec<Venue> = config
        .venues
        .iter()
        .map(|v| Venue {
            id: v.id.clone(),
            name: v.name.clone(),
            location: venue_at[&v.id],
            capacity: v.capacity,
        })
        .collect();
    let specs = config.schedule(&mut schedule_rng);
    let catalog = EventCatalog::new(
        venues,
        specs.iter().map(|e| Event {
            id: e.id.clone(),
            venue_id: e.venue_id.clone(),
            name: e.name.clone(),
            category: e.category.clone(),
            start: e.start,
            end: None,
        }),
    )?;

    let range = config.traffic_range();
    let mut truth = GroundTruth::default();
    let mut slowdowns: HashMap<UnitId, Vec<Slowdown>> = HashMap::new();
    let inj = &config.injection;
    for e in &specs {
        let start = TimeBin::aligned(e.start)
            .ok_or_else(|| Error::Validation(format!("event `{}` starts off the 15-minute grid", e.id)))?;
        let first = start.index() + inj.window_start_min / SLOT_MINUTES;
        let end = start.index() + inj.window_end_min / SLOT_MINUTES;
        if end <= range.first.index() || first > range.last.index() {
            continue;
        }
        let region = units_within(&graph, venue_at[&e.venue_id], e.radius_m.unwrap_or(inj.radius_m));
        for u in &region {
            slowdowns.entry(u.clone()).or_default().push(Slowdown {
                first,
                end,
                multiplier: inj.multiplier,
            });
        }
        truth.event_units.insert(e.id.clone(), region);
    }

    let groups: BTreeSet<u32> = config.hotspots.iter().map(|h| h.group).collect();
    let mut active: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    for g in groups {
        let series: Vec<bool> = (0..range.len()).map(|_| activity_rng.random_bool(config.hotspot_activation)).collect();
        truth
            .group_activity
            .insert(g, range.iter().zip(&series).filter(|(_, &a)| a).map(|(b, _)| b).collect());
        active.insert(g, series);
    }
    let mut hotspot_of: HashMap<UnitId, Vec<(u32, f64)>> = HashMap::new();
    for h in &config.hotspots {
        let region = units_within(&graph, graph.node(&node_id(h.row, h.col)).unwrap(), h.radius_m);
        for u in &region {
            hotspot_of.entry(u.clone()).or_default().push((h.group, h.multiplier));
        }
        truth.hotspot_units.push(region);
    }

    let ratios: Vec<f64> = range.iter().map(|b| config.baseline.ratio(b)).collect();
    let draw = |rng: &mut ChaCha8Rng, half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let mut series = BTreeMap::new();
    for unit in graph.units() {
        let slow = slowdowns.get(&unit.id);
        let hot = hotspot_of.get(&unit.id);
        let daily: Vec<f64> = (0..config.days).map(|_| draw(&mut noise_rng, config.baseline.noise)).collect();
        let speeds: Vec<f64> = (0..range.len())
            .map(|i| {
                let jitter = (1.0 + daily[i / SLOTS_PER_DAY as usize]) * (1.0 + draw(&mut noise_rng, config.baseline.bin_noise));
                let mut speed = unit.speed_limit_kmh * ratios[i] * jitter;
                let index = range.first.index() + i as i64;
                for s in slow.into_iter().flatten() {
                    if s.first <= index && index < s.end {
                        speed *= s.multiplier;
                    }
                }
                for &(g, m) in hot.into_iter().flatten() {
                    if active[&g][i] {
                        speed *= m;
                    }
                }
                (speed * 100.0).round() / 100.0
            })
            .collect();
        series.insert(unit.id.clone(), speeds);
    }
    Ok(SynthOutput {
        graph,
        traffic: TrafficStore::from_dense(range, series),
        catalog,
        truth,
    })
}

/// Day of the week a date falls on, Monday = 0.
pub fn weekday_index(date: NaiveDate) -> u8 {
    date.weekday().num_days_from_monday() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> SynthConfig {
        SynthConfig {
            seed: 7,
            grid: GridSpec {
                rows: 8,
                cols: 8,
                spacing_m: 250.0,
                origin_lon: 9.70,
                origin_lat: 52.35,
                speed_limit_kmh: 50.0,
                arterial_every: 4,
                arterial_limit_kmh: 70.0,
            },
            start_date: NaiveDate::from_ymd_opt(2017, 10, 2).unwrap(),
            days: 14,
            baseline: BaselineProfile::default(),
            venues: vec![VenueSpec {
                id: "v1".into(),
                name: "Arena".into(),
                row: 4,
                col: 4,
                capacity: Some(20_000),
            }],
            events: Vec::new(),
            auto_events: Some(AutoEvents {
                count: 3,
                future_count: 1,
                future_days: 3,
                categories: vec!["concert".into(), "football".into()],
                start_slots: vec![72, 76, 80],
                radius_by_category: BTreeMap::new(),
            }),
            injection: InjectionSpec::default(),
            hotspots: Vec::new(),
            hotspot_activation: 0.0,
        }
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate_synthetic(&small_config()).unwrap();
        let b = generate_synthetic(&small_config()).unwrap();
        assert_eq!(a, b);
        let mut other = small_config();
        other.seed = 8;
        assert_ne!(generate_synthetic(&other).unwrap().traffic, a.traffic);
    }

    #[test]
    fn no_events_means_baseline_plus_noise() {
        let mut cfg = small_config();
        cfg.auto_events = None;
        let out = generate_synthetic(&cfg).unwrap();
        assert!(out.catalog.events().is_empty());
        let (lo, hi) = (
            (1.0 - cfg.baseline.noise) * (1.0 - cfg.baseline.bin_noise),
            (1.0 + cfg.baseline.noise) * (1.0 + cfg.baseline.bin_noise),
        );
        for r in out.traffic.records() {
            let limit = out.graph.unit(&r.unit).unwrap().speed_limit_kmh;
            let expect = limit * cfg.baseline.ratio(r.bin);
            assert!(r.speed_kmh >= expect * lo - 0.006 && r.speed_kmh <= expect * hi + 0.006);
        }
    }

    #[test]
    fn injected_units_slow_down_in_window() {
        let cfg = small_config();
        let out = generate_synthetic(&cfg).unwrap();
        let event = &out.catalog.events()[0];
        let units = &out.truth.event_units[&event.id];
        assert!(!units.is_empty());
        let start = event.start_bin();
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for u in units {
            for (bin, speed) in out.traffic.observations(u) {
                let off = bin.index() - start.index();
                if (0..4).contains(&off) {
                    inside.push(speed);
                } else {
                    outside.push(speed);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&inside) < mean(&outside));
        // The future event gets no injection and no ground truth.
        assert_eq!(out.truth.event_units.len(), 3);
        assert_eq!(out.catalog.events().len(), 4);
    }

    #[test]
    fn rejects_inconsistent_config() {
        let mut cfg = small_config();
        cfg.venues[0].row = 99;
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = small_config();
        cfg.auto_events.as_mut().unwrap().count = 40;
        assert!(generate_synthetic(&cfg).is_err());
        let mut cfg = small_config();
        cfg.injection.multiplier = 0.0;
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn grid_shape() {
        let g = grid_graph(&small_config().grid).unwrap();
        assert_eq!(g.node_count(), 64);
        assert_eq!(g.unit_count(), 2 * 2 * 8 * 7);
        let arterial = g.unit(&UnitId::from("n000_000-n000_001")).unwrap();
        assert_eq!(arterial.speed_limit_kmh, 70.0);
        assert!((arterial.length_m - 250.0).abs() < 0.01);
    }
}
