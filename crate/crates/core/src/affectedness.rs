//! Unit load and the per-(unit, weekday, slot) interquartile-range rule that
//! flags affected units.
//!
//! Loads are pooled over the whole training window for each combination of
//! weekday and 15-minute slot. A load is an outlier when it lies strictly above
//! `q3 + 1.5 * (q3 - q1)` of its group. Quartiles use linear interpolation
//! between order statistics (`h = (n - 1) p`), the convention most statistics
//! packages use by default.

use crate::error::{Error, Result};
use crate::graph::TransportationGraph;
use crate::ids::UnitId;
use crate::ingest::TrafficStore;
use crate::time::{BinRange, TimeBin, SLOTS_PER_DAY, WEEK_SLOTS};
use chrono::Weekday;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const DEFAULT_MIN_SAMPLES: usize = 4;
pub const FENCE_MULTIPLIER: f64 = 1.5;

/// Relative speed reduction against the limit, clamped into `[0, 1]`.
pub fn unit_load(speed_kmh: f64, limit_kmh: f64) -> Result<f64> {
    if !(limit_kmh > 0.0) {
        return Err(Error::Domain(format!("speed limit must be > 0, got {limit_kmh}")));
    }
    if !(speed_kmh >= 0.0) {
        return Err(Error::Domain(format!("speed must be >= 0, got {speed_kmh}")));
    }
    Ok(((limit_kmh - speed_kmh) / limit_kmh).clamp(0.0, 1.0))
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Unit loads on a contiguous bin range; gaps stay absent.
#[derive(Clone, Debug, Default)]
pub struct LoadSeries {
    range: Option<BinRange>,
    loads: BTreeMap<UnitId, Vec<f64>>,
}

impl LoadSeries {
    pub fn from_traffic(store: &TrafficStore, graph: &TransportationGraph) -> Result<Self> {
        let Some(range) = store.range() else {
            return Ok(Self::default());
        };
        let mut loads = BTreeMap::new();
        for unit in store.units() {
            let limit = graph
                .unit(unit)
                .ok_or_else(|| Error::UnknownUnit(unit.to_string()))?
                .speed_limit_kmh;
            let mut series = vec![f64::NAN; range.len()];
            for (bin, speed) in store.observations(unit) {
                series[range.position(bin).unwrap()] = unit_load(speed, limit)?;
            }
            loads.insert(unit.clone(), series);
        }
        Ok(Self {
            range: Some(range),
            loads,
        })
    }

    /// Builds a series from explicit loads; duplicate (unit, bin) pairs keep
    /// the last value.
    pub fn from_records(records: impl IntoIterator<Item = (UnitId, TimeBin, f64)>) -> Result<Self> {
        let records: Vec<_> = records.into_iter().collect();
        if let Some((u, b, l)) = records.iter().find(|(_, _, l)| !(0.0..=1.0).contains(l)) {
            return Err(Error::Domain(format!("load {l} for `{u}` at {b} outside [0, 1]")));
        }
        let Some(first) = records.iter().map(|r| r.1).min() else {
            return Ok(Self::default());
        };
        let last = records.iter().map(|r| r.1).max().unwrap();
        let range = BinRange { first, last };
        let mut loads: BTreeMap<UnitId, Vec<f64>> = BTreeMap::new();
        for (unit, bin, load) in records {
            loads.entry(unit).or_insert_with(|| vec![f64::NAN; range.len()])[range.position(bin).unwrap()] = load;
        }
        Ok(Self {
            range: Some(range),
            loads,
        })
    }

    pub fn range(&self) -> Option<BinRange> {
        self.range
    }

    pub fn units(&self) -> impl Iterator<Item = &UnitId> {
        self.loads.keys()
    }

    pub fn get(&self, unit: &UnitId, bin: TimeBin) -> Option<f64> {
        let v = *self.loads.get(unit)?.get(self.range?.position(bin)?)?;
        (!v.is_nan()).then_some(v)
    }

    pub fn observations<'a>(&'a self, unit: &UnitId) -> impl Iterator<Item = (TimeBin, f64)> + 'a {
        let first = self.range.map(|r| r.first.index()).unwrap_or(0);
        self.loads
            .get(unit)
            .into_iter()
            .flat_map(|s| s.iter().enumerate())
            .filter(|(_, v)| !v.is_nan())
            .map(move |(i, &v)| (TimeBin::from_index(first + i as i64), v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub threshold: f64,
    pub sample_count: usize,
    pub usable: bool,
}

impl ProfileEntry {
    fn from_samples(samples: &mut [f64], min_samples: usize) -> Self {
        samples.sort_by(f64::total_cmp);
        let q1 = quantile(samples, 0.25);
        let q3 = quantile(samples, 0.75);
        let iqr = q3 - q1;
        Self {
            q1,
            q3,
            iqr,
            threshold: q3 + FENCE_MULTIPLIER * iqr,
            sample_count: samples.len(),
            usable: samples.len() >= min_samples,
        }
    }

    pub fn flags(&self, load: f64) -> bool {
        self.usable && load > self.threshold
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffectednessProfile {
    min_samples: usize,
    groups: BTreeMap<UnitId, Vec<Option<ProfileEntry>>>,
}

#[derive(Serialize)]
struct ProfileRow<'a> {
    unit: &'a UnitId,
    weekday: String,
    slot: usize,
    #[serde(flatten)]
    entry: &'a ProfileEntry,
}

impl AffectednessProfile {
    pub fn min_samples(&self) -> usize {
        self.min_samples
    }

    pub fn entry(&self, unit: &UnitId, bin: TimeBin) -> Option<&ProfileEntry> {
        self.groups.get(unit)?.get(bin.week_slot())?.as_ref()
    }

    pub fn units(&self) -> impl Iterator<Item = &UnitId> {
        self.groups.keys()
    }

    pub fn unit_count(&self) -> usize {
        self.groups.len()
    }

    /// All populated groups as (unit, weekday, slot, entry).
    pub fn entries(&self) -> impl Iterator<Item = (&UnitId, Weekday, u8, &ProfileEntry)> {
        self.groups.iter().flat_map(|(u, g)| {
            g.iter().enumerate().filter_map(move |(i, e)| {
                let e = e.as_ref()?;
                let weekday = Weekday::try_from((i / SLOTS_PER_DAY as usize) as u8).unwrap();
                Some((u, weekday, (i % SLOTS_PER_DAY as usize) as u8, e))
            })
        })
    }

    pub fn to_json_string(&self) -> String {
        let rows: Vec<ProfileRow> = self
            .entries()
            .map(|(unit, wd, slot, entry)| ProfileRow {
                unit,
                weekday: wd.to_string(),
                slot: slot as usize,
                entry,
            })
            .collect();
        serde_json::to_string(&serde_json::json!({ "min_samples": self.min_samples, "groups": rows })).unwrap()
    }
}

pub fn build_profile(loads: &LoadSeries, min_samples: usize) -> Result<AffectednessProfile> {
    build_profile_within(loads, min_samples, None)
}

/// Like [`build_profile`] but pools only observations inside `window`.
pub fn build_profile_within(loads: &LoadSeries, min_samples: usize, window: Option<BinRange>) -> Result<AffectednessProfile> {
    if min_samples < 1 {
        return Err(Error::Domain("min_samples must be >= 1".into()));
    }
    let mut groups = BTreeMap::new();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); WEEK_SLOTS];
    for unit in loads.units() {
        for b in &mut buckets {
            b.clear();
        }
        for (bin, load) in loads.observations(unit) {
            if window.is_none_or(|w| w.contains(bin)) {
                buckets[bin.week_slot()].push(load);
            }
        }
        let entries = buckets
            .iter_mut()
            .map(|b| (!b.is_empty()).then(|| ProfileEntry::from_samples(b, min_samples)))
            .collect();
        groups.insert(unit.clone(), entries);
    }
    Ok(AffectednessProfile { min_samples, groups })
}

/// Bins at which each unit is affected, with a by-bin index for clustering.
#[derive(Clone, Debug, Default)]
pub struct AffectednessMask {
    domain: Option<BinRange>,
    flagged: BTreeMap<UnitId, BTreeSet<TimeBin>>,
    by_bin: BTreeMap<TimeBin, BTreeSet<UnitId>>,
}

impl PartialEq for AffectednessMask {
    fn eq(&self, other: &Self) -> bool {
        self.domain == other.domain && self.flagged == other.flagged
    }
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    domain: Option<BinRange>,
    units: BTreeMap<UnitId, BTreeSet<TimeBin>>,
}

impl Serialize for AffectednessMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskFile {
            domain: self.domain,
            units: self.flagged.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffectednessMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = MaskFile::deserialize(d)?;
        Ok(Self::new(f.domain, f.units))
    }
}

impl AffectednessMask {
    /// Units with empty bin sets are dropped.
    pub fn new(domain: Option<BinRange>, flagged: BTreeMap<UnitId, BTreeSet<TimeBin>>) -> Self {
        let flagged: BTreeMap<_, _> = flagged.into_iter().filter(|(_, b)| !b.is_empty()).collect();
        let mut by_bin: BTreeMap<TimeBin, BTreeSet<UnitId>> = BTreeMap::new();
        for (u, bins) in &flagged {
            for b in bins {
                by_bin.entry(*b).or_default().insert(u.clone());
            }
        }
        Self { domain, flagged, by_bin }
    }

    /// The bins the mask was computed over.
    pub fn domain(&self) -> Option<BinRange> {
        self.domain
    }

    pub fn is_affected(&self, unit: &UnitId, bin: TimeBin) -> bool {
        self.flagged.get(unit).is_some_and(|b| b.contains(&bin))
    }

    pub fn bins(&self, unit: &UnitId) -> Option<&BTreeSet<TimeBin>> {
        self.flagged.get(unit)
    }

    pub fn units(&self) -> impl Iterator<Item = (&UnitId, &BTreeSet<TimeBin>)> {
        self.flagged.iter()
    }

    pub fn units_at(&self, bin: TimeBin) -> Option<&BTreeSet<UnitId>> {
        self.by_bin.get(&bin)
    }

    /// Bins with at least one affected unit, ascending.
    pub fn active_bins(&self) -> impl Iterator<Item = (&TimeBin, &BTreeSet<UnitId>)> {
        self.by_bin.iter()
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.values().map(BTreeSet::len).sum()
    }
}

pub fn classify(loads: &LoadSeries, profile: &AffectednessProfile) -> AffectednessMask {
    let mut flagged = BTreeMap::new();
    for unit in loads.units() {
        let bins: BTreeSet<TimeBin> = loads
            .observations(unit)
            .filter(|&(bin, load)| profile.entry(unit, bin).is_some_and(|e| e.flags(load)))
            .map(|(bin, _)| bin)
            .collect();
        flagged.insert(unit.clone(), bins);
    }
    AffectednessMask::new(loads.range(), flagged)
}
