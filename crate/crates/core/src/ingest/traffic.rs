use crate::error::{Error, Result};
use crate::graph::TransportationGraph;
use crate::ids::UnitId;
use crate::time::{parse_timestamp, BinRange, TimeBin};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

pub const TRAFFIC_HEADER: [&str; 3] = ["unit_id", "timestamp", "speed_kmh"];

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedRecord {
    pub unit: UnitId,
    pub bin: TimeBin,
    pub speed_kmh: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    /// Fail on the first malformed row.
    #[default]
    Strict,
    /// Skip malformed rows and count them.
    Lenient,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: u64,
    pub kept: u64,
    pub dropped: u64,
    pub malformed: u64,
    /// Rows folded into an existing (unit, bin) record.
    pub deduplicated: u64,
    pub records: u64,
    pub units: u64,
}

/// Speeds per unit on a contiguous bin range. Absent observations are NaN
/// internally and never surface through the public accessors.
#[derive(Clone, Debug, Default)]
pub struct TrafficStore {
    range: Option<BinRange>,
    series: BTreeMap<UnitId, Vec<f64>>,
}

impl PartialEq for TrafficStore {
    fn eq(&self, other: &Self) -> bool {
        self.range == other.range
            && self.series.len() == other.series.len()
            && self.series.iter().zip(&other.series).all(|((ua, a), (ub, b))| {
                ua == ub && a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl TrafficStore {
    pub fn builder() -> TrafficStoreBuilder {
        TrafficStoreBuilder::default()
    }

    /// Dense constructor; each series must span `range` with NaN for gaps.
    pub(crate) fn from_dense(range: BinRange, series: BTreeMap<UnitId, Vec<f64>>) -> Self {
        debug_assert!(series.values().all(|s| s.len() == range.len()));
        Self {
            range: Some(range),
            series,
        }
    }

    pub fn range(&self) -> Option<BinRange> {
        self.range
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn units(&self) -> impl Iterator<Item = &UnitId> {
        self.series.keys()
    }

    pub fn unit_count(&self) -> usize {
        self.series.len()
    }

    pub fn get(&self, unit: &UnitId, bin: TimeBin) -> Option<f64> {
        let pos = self.range?.position(bin)?;
        let v = *self.series.get(unit)?.get(pos)?;
        (!v.is_nan()).then_some(v)
    }

    /// Observed (bin, speed) pairs of one unit in time order.
    pub fn observations<'a>(&'a self, unit: &UnitId) -> impl Iterator<Item = (TimeBin, f64)> + 'a {
        let first = self.range.map(|r| r.first.index()).unwrap_or(0);
        self.series
            .get(unit)
            .into_iter()
            .flat_map(|s| s.iter().enumerate())
            .filter(|(_, v)| !v.is_nan())
            .map(move |(i, &v)| (TimeBin::from_index(first + i as i64), v))
    }

    pub fn record_count(&self) -> usize {
        self.series.values().map(|s| s.iter().filter(|v| !v.is_nan()).count()).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = SpeedRecord> + '_ {
        self.series.keys().flat_map(move |u| {
            self.observations(u).map(move |(bin, speed_kmh)| SpeedRecord {
                unit: u.clone(),
                bin,
                speed_kmh,
            })
        })
    }

    /// Writes the store back out in the ingest CSV format, ordered by unit
    /// then time.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(out, "{}", TRAFFIC_HEADER.join(",")).map_err(io)?;
        for r in self.records() {
            writeln!(out, "{},{}:00Z,{}", r.unit, r.bin, r.speed_kmh).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

#[derive(Default)]
struct Accumulator {
    first: i64,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl Accumulator {
    /// Returns true when the slot already held an observation.
    fn add(&mut self, index: i64, speed: f64) -> bool {
        if self.sums.is_empty() {
            self.first = index;
        }
        if index < self.first {
            let grow = (self.first - index) as usize;
            self.sums.splice(0..0, std::iter::repeat_n(0.0, grow));
            self.counts.splice(0..0, std::iter::repeat_n(0, grow));
            self.first = index;
        }
        let pos = (index - self.first) as usize;
        if pos >= self.sums.len() {
            self.sums.resize(pos + 1, 0.0);
            self.counts.resize(pos + 1, 0);
        }
        self.sums[pos] += speed;
        self.counts[pos] += 1;
        self.counts[pos] > 1
    }
}

/// Collects records; duplicates of the same (unit, bin) are averaged.
#[derive(Default)]
pub struct TrafficStoreBuilder {
    units: HashMap<UnitId, Accumulator>,
}

impl TrafficStoreBuilder {
    /// Returns true if this record duplicated an existing (unit, bin).
    pub fn add(&mut self, unit: &UnitId, bin: TimeBin, speed_kmh: f64) -> bool {
        match self.units.get_mut(unit) {
            Some(acc) => acc.add(bin.index(), speed_kmh),
            None => self.units.entry(unit.clone()).or_default().add(bin.index(), speed_kmh),
        }
    }

    pub fn build(self) -> TrafficStore {
        let bounds = self
            .units
            .values()
            .filter(|a| !a.sums.is_empty())
            .map(|a| (a.first, a.first + a.sums.len() as i64 - 1))
            .reduce(|x, y| (x.0.min(y.0), x.1.max(y.1)));
        let Some((lo, hi)) = bounds else {
            return TrafficStore::default();
        };
        let range = BinRange {
            first: TimeBin::from_index(lo),
            last: TimeBin::from_index(hi),
        };
        let len = range.len();
        let series = self
            .units
            .into_iter()
            .map(|(unit, acc)| {
                let mut dense = vec![f64::NAN; len];
                let offset = (acc.first - lo) as usize;
                for (i, (&sum, &count)) in acc.sums.iter().zip(&acc.counts).enumerate() {
                    if count > 0 {
                        dense[offset + i] = sum / count as f64;
                    }
                }
                (unit, dense)
            })
            .collect();
        TrafficStore::from_dense(range, series)
    }
}

pub fn load_traffic(path: impl AsRef<Path>, graph: &TransportationGraph, mode: ParseMode) -> Result<(TrafficStore, IngestReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_traffic(std::io::BufReader::new(file), path, graph, mode)
}

/// Parses traffic CSV from any reader; `source` only labels errors.
pub fn parse_traffic<R: Read>(reader: R, source: &Path, graph: &TransportationGraph, mode: ParseMode) -> Result<(TrafficStore, IngestReport)> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != TRAFFIC_HEADER {
        return Err(parse_err(1, format!("expected header `{}`", TRAFFIC_HEADER.join(","))));
    }
    let mut report = IngestReport::default();
    let mut builder = TrafficStore::builder();
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                report.rows_read += 1;
                match mode {
                    ParseMode::Strict => return Err(parse_err(line, e.to_string())),
                    ParseMode::Lenient => {
                        report.malformed += 1;
                        continue;
                    }
                }
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(line);
        report.rows_read += 1;
        let parsed = parse_row(&record);
        let (unit, bin, speed) = match (parsed, mode) {
            (Ok(row), _) => row,
            (Err(msg), ParseMode::Strict) => return Err(parse_err(line, msg)),
            (Err(_), ParseMode::Lenient) => {
                report.malformed += 1;
                continue;
            }
        };
        if !graph.contains_unit(&unit) {
            report.dropped += 1;
            continue;
        }
        report.kept += 1;
        if builder.add(&unit, bin, speed) {
            report.deduplicated += 1;
        }
    }
    let store = builder.build();
    report.records = store.record_count() as u64;
    report.units = store.unit_count() as u64;
    Ok((store, report))
}

fn parse_row(record: &csv::StringRecord) -> std::result::Result<(UnitId, TimeBin, f64), String> {
    if record.len() != 3 {
        return Err(format!("expected 3 fields, found {}", record.len()));
    }
    let unit = UnitId::new(&record[0]);
    if unit.as_str().is_empty() {
        return Err("empty unit_id".into());
    }
    let ts = parse_timestamp(&record[1]).map_err(|e| e.to_string())?;
    let speed: f64 = record[2].parse().map_err(|_| format!("invalid speed `{}`", &record[2]))?;
    if !speed.is_finite() || speed < 0.0 {
        return Err(format!("speed must be finite and >= 0, got {speed}"));
    }
    Ok((unit, TimeBin::containing(ts), speed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::grid;

    fn parse(text: &str, mode: ParseMode) -> Result<(TrafficStore, IngestReport)> {
        let g = grid(2, 2, 100.0);
        parse_traffic(text.as_bytes(), Path::new("mem.csv"), &g, mode)
    }

    const U: &str = "n00_00-n00_01";

    #[test]
    fn snaps_to_slot() {
        let (store, report) = parse(&format!("unit_id,timestamp,speed_kmh\n{U},2017-10-02T08:07:30Z,25.0\n"), ParseMode::Strict).unwrap();
        let bin: TimeBin = "2017-10-02T08:00".parse().unwrap();
        assert_eq!(bin.slot(), 32);
        assert_eq!(store.get(&U.into(), bin), Some(25.0));
        assert_eq!(report.kept, 1);
        assert_eq!(store.record_count(), 1);
    }

    #[test]
    fn duplicates_are_averaged() {
        let text = format!("unit_id,timestamp,speed_kmh\n{U},2017-10-02T08:01:00Z,20\n{U},2017-10-02T08:14:59Z,40\n");
        let (store, report) = parse(&text, ParseMode::Strict).unwrap();
        assert_eq!(store.get(&U.into(), "2017-10-02T08:00".parse().unwrap()), Some(30.0));
        assert_eq!(report.deduplicated, 1);
        assert_eq!(report.records, 1);
    }

    #[test]
    fn unknown_units_are_dropped() {
        let text = format!("unit_id,timestamp,speed_kmh\nzz,2017-10-02T08:00:00Z,20\n{U},2017-10-02T08:00:00Z,20\n");
        let (_, report) = parse(&text, ParseMode::Strict).unwrap();
        assert_eq!(report.dropped, 1);
        assert_eq!(report.kept, 1);
        assert_eq!(report.rows_read, 2);
    }

    #[test]
    fn malformed_rows_strict_and_lenient() {
        let text = format!("unit_id,timestamp,speed_kmh\n{U},2017-10-02T08:00:00Z,20\n{U},yesterday,20\n{U},2017-10-02T09:00:00Z,-3\n");
        match parse(&text, ParseMode::Strict) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let (store, report) = parse(&text, ParseMode::Lenient).unwrap();
        assert_eq!(report.malformed, 2);
        assert_eq!(store.record_count(), 1);
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(parse("unit,time,speed\n", ParseMode::Lenient).is_err());
    }

    #[test]
    fn gaps_stay_absent() {
        let text = format!("unit_id,timestamp,speed_kmh\n{U},2017-10-02T08:00:00Z,20\n{U},2017-10-02T09:00:00Z,30\n");
        let (store, _) = parse(&text, ParseMode::Strict).unwrap();
        assert_eq!(store.range().unwrap().len(), 5);
        assert_eq!(store.get(&U.into(), "2017-10-02T08:15".parse().unwrap()), None);
        assert_eq!(store.observations(&U.into()).count(), 2);
    }
}
