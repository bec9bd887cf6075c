//! The canonical 15-minute time grid.

use crate::error::{Error, Result};
use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, NaiveTime, Timelike, Weekday};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

pub const SLOT_MINUTES: i64 = 15;
pub const SLOTS_PER_DAY: u8 = 96;
/// Number of (weekday, slot) combinations.
pub const WEEK_SLOTS: usize = 7 * SLOTS_PER_DAY as usize;

/// A 15-minute slot on a calendar day. Ordering follows wall-clock time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeBin {
    day: NaiveDate,
    slot: u8,
}

impl TimeBin {
    pub fn new(day: NaiveDate, slot: u8) -> Result<Self> {
        if slot >= SLOTS_PER_DAY {
            return Err(Error::Validation(format!("slot {slot} outside 0..96")));
        }
        Ok(Self { day, slot })
    }

    /// The bin containing `t` (snapped down).
    pub fn containing(t: NaiveDateTime) -> Self {
        let minutes = t.time().hour() * 60 + t.time().minute();
        Self {
            day: t.date(),
            slot: (minutes / SLOT_MINUTES as u32) as u8,
        }
    }

    /// The bin starting exactly at `t`, if `t` lies on the grid.
    pub fn aligned(t: NaiveDateTime) -> Option<Self> {
        let bin = Self::containing(t);
        (bin.start() == t).then_some(bin)
    }

    pub fn day(&self) -> NaiveDate {
        self.day
    }

    pub fn slot(&self) -> u8 {
        self.slot
    }

    pub fn weekday(&self) -> Weekday {
        self.day.weekday()
    }

    /// Position of this bin's (weekday, slot) pair in `0..WEEK_SLOTS`, Monday first.
    pub fn week_slot(&self) -> usize {
        self.weekday().num_days_from_monday() as usize * SLOTS_PER_DAY as usize + self.slot as usize
    }

    pub fn start(&self) -> NaiveDateTime {
        let minutes = self.slot as u32 * SLOT_MINUTES as u32;
        self.day.and_time(NaiveTime::from_hms_opt(minutes / 60, minutes % 60, 0).unwrap())
    }

    /// Absolute bin number; consecutive bins differ by one.
    pub fn index(&self) -> i64 {
        self.day.num_days_from_ce() as i64 * SLOTS_PER_DAY as i64 + self.slot as i64
    }

    pub fn from_index(index: i64) -> Self {
        let per_day = SLOTS_PER_DAY as i64;
        let day = NaiveDate::from_num_days_from_ce_opt(index.div_euclid(per_day) as i32).expect("bin index in calendar range");
        Self {
            day,
            slot: index.rem_euclid(per_day) as u8,
        }
    }

    pub fn offset(&self, bins: i64) -> Self {
        Self::from_index(self.index() + bins)
    }

    /// Whole minutes from `origin` to this bin's start.
    pub fn minutes_since(&self, origin: TimeBin) -> i64 {
        (self.index() - origin.index()) * SLOT_MINUTES
    }
}

impl fmt::Display for TimeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.start().format("%Y-%m-%dT%H:%M"))
    }
}

impl FromStr for TimeBin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = parse_timestamp(s)?;
        TimeBin::aligned(t).ok_or_else(|| Error::Validation(format!("`{s}` is not on the 15-minute grid")))
    }
}

impl Serialize for TimeBin {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeBin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Inclusive, contiguous run of bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinRange {
    pub first: TimeBin,
    pub last: TimeBin,
}

impl BinRange {
    pub fn new(first: TimeBin, last: TimeBin) -> Result<Self> {
        if last < first {
            return Err(Error::Validation(format!("empty bin range {first}..={last}")));
        }
        Ok(Self { first, last })
    }

    pub fn len(&self) -> usize {
        (self.last.index() - self.first.index() + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, bin: TimeBin) -> bool {
        self.first <= bin && bin <= self.last
    }

    pub fn iter(&self) -> impl Iterator<Item = TimeBin> {
        (self.first.index()..=self.last.index()).map(TimeBin::from_index)
    }

    /// Position of `bin` within the range.
    pub fn position(&self, bin: TimeBin) -> Option<usize> {
        self.contains(bin).then(|| (bin.index() - self.first.index()) as usize)
    }

    pub fn intersect(&self, other: &BinRange) -> Option<BinRange> {
        BinRange::new(self.first.max(other.first), self.last.min(other.last)).ok()
    }
}

/// Parses an ISO-8601 timestamp and keeps its wall-clock fields as given. A
/// trailing `Z` or numeric offset is accepted but never applied.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.naive_local());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    Err(Error::Validation(format!("unparseable timestamp `{s}`")))
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// Serde adapter for timestamps in the crate's ISO-8601 format.
pub mod iso {
    use super::*;

    pub fn serialize<S: Serializer>(t: &NaiveDateTime, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(&format_timestamp(*t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<NaiveDateTime, D::Error> {
        let s = String::deserialize(d)?;
        parse_timestamp(&s).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(t: &Option<NaiveDateTime>, s: S) -> std::result::Result<S::Ok, S::Error> {
            match t {
                Some(t) => s.collect_str(&format_timestamp(*t)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<NaiveDateTime>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|s| parse_timestamp(&s).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn snaps_down_to_slot() {
        let t = parse_timestamp("2017-10-02T08:07:30Z").unwrap();
        let bin = TimeBin::containing(t);
        assert_eq!(bin.slot(), 32);
        assert_eq!(bin.day(), NaiveDate::from_ymd_opt(2017, 10, 2).unwrap());
        assert_eq!(bin.weekday(), Weekday::Mon);
        assert_eq!(bin.to_string(), "2017-10-02T08:00");
        assert!(TimeBin::aligned(t).is_none());
    }

    #[test]
    fn offsets_are_wall_clock() {
        let t = parse_timestamp("2017-10-02T08:07:30+05:00").unwrap();
        assert_eq!(t.time().hour(), 8);
        assert!(parse_timestamp("02/10/2017").is_err());
        assert!(TimeBin::new(NaiveDate::from_ymd_opt(2017, 1, 1).unwrap(), 96).is_err());
    }

    #[test]
    fn range_basics() {
        let a: TimeBin = "2017-10-02T23:30".parse().unwrap();
        let r = BinRange::new(a, a.offset(4)).unwrap();
        assert_eq!(r.len(), 5);
        assert_eq!(r.iter().nth(2).unwrap().to_string(), "2017-10-03T00:00");
        assert_eq!(r.position(a.offset(3)), Some(3));
        assert!(BinRange::new(a.offset(1), a).is_err());
    }

    proptest! {
        #[test]
        fn snapping_brackets_timestamp(secs in 0i64..(400 * 86_400)) {
            let base = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
            let t = base + chrono::Duration::seconds(secs);
            let bin = TimeBin::containing(t);
            prop_assert!(bin.start() <= t);
            prop_assert!(t < bin.start() + chrono::Duration::minutes(SLOT_MINUTES));
            prop_assert_eq!(TimeBin::from_index(bin.index()), bin);
            prop_assert_eq!(bin.to_string().parse::<TimeBin>().unwrap(), bin);
        }

        #[test]
        fn index_order_matches_bin_order(a in 0i64..100_000, b in 0i64..100_000) {
            let base = 737_000 * 96;
            let (x, y) = (TimeBin::from_index(base + a), TimeBin::from_index(base + b));
            prop_assert_eq!(x.cmp(&y), a.cmp(&b));
            prop_assert_eq!(x.start().cmp(&y.start()), a.cmp(&b));
        }
    }
}
