use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::ids::{EventId, VenueId};
use crate::time::{iso, TimeBin};
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Venue {
    pub id: VenueId,
    pub name: String,
    pub location: GeoPoint,
    pub capacity: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: EventId,
    pub venue_id: VenueId,
    pub name: String,
    pub category: String,
    #[serde(with = "iso")]
    pub start: NaiveDateTime,
    #[serde(default, with = "iso::option", skip_serializing_if = "Option::is_none")]
    pub end: Option<NaiveDateTime>,
}

impl Event {
    /// The grid bin the event starts in. Catalog validation guarantees the
    /// start lies exactly on the grid.
    pub fn start_bin(&self) -> TimeBin {
        TimeBin::containing(self.start)
    }
}

/// Validated venues and events; events sorted by (start, id).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventCatalog {
    venues: BTreeMap<VenueId, Venue>,
    events: Vec<Event>,
}

#[derive(Serialize, Deserialize)]
struct VenueRecord {
    id: VenueId,
    name: String,
    lon: f64,
    lat: f64,
    #[serde(default)]
    capacity: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct CatalogFile {
    venues: Vec<VenueRecord>,
    events: Vec<Event>,
}

impl EventCatalog {
    pub fn new(venues: impl IntoIterator<Item = Venue>, events: impl IntoIterator<Item = Event>) -> Result<Self> {
        let mut venue_map = BTreeMap::new();
        for v in venues {
            GeoPoint::new(v.location.lon, v.location.lat)
                .map_err(|e| Error::Validation(format!("venue `{}`: {e}", v.id)))?;
            if venue_map.contains_key(&v.id) {
                return Err(Error::Validation(format!("duplicate venue id `{}`", v.id)));
            }
            venue_map.insert(v.id.clone(), v);
        }
        let mut seen = BTreeSet::new();
        let mut events: Vec<Event> = events.into_iter().collect();
        for e in &events {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Validation(format!("duplicate event id `{}`", e.id)));
            }
            if !venue_map.contains_key(&e.venue_id) {
                return Err(Error::Validation(format!("event `{}` references unknown venue `{}`", e.id, e.venue_id)));
            }
            if TimeBin::aligned(e.start).is_none() {
                return Err(Error::Validation(format!("event `{}` starts off the 15-minute grid", e.id)));
            }
            if let Some(end) = e.end {
                if end <= e.start {
                    return Err(Error::Validation(format!("event `{}` ends before it starts", e.id)));
                }
            }
        }
        events.sort_by(|a, b| (a.start, &a.id).cmp(&(b.start, &b.id)));
        Ok(Self {
            venues: venue_map,
            events,
        })
    }

    pub fn venues(&self) -> impl Iterator<Item = &Venue> {
        self.venues.values()
    }

    pub fn venue(&self, id: &VenueId) -> Option<&Venue> {
        self.venues.get(id)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn event(&self, id: &EventId) -> Option<&Event> {
        self.events.iter().find(|e| &e.id == id)
    }

    pub fn events_at<'a>(&'a self, venue: &'a VenueId) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| &e.venue_id == venue)
    }

    pub fn venue_of(&self, event: &Event) -> Result<&Venue> {
        self.venue(&event.venue_id)
            .ok_or_else(|| Error::UnknownVenue(event.venue_id.to_string()))
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, CatalogLoadError> {
        let file: CatalogFile = serde_json::from_str(text).map_err(CatalogLoadError::Json)?;
        let venues = file
            .venues
            .into_iter()
            .map(|v| {
                Ok(Venue {
                    location: GeoPoint::new(v.lon, v.lat).map_err(|e| Error::Validation(format!("venue `{}`: {e}", v.id)))?,
                    id: v.id,
                    name: v.name,
                    capacity: v.capacity,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(CatalogLoadError::Invalid)?;
        Self::new(venues, file.events).map_err(CatalogLoadError::Invalid)
    }

    pub fn to_json_string(&self) -> String {
        let file = CatalogFile {
            venues: self
                .venues
                .values()
                .map(|v| VenueRecord {
                    id: v.id.clone(),
                    name: v.name.clone(),
                    lon: v.location.lon,
                    lat: v.location.lat,
                    capacity: v.capacity,
                })
                .collect(),
            events: self.events.clone(),
        };
        serde_json::to_string_pretty(&file).expect("catalog serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogLoadError {
    #[error("{0}")]
    Json(serde_json::Error),
    #[error("{0}")]
    Invalid(Error),
}

pub fn load_events(path: impl AsRef<Path>) -> Result<EventCatalog> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EventCatalog::from_json_str(&text).map_err(|e| match e {
        CatalogLoadError::Json(source) => Error::json(path, source),
        CatalogLoadError::Invalid(err) => err,
    })
}
