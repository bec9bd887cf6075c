//! Spherical geometry on WGS84 longitude/latitude pairs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Mean earth radius used for every distance in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::Validation(format!(
                "coordinate ({lon}, {lat}) outside WGS84 bounds"
            )));
        }
        Ok(Self { lon, lat })
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.lon, self.lat]
    }

    /// Moves `meters` east and north on a local tangent plane. Only meant for
    /// building small synthetic layouts.
    pub fn offset_m(&self, east: f64, north: f64) -> GeoPoint {
        let dlat = (north / EARTH_RADIUS_M).to_degrees();
        let dlon = (east / (EARTH_RADIUS_M * self.lat.to_radians().cos())).to_degrees();
        GeoPoint {
            lon: self.lon + dlon,
            lat: self.lat + dlat,
        }
    }
}

/// Great-circle distance in meters (haversine form).
pub fn geo_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

pub fn polyline_length(points: &[GeoPoint]) -> f64 {
    points.windows(2).map(|w| geo_distance(w[0], w[1])).sum()
}

/// Point at `distance` meters along the polyline, clamped to its ends.
/// Within a leg the position is interpolated linearly in coordinates.
pub fn point_along(points: &[GeoPoint], distance: f64) -> GeoPoint {
    assert!(!points.is_empty(), "empty polyline");
    let mut remaining = distance.max(0.0);
    for w in points.windows(2) {
        let leg = geo_distance(w[0], w[1]);
        if remaining <= leg {
            let t = if leg > 0.0 { remaining / leg } else { 0.0 };
            return GeoPoint {
                lon: w[0].lon + t * (w[1].lon - w[0].lon),
                lat: w[0].lat + t * (w[1].lat - w[0].lat),
            };
        }
        remaining -= leg;
    }
    *points.last().unwrap()
}

/// The point halfway along the polyline's cumulative length.
pub fn polyline_midpoint(points: &[GeoPoint]) -> GeoPoint {
    point_along(points, polyline_length(points) / 2.0)
}
