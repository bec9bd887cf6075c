//! Minimal GeoJSON output for map layers, plus a structural validator.

use crate::geo::GeoPoint;
use crate::graph::TransportationGraph;
use crate::ids::UnitId;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Geometry {
    Point { coordinates: [f64; 2] },
    LineString { coordinates: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    #[serde(rename = "type")]
    pub kind: FeatureTag,
    pub geometry: Geometry,
    pub properties: Map<String, Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureTag {
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CollectionTag {
    FeatureCollection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCollection {
    #[serde(rename = "type")]
    pub kind: CollectionTag,
    pub features: Vec<Feature>,
}

impl Default for FeatureCollection {
    fn default() -> Self {
        Self {
            kind: CollectionTag::FeatureCollection,
            features: Vec::new(),
        }
    }
}

impl Feature {
    pub fn new(geometry: Geometry, properties: Map<String, Value>) -> Self {
        Self {
            kind: FeatureTag::Feature,
            geometry,
            properties,
        }
    }
}

impl FeatureCollection {
    pub fn new(features: Vec<Feature>) -> Self {
        Self {
            kind: CollectionTag::FeatureCollection,
            features,
        }
    }

    pub fn extend(&mut self, other: FeatureCollection) {
        self.features.extend(other.features);
    }
}

/// One LineString per unit carrying `unit_id`, `layer` and any `extra`
/// properties. Unknown units are skipped.
pub fn unit_layer<'a>(graph: &TransportationGraph, units: impl IntoIterator<Item = &'a UnitId>, layer: &str, extra: &Map<String, Value>) -> FeatureCollection {
    let features = units
        .into_iter()
        .filter_map(|id| graph.unit(id))
        .map(|u| {
            let mut props = Map::new();
            props.insert("unit_id".into(), Value::String(u.id.to_string()));
            props.insert("layer".into(), Value::String(layer.into()));
            props.extend(extra.clone());
            Feature::new(
                Geometry::LineString {
                    coordinates: u.geometry.iter().map(GeoPoint::as_array).collect(),
                },
                props,
            )
        })
        .collect();
    FeatureCollection::new(features)
}

/// Venue point with the impact radius as a property.
pub fn venue_circle(location: GeoPoint, radius_m: f64, layer: &str, venue_id: &str) -> Feature {
    let mut props = Map::new();
    props.insert("venue_id".into(), Value::String(venue_id.into()));
    props.insert("layer".into(), Value::String(layer.into()));
    props.insert("radius_m".into(), serde_json::json!(radius_m));
    Feature::new(
        Geometry::Point {
            coordinates: location.as_array(),
        },
        props,
    )
}

/// Checks the structural rules of a GeoJSON object: known `type` members,
/// well-formed coordinate arrays, closed polygon rings, object-or-null
/// properties. Returns the first violation with its JSON path.
pub fn validate(value: &Value) -> Result<(), String> {
    validate_object(value, "$")
}

fn type_of<'a>(value: &'a Value, path: &str) -> Result<&'a str, String> {
    value
        .as_object()
        .ok_or_else(|| format!("{path}: expected an object"))?
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| format!("{path}: missing string `type`"))
}

fn validate_object(value: &Value, path: &str) -> Result<(), String> {
    match type_of(value, path)? {
        "FeatureCollection" => {
            let features = value
                .get("features")
                .and_then(Value::as_array)
                .ok_or_else(|| format!("{path}.features: expected an array"))?;
            for (i, f) in features.iter().enumerate() {
                let p = format!("{path}.features[{i}]");
                if type_of(f, &p)? != "Feature" {
                    return Err(format!("{p}: expected a Feature"));
                }
                validate_object(f, &p)?;
            }
            Ok(())
        }
        "Feature" => {
            match value.get("properties") {
                Some(Value::Object(_)) | Some(Value::Null) => {}
                _ => return Err(format!("{path}.properties: expected an object or null")),
            }
            match value.get("geometry") {
                Some(Value::Null) => Ok(()),
                Some(g) => validate_geometry(g, &format!("{path}.geometry")),
                None => Err(format!("{path}: missing `geometry`")),
            }
        }
        _ => validate_geometry(value, path),
    }
}

fn position(v: &Value, path: &str) -> Result<[f64; 2], String> {
    let arr = v.as_array().ok_or_else(|| format!("{path}: position must be an array"))?;
    if arr.len() < 2 {
        return Err(format!("{path}: position needs at least 2 numbers"));
    }
    let nums: Vec<f64> = arr
        .iter()
        .map(|x| x.as_f64().filter(|f| f.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| format!("{path}: position members must be finite numbers"))?;
    if !(-180.0..=180.0).contains(&nums[0]) || !(-90.0..=90.0).contains(&nums[1]) {
        return Err(format!("{path}: position outside longitude/latitude bounds"));
    }
    Ok([nums[0], nums[1]])
}

fn positions(v: &Value, path: &str, min: usize) -> Result<Vec<[f64; 2]>, String> {
    let arr = v.as_array().ok_or_else(|| format!("{path}: expected an array of positions"))?;
    if arr.len() < min {
        return Err(format!("{path}: needs at least {min} positions"));
    }
    arr.iter().enumerate().map(|(i, p)| position(p, &format!("{path}[{i}]"))).collect()
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, String> {
    v.as_array().ok_or_else(|| format!("{path}: expected an array"))
}

fn ring(v: &Value, path: &str) -> Result<(), String> {
    let pts = positions(v, path, 4)?;
    if pts.first() != pts.last() {
        return Err(format!("{path}: linear ring is not closed"));
    }
    Ok(())
}

fn validate_geometry(value: &Value, path: &str) -> Result<(), String> {
    let kind = type_of(value, path)?;
    if kind == "GeometryCollection" {
        let geoms = value
            .get("geometries")
            .ok_or_else(|| format!("{path}: missing `geometries`"))?;
        for (i, g) in array(geoms, path)?.iter().enumerate() {
            validate_geometry(g, &format!("{path}.geometries[{i}]"))?;
        }
        return Ok(());
    }
    let coords = value
        .get("coordinates")
        .ok_or_else(|| format!("{path}: missing `coordinates`"))?;
    let cpath = format!("{path}.coordinates");
    match kind {
        "Point" => position(coords, &cpath).map(|_| ()),
        "MultiPoint" => positions(coords, &cpath, 0).map(|_| ()),
        "LineString" => positions(coords, &cpath, 2).map(|_| ()),
        "MultiLineString" => array(coords, &cpath)?
            .iter()
            .enumerate()
            .try_for_each(|(i, l)| positions(l, &format!("{cpath}[{i}]"), 2).map(|_| ())),
        "Polygon" => array(coords, &cpath)?
            .iter()
            .enumerate()
            .try_for_each(|(i, r)| ring(r, &format!("{cpath}[{i}]"))),
        "MultiPolygon" => array(coords, &cpath)?.iter().enumerate().try_for_each(|(i, poly)| {
            array(poly, &cpath)?
                .iter()
                .enumerate()
                .try_for_each(|(j, r)| ring(r, &format!("{cpath}[{i}][{j}]")))
        }),
        other => Err(format!("{path}: unknown geometry type `{other}`")),
    }
}
