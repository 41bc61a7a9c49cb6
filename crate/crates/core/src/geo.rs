//! Planar geometry on raw lon/lat for county-scale spatial joins.
//!
//! Containment and centroids treat (lon, lat) as Cartesian coordinates, which
//! is accurate enough for sub-kilometre polygons at mid latitudes. Distances
//! use the haversine formula.

use std::collections::HashMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Meters per degree of latitude on the haversine sphere.
pub const METERS_PER_DEGREE: f64 = 2.0 * std::f64::consts::PI * EARTH_RADIUS_M / 360.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidGeometry(format!("longitude {lon} out of range")));
        }
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidGeometry(format!("latitude {lat} out of range")));
        }
        Ok(GeoPoint { lon, lat })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl BBox {
    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a GeoPoint>) -> Option<BBox> {
        let mut iter = points.into_iter();
        let first = iter.next()?;
        let mut bb = BBox {
            min_lon: first.lon,
            min_lat: first.lat,
            max_lon: first.lon,
            max_lat: first.lat,
        };
        for p in iter {
            bb.min_lon = bb.min_lon.min(p.lon);
            bb.min_lat = bb.min_lat.min(p.lat);
            bb.max_lon = bb.max_lon.max(p.lon);
            bb.max_lat = bb.max_lat.max(p.lat);
        }
        Some(bb)
    }

    /// Box covering every point within `radius_m` meters of `center`.
    pub fn around(center: GeoPoint, radius_m: f64) -> BBox {
        // 1% slack keeps the box conservative against the spherical distance.
        let dlat = radius_m / METERS_PER_DEGREE * 1.01;
        let cos = center.lat.to_radians().cos().max(1e-6);
        let dlon = (dlat / cos).min(360.0);
        BBox {
            min_lon: center.lon - dlon,
            min_lat: center.lat - dlat,
            max_lon: center.lon + dlon,
            max_lat: center.lat + dlat,
        }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lon >= self.min_lon && p.lon <= self.max_lon && p.lat >= self.min_lat && p.lat <= self.max_lat
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.min_lon <= other.max_lon
            && other.min_lon <= self.max_lon
            && self.min_lat <= other.max_lat
            && other.min_lat <= self.max_lat
    }

    pub fn width(&self) -> f64 {
        self.max_lon - self.min_lon
    }

    pub fn height(&self) -> f64 {
        self.max_lat - self.min_lat
    }
}

/// A simple polygon with optional holes. Rings are stored closed (first
/// vertex repeated at the end).
#[derive(Debug, Clone, PartialEq)]
pub struct GeoPolygon {
    exterior: Vec<GeoPoint>,
    holes: Vec<Vec<GeoPoint>>,
    bbox: BBox,
}

impl GeoPolygon {
    /// Validates and normalizes the rings. Rings may be given open or
    /// closed; consecutive duplicate vertices are collapsed.
    pub fn new(exterior: Vec<GeoPoint>, holes: Vec<Vec<GeoPoint>>) -> Result<Self> {
        let exterior = normalize_ring(exterior).map_err(|e| Error::InvalidGeometry(format!("exterior ring: {e}")))?;
        let holes = holes
            .into_iter()
            .enumerate()
            .map(|(i, h)| normalize_ring(h).map_err(|e| Error::InvalidGeometry(format!("hole {i}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let bbox = BBox::of_points(&exterior).expect("ring is non-empty");
        Ok(GeoPolygon { exterior, holes, bbox })
    }

    /// Axis-aligned rectangle, handy for footprints and grid cells.
    pub fn rectangle(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self> {
        let ring = vec![
            GeoPoint::new(min_lon, min_lat)?,
            GeoPoint::new(max_lon, min_lat)?,
            GeoPoint::new(max_lon, max_lat)?,
            GeoPoint::new(min_lon, max_lat)?,
        ];
        GeoPolygon::new(ring, Vec::new())
    }

    pub fn exterior(&self) -> &[GeoPoint] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<GeoPoint>] {
        &self.holes
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }
}

fn normalize_ring(ring: Vec<GeoPoint>) -> std::result::Result<Vec<GeoPoint>, String> {
    let mut out: Vec<GeoPoint> = Vec::with_capacity(ring.len() + 1);
    for p in ring {
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    let mut distinct = out.clone();
    distinct.sort_by(|a, b| a.lon.total_cmp(&b.lon).then(a.lat.total_cmp(&b.lat)));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(format!("needs at least 3 distinct vertices, got {}", distinct.len()));
    }
    out.push(out[0]);
    if ring_self_intersects(&out) {
        return Err("ring is self-intersecting".to_string());
    }
    Ok(out)
}

fn cross(o: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    (a.lon - o.lon) * (b.lat - o.lat) - (a.lat - o.lat) * (b.lon - o.lon)
}

fn within_segment_box(a: GeoPoint, b: GeoPoint, p: GeoPoint) -> bool {
    p.lon >= a.lon.min(b.lon) && p.lon <= a.lon.max(b.lon) && p.lat >= a.lat.min(b.lat) && p.lat <= a.lat.max(b.lat)
}

fn on_segment(a: GeoPoint, b: GeoPoint, p: GeoPoint) -> bool {
    cross(a, b, p) == 0.0 && within_segment_box(a, b, p)
}

fn segments_intersect(p1: GeoPoint, p2: GeoPoint, q1: GeoPoint, q2: GeoPoint) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && within_segment_box(q1, q2, p1))
        || (d2 == 0.0 && within_segment_box(q1, q2, p2))
        || (d3 == 0.0 && within_segment_box(p1, p2, q1))
        || (d4 == 0.0 && within_segment_box(p1, p2, q2))
}

/// `ring` is closed. Adjacent edges may only share their common vertex.
fn ring_self_intersects(ring: &[GeoPoint]) -> bool {
    let n = ring.len() - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[i + 1]);
        let seg_box = BBox::of_points([&a, &b]).unwrap();
        for j in (i + 1)..n {
            let (c, d) = (ring[j], ring[j + 1]);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Shared vertex is allowed; a collinear fold back is not.
                let (shared, other_a, other_b) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                if cross(shared, other_a, other_b) == 0.0 {
                    let dot = (other_a.lon - shared.lon) * (other_b.lon - shared.lon)
                        + (other_a.lat - shared.lat) * (other_b.lat - shared.lat);
                    if dot > 0.0 {
                        return true;
                    }
                }
                continue;
            }
            let other_box = BBox::of_points([&c, &d]).unwrap();
            if seg_box.intersects(&other_box) && segments_intersect(a, b, c, d) {
                return true;
            }
        }
    }
    false
}

fn on_ring_boundary(ring: &[GeoPoint], p: GeoPoint) -> bool {
    ring.windows(2).any(|w| on_segment(w[0], w[1], p))
}

/// Even-odd ray casting; boundary handling is done by the caller.
fn ray_cast(ring: &[GeoPoint], p: GeoPoint) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
            if p.lon < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Boundary-inclusive containment: points on the exterior ring or on a hole
/// ring count as inside.
pub fn point_in_polygon(p: GeoPoint, poly: &GeoPolygon) -> bool {
    if !poly.bbox.contains(p) {
        return false;
    }
    if on_ring_boundary(&poly.exterior, p) {
        return true;
    }
    if !ray_cast(&poly.exterior, p) {
        return false;
    }
    for hole in &poly.holes {
        if on_ring_boundary(hole, p) {
            return true;
        }
        if ray_cast(hole, p) {
            return false;
        }
    }
    true
}

/// Signed area and area-weighted centroid of a closed ring, computed relative
/// to `origin` to limit cancellation.
fn ring_moments(ring: &[GeoPoint], origin: GeoPoint) -> (f64, f64, f64) {
    let mut area2 = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for w in ring.windows(2) {
        let (x0, y0) = (w[0].lon - origin.lon, w[0].lat - origin.lat);
        let (x1, y1) = (w[1].lon - origin.lon, w[1].lat - origin.lat);
        let c = x0 * y1 - x1 * y0;
        area2 += c;
        cx += (x0 + x1) * c;
        cy += (y0 + y1) * c;
    }
    (area2 / 2.0, cx, cy)
}

pub fn polygon_area(poly: &GeoPolygon) -> f64 {
    let origin = poly.exterior[0];
    let ext = ring_moments(&poly.exterior, origin).0.abs();
    let holes: f64 = poly.holes.iter().map(|h| ring_moments(h, origin).0.abs()).sum();
    ext - holes
}

/// Area-weighted (shoelace) centroid; holes subtract their area.
pub fn centroid(poly: &GeoPolygon) -> Result<GeoPoint> {
    let origin = poly.exterior[0];
    // Each ring's first moment is normalized to the ring's own orientation so
    // that the exterior always adds and holes always subtract.
    let moment = |ring: &[GeoPoint]| {
        let (a, mx, my) = ring_moments(ring, origin);
        let s = a.signum();
        (a.abs(), mx * s, my * s)
    };
    let (mut area, mut mx, mut my) = moment(&poly.exterior);
    for hole in &poly.holes {
        let (ha, hx, hy) = moment(hole);
        area -= ha;
        mx -= hx;
        my -= hy;
    }
    let scale = poly.bbox.width().max(poly.bbox.height());
    if area.is_nan() || area <= scale * scale * 1e-12 {
        return Err(Error::DegenerateGeometry(format!("polygon area {area} is zero")));
    }
    Ok(GeoPoint {
        lon: origin.lon + mx / (6.0 * area),
        lat: origin.lat + my / (6.0 * area),
    })
}

/// Haversine great-circle distance in meters.
pub fn ground_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Uniform-grid bucket index over bounding boxes. Queries return candidate
/// item indices in ascending order; exact tests are left to the caller.
#[derive(Debug, Clone)]
pub struct BBoxIndex {
    cell: f64,
    boxes: Vec<BBox>,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl BBoxIndex {
    pub fn new(boxes: Vec<BBox>, cell_deg: f64) -> Self {
        assert!(cell_deg > 0.0, "cell size must be positive");
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (idx, bb) in boxes.iter().enumerate() {
            let (x0, y0) = cell_of(cell_deg, bb.min_lon, bb.min_lat);
            let (x1, y1) = cell_of(cell_deg, bb.max_lon, bb.max_lat);
            for x in x0..=x1 {
                for y in y0..=y1 {
                    cells.entry((x, y)).or_default().push(idx);
                }
            }
        }
        BBoxIndex { cell: cell_deg, boxes, cells }
    }

    /// Picks a cell size from the median box extent.
    pub fn with_auto_cell(boxes: Vec<BBox>) -> Self {
        let mut extents: Vec<f64> = boxes.iter().map(|b| b.width().max(b.height())).collect();
        extents.sort_by(f64::total_cmp);
        let cell = extents.get(extents.len() / 2).copied().unwrap_or(0.01).clamp(1e-4, 1.0);
        BBoxIndex::new(boxes, cell)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Items whose box contains `p`.
    pub fn query_point(&self, p: GeoPoint) -> Vec<usize> {
        let key = cell_of(self.cell, p.lon, p.lat);
        let mut out: Vec<usize> = self
            .cells
            .get(&key)
            .map(|v| v.iter().copied().filter(|&i| self.boxes[i].contains(p)).collect())
            .unwrap_or_default();
        out.sort_unstable();
        out
    }

    /// Items whose box intersects `query`.
    pub fn query_bbox(&self, query: &BBox) -> Vec<usize> {
        let (x0, y0) = cell_of(self.cell, query.min_lon, query.min_lat);
        let (x1, y1) = cell_of(self.cell, query.max_lon, query.max_lat);
        let mut out = Vec::new();
        for x in x0..=x1 {
            for y in y0..=y1 {
                if let Some(items) = self.cells.get(&(x, y)) {
                    out.extend(items.iter().copied().filter(|&i| self.boxes[i].intersects(query)));
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn cell_of(cell: f64, lon: f64, lat: f64) -> (i64, i64) {
    ((lon / cell).floor() as i64, (lat / cell).floor() as i64)
}

/// One Polygon feature read from a GeoJSON FeatureCollection.
#[derive(Debug, Clone)]
pub struct PolygonFeature {
    pub properties: Map<String, Value>,
    pub polygon: GeoPolygon,
}

/// Reads a FeatureCollection whose features all carry Polygon geometries.
pub fn read_polygon_features(path: &Path) -> Result<Vec<PolygonFeature>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line() as u64, e.to_string()))?;
    parse_feature_collection(&doc).map_err(|(idx, msg)| Error::parse(path, 0, format!("feature {idx}: {msg}")))
}

fn parse_feature_collection(doc: &Value) -> std::result::Result<Vec<PolygonFeature>, (usize, String)> {
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err((0, "top-level object is not a FeatureCollection".into()));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or((0, "missing features array".to_string()))?;
    features
        .iter()
        .enumerate()
        .map(|(idx, f)| {
            let properties = f.get("properties").and_then(Value::as_object).cloned().unwrap_or_default();
            let geometry = f.get("geometry").ok_or((idx, "missing geometry".to_string()))?;
            let polygon = polygon_from_geometry(geometry).map_err(|m| (idx, m))?;
            Ok(PolygonFeature { properties, polygon })
        })
        .collect()
}

fn polygon_from_geometry(geometry: &Value) -> std::result::Result<GeoPolygon, String> {
    match geometry.get("type").and_then(Value::as_str) {
        Some("Polygon") => {}
        Some(other) => return Err(format!("unsupported geometry type {other}")),
        None => return Err("geometry without type".into()),
    }
    let rings = geometry
        .get("coordinates")
        .and_then(Value::as_array)
        .ok_or("Polygon without coordinates")?;
    let mut parsed = rings
        .iter()
        .map(|ring| {
            ring.as_array()
                .ok_or_else(|| "ring is not an array".to_string())?
                .iter()
                .map(|pos| {
                    let pos = pos.as_array().filter(|p| p.len() >= 2).ok_or("bad position")?;
                    let lon = pos[0].as_f64().ok_or("non-numeric coordinate")?;
                    let lat = pos[1].as_f64().ok_or("non-numeric coordinate")?;
                    GeoPoint::new(lon, lat).map_err(|e| e.to_string())
                })
                .collect::<std::result::Result<Vec<_>, String>>()
        })
        .collect::<std::result::Result<Vec<_>, String>>()?;
    if parsed.is_empty() {
        return Err("Polygon with no rings".into());
    }
    let exterior = parsed.remove(0);
    GeoPolygon::new(exterior, parsed).map_err(|e| e.to_string())
}

pub fn polygon_to_geometry(poly: &GeoPolygon) -> Value {
    let ring = |r: &[GeoPoint]| Value::Array(r.iter().map(|p| json!([p.lon, p.lat])).collect());
    let mut rings = vec![ring(&poly.exterior)];
    rings.extend(poly.holes.iter().map(|h| ring(h)));
    json!({ "type": "Polygon", "coordinates": rings })
}

pub fn feature_collection(features: Vec<(Map<String, Value>, &GeoPolygon)>) -> Value {
    let features: Vec<Value> = features
        .into_iter()
        .map(|(props, poly)| {
            json!({
                "type": "Feature",
                "properties": Value::Object(props),
                "geometry": polygon_to_geometry(poly),
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}
